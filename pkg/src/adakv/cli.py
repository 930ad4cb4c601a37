"""Command-line entry point: ``adakv <subcommand>``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import kernels
from .bench import ConfigError, emit_report, load_config, make_corpus, run_benchmark
from .engine import build_model
from .quant import ALL_WIDTHS, InvalidInputError, dequantize, quantize, storage_bits
from .trainer import LossWeights, TrainConfig, build_dataset, read_dataset, train, write_dataset

log = logging.getLogger("adakv")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def cmd_quantize_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    print(f"kernel backend: {kernels.BACKEND}")
    for i in range(args.vectors):
        x = rng.standard_normal(args.dim)
        print(f"vector {i}: {np.array2string(x, precision=4, max_line_width=200)}")
        for b in ALL_WIDTHS:
            q = quantize(x, b)
            err = np.abs(dequantize(q) - x).max()
            print(f"  {int(b):2d}-bit  max|err|={err:.3e}  scale={q.scale:.4g}  "
                  f"zero={q.zero_point:.4g}  storage={storage_bits(q)} bits")
    return EXIT_OK


def cmd_label_oracle(args) -> int:
    cfg = load_config(args.model_config)
    corpus_spec = cfg.train_corpus if args.seed is None else replace(cfg.train_corpus, seed=args.seed)
    model = build_model(cfg.model)
    prompts = make_corpus(corpus_spec, cfg.model.vocab)
    samples = build_dataset(model, prompts, cfg.steps, args.tau, cfg.label_window, cfg.cost,
                            per_token_budget=not args.raw_distortion)
    write_dataset(samples, args.out)
    counts = {int(b): sum(int(s.label) == int(b) for s in samples) for b in ALL_WIDTHS}
    print(f"wrote {len(samples)} samples to {args.out}; labels {counts}")
    return EXIT_OK


def cmd_train_controller(args) -> int:
    data = read_dataset(args.data)
    weights = LossWeights(args.alpha, args.beta, args.gamma)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, lr=args.lr,
                         patience=None if args.patience <= 0 else args.patience, weights=weights)
    params, history = train(data, config)
    params.save(args.out)
    last = history[-1]
    print(f"trained {len(history)} epochs; val accuracy {last.val_accuracy:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_run_bench(args) -> int:
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.controller is not None:
        cfg.controller = args.controller
        cfg.base_dir = "."
    reports = run_benchmark(cfg, wall_clock=args.wall_clock)
    emit_report(reports, args.out, args.format)
    for r in reports:
        print(f"{r.policy:10s} agreement={r.token_agreement:.4f} distortion={r.mean_distortion:.5f} "
              f"E[b]={r.expected_bits:.3f} latency_proxy={r.latency_proxy:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adakv", description="Adaptive-precision KV-cache toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize-demo", help="print codec round-trips for random vectors")
    q.add_argument("--dim", type=int, default=16)
    q.add_argument("--vectors", type=int, default=3)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize_demo)

    lo = sub.add_parser("label-oracle", help="build an oracle-labelled JSONL dataset")
    lo.add_argument("--model-config", required=True, help="benchmark config file (model and train corpus)")
    lo.add_argument("--out", required=True)
    lo.add_argument("--tau", type=float, default=0.05)
    lo.add_argument("--seed", type=int, default=None, help="override the training corpus seed")
    lo.add_argument("--raw-distortion", action="store_true",
                    help="compare single-token distortion to tau without the per-token budget")
    lo.set_defaults(func=cmd_label_oracle)

    tc = sub.add_parser("train-controller", help="train the precision controller")
    tc.add_argument("--data", required=True)
    tc.add_argument("--out", required=True)
    tc.add_argument("--alpha", type=float, default=1.0)
    tc.add_argument("--beta", type=float, default=0.1)
    tc.add_argument("--gamma", type=float, default=0.1)
    tc.add_argument("--epochs", type=int, default=100)
    tc.add_argument("--batch", type=int, default=64)
    tc.add_argument("--lr", type=float, default=1e-3)
    tc.add_argument("--patience", type=int, default=10, help="early-stop patience; 0 disables")
    tc.add_argument("--seed", type=int, default=0)
    tc.set_defaults(func=cmd_train_controller)

    rb = sub.add_parser("run-bench", help="compare precision policies")
    rb.add_argument("--config", required=True)
    rb.add_argument("--out", required=True)
    rb.add_argument("--format", choices=("json", "csv"), default="json")
    rb.add_argument("--wall-clock", action="store_true", help="also time decoding (non-normative)")
    rb.add_argument("--workers", type=int, default=None)
    rb.add_argument("--controller", default=None, help="controller file; overrides the config entry")
    rb.set_defaults(func=cmd_run_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidInputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
