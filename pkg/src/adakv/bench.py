"""Theory quantities, policy comparison runs and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .controller import ControllerParams
from .engine import (
    DecodeTrace,
    PrecisionPolicy,
    ReferenceRun,
    TinyModelConfig,
    build_model,
    generate,
    reference_decode,
)
from .quant import ALL_WIDTHS, InvalidInputError
from .saliency import TokenCounter
from .trainer import DEFAULT_COST

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "policy",
    "token_agreement",
    "mean_distortion",
    "expected_bits",
    "total_storage_bits",
    "storage_bits_without_overhead",
    "latency_proxy",
    "latency_savings",
    "waste_estimate",
    "tokens",
    "wall_clock_ms_per_token",
    "seed",
    "config_id",
    "schema_version",
)


class ConfigError(Exception):
    """Benchmark configuration is missing, malformed or inconsistent."""


class InvalidComparisonError(ValueError):
    """Two reports do not come from the same model, corpus and step count."""


# ---------------------------------------------------------------------------
# theory quantities


def huffman_length(p: float) -> int:
    """Optimal prefix-code length ``ceil(-log2 p)``."""
    if not 0.0 < p <= 1.0:
        raise InvalidInputError(f"probability {p} outside (0, 1]")
    m, e = math.frexp(p)
    if m == 0.5:
        # exact power of two: -log2 p is the integer 1 - e
        return 1 - e
    return math.ceil(-math.log2(p))


def _bits_of(trace) -> np.ndarray:
    bits = trace.bits if isinstance(trace, DecodeTrace) else [int(b) for b in trace]
    if len(bits) == 0:
        raise InvalidInputError("trace is empty")
    return np.asarray(bits, dtype=np.float64)


def expected_bits(trace) -> float:
    """Mean assigned bit-width. Accepts a :class:`DecodeTrace` or a bit sequence."""
    return float(_bits_of(trace).mean())


def latency_proxy(trace, cost=DEFAULT_COST) -> float:
    bits = _bits_of(trace)
    c = dict(zip((int(b) for b in ALL_WIDTHS), cost))
    return float(sum(c[int(b)] for b in bits))


def latency_savings(trace, cost=DEFAULT_COST) -> float:
    """Sum over tokens stored below 16 bits of ``c_16 - c_b``."""
    bits = _bits_of(trace)
    c = dict(zip((int(b) for b in ALL_WIDTHS), cost))
    return float(sum(c[16] - c[int(b)] for b in bits if b < 16))


def waste_estimate(trace, counter: TokenCounter) -> float:
    """Expected bits minus the empirical base-2 entropy of the token stream."""
    return expected_bits(trace) - counter.entropy_bits()


@dataclass(frozen=True)
class ParetoResult:
    dominates: bool
    latency_margin: float  # fixed minus adaptive; positive favours adaptive
    agreement_gap: float   # |fixed - adaptive|
    epsilon: float

    def __bool__(self):
        return self.dominates


def pareto_check(adaptive: "BenchReport", fixed: "BenchReport", epsilon: float) -> ParetoResult:
    if adaptive.config_id != fixed.config_id:
        raise InvalidComparisonError(
            f"reports come from different runs ({adaptive.config_id} vs {fixed.config_id})"
        )
    margin = fixed.latency_proxy - adaptive.latency_proxy
    gap = abs(fixed.token_agreement - adaptive.token_agreement)
    return ParetoResult(margin > 0 and gap < epsilon, margin, gap, epsilon)


# ---------------------------------------------------------------------------
# reports


@dataclass
class BenchReport:
    policy: str
    token_agreement: float
    mean_distortion: float
    expected_bits: float
    total_storage_bits: int
    storage_bits_without_overhead: int
    latency_proxy: float
    latency_savings: float
    waste_estimate: float
    tokens: int
    seed: int
    config_id: str
    config: dict = field(default_factory=dict)
    wall_clock_ms_per_token: float | None = None
    pareto: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 2.0 <= self.expected_bits <= 16.0:
            raise InvalidInputError(f"expected_bits {self.expected_bits} outside [2, 16]")
        if not 0.0 <= self.token_agreement <= 1.0:
            raise InvalidInputError(f"token_agreement {self.token_agreement} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported report schema version {d.get('schema_version')!r}")
        return cls(**d)


def emit_report(reports, path, format: str = "json") -> Path:
    path = Path(path)
    try:
        if format == "json":
            payload = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
            path.write_text(payload + "\n")
        elif format == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for r in reports:
                    d = r.to_dict()
                    w.writerow(["" if d[c] is None else d[c] for c in CSV_COLUMNS])
        else:
            raise ValueError(f"unknown report format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_reports(path) -> list[BenchReport]:
    return [BenchReport.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusSpec:
    """Seeded synthetic prompts: Zipf unigrams interleaved with repeated motifs."""

    seed: int = 1
    prompts: int = 20
    prompt_length: int = 32
    zipf_exponent: float = 1.1
    motifs: int = 4
    motif_length: int = 6
    motif_prob: float = 0.3


def make_corpus(spec: CorpusSpec, vocab: int) -> list[list[int]]:
    rng = np.random.default_rng(spec.seed)
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    probs = ranks ** -spec.zipf_exponent
    probs /= probs.sum()
    perm = rng.permutation(vocab)
    motifs = [rng.integers(0, vocab, spec.motif_length).tolist() for _ in range(spec.motifs)]
    out = []
    for _ in range(spec.prompts):
        seq: list[int] = []
        while len(seq) < spec.prompt_length:
            if motifs and rng.random() < spec.motif_prob:
                seq.extend(motifs[rng.integers(len(motifs))])
            else:
                seq.append(int(perm[rng.choice(vocab, p=probs)]))
        out.append([int(t) for t in seq[: spec.prompt_length]])
    return out


# ---------------------------------------------------------------------------
# configuration


@dataclass
class BenchConfig:
    model: TinyModelConfig = field(default_factory=TinyModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train_corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(seed=1001))
    steps: int = 200
    policies: tuple = ("full16", "static2", "static4", "static8", "rule", "adaptive")
    rule_thresholds: tuple | str = "auto"
    controller: str | None = None
    cost: tuple = DEFAULT_COST
    tau: float = 0.05
    label_window: int = 16
    loss_weights: dict = field(default_factory=lambda: {"alpha": 1.0, "beta": 0.1, "gamma": 0.1})
    pareto_epsilon: float = 0.05
    workers: int = 1
    base_dir: str = "."

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d.pop("workers")
        d["policies"] = list(self.policies)
        d["cost"] = list(self.cost)
        if not isinstance(self.rule_thresholds, str):
            d["rule_thresholds"] = list(self.rule_thresholds)
        return d

    def config_id(self) -> str:
        core = {k: v for k, v in self.echo().items() if k in ("model", "corpus", "steps")}
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]

    def controller_path(self) -> Path | None:
        if self.controller is None:
            return None
        p = Path(self.controller)
        return p if p.is_absolute() else Path(self.base_dir) / p


_TOP_KEYS = {
    "model", "corpus", "train_corpus", "steps", "policies", "rule_thresholds", "controller",
    "cost", "tau", "label_window", "loss_weights", "pareto_epsilon", "workers",
}


def config_from_dict(raw: dict, base_dir=".") -> BenchConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        kw = dict(raw)
        if "model" in kw:
            kw["model"] = TinyModelConfig(**kw["model"])
        for key in ("corpus", "train_corpus"):
            if key in kw:
                kw[key] = CorpusSpec(**kw[key])
        if "policies" in kw:
            kw["policies"] = tuple(kw["policies"])
            for name in kw["policies"]:
                _check_policy_name(name)
        if "cost" in kw:
            kw["cost"] = tuple(float(c) for c in kw["cost"])
        if isinstance(kw.get("rule_thresholds"), list):
            kw["rule_thresholds"] = tuple(float(t) for t in kw["rule_thresholds"])
        if "loss_weights" in kw:
            lw = kw["loss_weights"]
            if set(lw) - {"alpha", "beta", "gamma"}:
                raise ConfigError("loss_weights accepts only alpha, beta, gamma")
            kw["loss_weights"] = {"alpha": 1.0, "beta": 0.1, "gamma": 0.1, **lw}
        cfg = BenchConfig(**kw, base_dir=str(base_dir))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.steps < 0:
        raise ConfigError("steps must be non-negative")
    return cfg


def load_config(path) -> BenchConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


def _check_policy_name(name):
    if name in ("full16", "rule", "adaptive"):
        return
    if name.startswith("static") and name[6:] in ("2", "4", "8", "16"):
        return
    raise ConfigError(f"unknown policy {name!r}")


def calibrate_rule_thresholds(entropies) -> tuple:
    """Entropy quartiles, so the rule policy spreads tokens evenly over the four widths."""
    q = np.percentile(np.asarray(entropies, dtype=np.float64), [25, 50, 75])
    # strictly increasing even for degenerate inputs
    for i in (1, 2):
        if q[i] <= q[i - 1]:
            q[i] = np.nextafter(q[i - 1], np.inf)
    return tuple(float(t) for t in q)


def make_policy(name: str, cfg: BenchConfig, thresholds=None, controller=None) -> PrecisionPolicy:
    if name == "full16":
        return PrecisionPolicy.full16()
    if name.startswith("static"):
        return PrecisionPolicy.static(int(name[6:]))
    if name == "rule":
        return PrecisionPolicy.rule(thresholds)
    if name == "adaptive":
        return PrecisionPolicy.adaptive(controller)
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# benchmark run


def _reference_job(args):
    model_cfg, prompt, steps = args
    return reference_decode(build_model(model_cfg), prompt, steps)


@dataclass
class _RunResult:
    bits: list
    agree: int
    distortion_sum: float
    storage: int
    storage_raw: int
    tokens: list
    seconds: float


def _policy_job(args):
    model_cfg, policy, ref, counter, wall_clock = args
    model = build_model(model_cfg)
    start = time.perf_counter()
    trace = generate(model, ref.tokens[: ref.prompt_length], len(ref.tokens) - ref.prompt_length,
                     policy, reference=ref, counter=counter)
    seconds = time.perf_counter() - start if wall_clock else 0.0
    d = model_cfg.head_dim
    per_entry = 2 * model_cfg.heads * model_cfg.layers
    return _RunResult(
        bits=trace.bits,
        agree=sum(s.next_token == s.reference_next_token for s in trace.steps),
        distortion_sum=math.fsum(s.distortion for s in trace.steps),
        storage=sum(s.storage_bits for s in trace.steps),
        storage_raw=sum(per_entry * d * int(s.bits) for s in trace.steps),
        tokens=trace.tokens,
        seconds=seconds,
    )


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def reference_runs(cfg: BenchConfig, corpus=None) -> list[ReferenceRun]:
    corpus = corpus if corpus is not None else make_corpus(cfg.corpus, cfg.model.vocab)
    return _map(_reference_job, [(cfg.model, p, cfg.steps) for p in corpus], cfg.workers)


def _counter_prefixes(refs):
    # rarity counts persist across the prompts of one run
    counter = TokenCounter()
    out = []
    for r in refs:
        out.append(counter.copy())
        for t in r.tokens:
            counter.update(t)
    return out, counter


def resolve_rule_thresholds(cfg: BenchConfig):
    if not isinstance(cfg.rule_thresholds, str):
        return tuple(cfg.rule_thresholds)
    if cfg.rule_thresholds != "auto":
        raise ConfigError(f"rule_thresholds must be 3 numbers or 'auto', got {cfg.rule_thresholds!r}")
    # calibrated on the training corpus, never on the benchmark prompts
    model = build_model(cfg.model)
    counter = TokenCounter()
    ents = []
    for prompt in make_corpus(cfg.train_corpus, cfg.model.vocab):
        trace = generate(model, prompt, cfg.steps, PrecisionPolicy.full16(), counter=counter)
        ents.extend(s.features.entropy for s in trace.steps)
    return calibrate_rule_thresholds(ents)


def run_benchmark(cfg: BenchConfig, wall_clock: bool = False, controller: ControllerParams | None = None):
    """Dual-run every policy over the corpus and aggregate one report per policy."""
    if "adaptive" in cfg.policies and controller is None:
        path = cfg.controller_path()
        if path is None:
            raise ConfigError("adaptive policy requested but no controller file configured")
        if not path.is_file():
            raise ConfigError(f"controller file not found: {path}")
        try:
            controller = ControllerParams.load(path)
        except InvalidInputError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    thresholds = resolve_rule_thresholds(cfg) if "rule" in cfg.policies else None
    policies = [make_policy(n, cfg, thresholds, controller) for n in cfg.policies]

    refs = reference_runs(cfg)
    prefixes, full_counter = _counter_prefixes(refs)
    jobs = [(cfg.model, pol, ref, pre.copy(), wall_clock) for pol in policies for ref, pre in zip(refs, prefixes)]
    results = _map(_policy_job, jobs, cfg.workers)

    echo = cfg.echo()
    if thresholds is not None:
        echo["rule_thresholds_resolved"] = list(thresholds)
    cid = cfg.config_id()
    reports = []
    for pi, pol in enumerate(policies):
        chunk = results[pi * len(refs):(pi + 1) * len(refs)]
        bits = [b for r in chunk for b in r.bits]
        n = len(bits)
        reports.append(BenchReport(
            policy=pol.name,
            token_agreement=sum(r.agree for r in chunk) / n,
            mean_distortion=math.fsum(r.distortion_sum for r in chunk) / n,
            expected_bits=expected_bits(bits),
            total_storage_bits=sum(r.storage for r in chunk),
            storage_bits_without_overhead=sum(r.storage_raw for r in chunk),
            latency_proxy=latency_proxy(bits, cfg.cost),
            latency_savings=latency_savings(bits, cfg.cost),
            waste_estimate=waste_estimate(bits, full_counter),
            tokens=n,
            seed=cfg.model.seed,
            config_id=cid,
            config=echo,
            wall_clock_ms_per_token=(1000.0 * sum(r.seconds for r in chunk) / n) if wall_clock else None,
        ))
    fixed = [r for r in reports if r.policy == "full16" or r.policy.startswith("static")]
    for r in reports:
        if r.policy in ("adaptive", "rule"):
            r.pareto = {f.policy: asdict(pareto_check(r, f, cfg.pareto_epsilon)) for f in fixed}
    return reports
