"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-N wall time for the row codec, the heterogeneous-cache
attention kernel, and a short end-to-end decode under each backend.
"""

import argparse
import timeit

import numpy as np

from adakv import _pykernels, kernels
from adakv.engine import PrecisionPolicy, TinyModelConfig, build_model, generate


def _workloads(rng):
    rows = rng.standard_normal((4096, 16))
    n, h, d = 256, 2, 16
    k_pay = np.floor(rng.uniform(0, 16, (n, h, d)))
    v_pay = np.floor(rng.uniform(0, 16, (n, h, d)))
    k_scale, v_scale = rng.uniform(0.01, 0.1, (n, h)), rng.uniform(0.01, 0.1, (n, h))
    k_zero, v_zero = rng.standard_normal((n, h)), rng.standard_normal((n, h))
    q = rng.standard_normal((h, d))
    att = (q, k_pay, k_scale, k_zero, v_pay, v_scale, v_zero, n)
    return rows, att


def _time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def run(repeat: int):
    rng = np.random.default_rng(0)
    rows, att = _workloads(rng)
    model = build_model(TinyModelConfig())
    impls = {"python": _pykernels}
    if kernels.BACKEND == "cython":
        from adakv import _ckernels
        impls["cython"] = _ckernels
    results = {}
    saved = kernels.quantize_rows, kernels.hetero_attention
    try:
        for name, mod in impls.items():
            kernels.quantize_rows, kernels.hetero_attention = mod.quantize_rows, mod.hetero_attention
            results[name] = {
                "quantize_rows 4096x16 @4b": _time(lambda: mod.quantize_rows(rows, 4), repeat, 20),
                "hetero_attention n=256": _time(lambda: mod.hetero_attention(*att), repeat, 200),
                "decode 16+100 tokens": _time(
                    lambda: generate(model, list(range(16)), 100, PrecisionPolicy.static(4)), repeat, 1),
            }
    finally:
        kernels.quantize_rows, kernels.hetero_attention = saved
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    results = run(args.repeat)
    names = list(results)
    print(f"{'workload':30s}" + "".join(f"{n:>14s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for key in results["python"]:
        times = [results[n][key] for n in names]
        line = f"{key:30s}" + "".join(f"{t * 1e3:11.3f} ms" for t in times)
        if len(names) > 1:
            line += f"   {times[0] / times[1]:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
