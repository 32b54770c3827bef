"""Compare the numba kernels with the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Each kernel is called once untimed (numba compiles on first call) and then
timed over ``--repeat`` calls per backend. Prints a JSON table.
"""
import argparse
import json
import time

import numpy as np

from eve import kernels


def cases(g):
    act = g.standard_normal((32 * 81, 256)).astype(np.float32)
    rows = g.standard_normal((32 * 81, 64)).astype(np.float32)
    scores = g.standard_normal((32 * 4 * 81, 81)).astype(np.float32)
    valid = np.ones((32, 81), dtype=bool)
    valid[:, 75:] = False
    logits = g.standard_normal((512, 25)).astype(np.float32)
    tgt = g.integers(0, 25, 512)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    y_sm = kernels._numpy.softmax_fwd(scores)
    p = g.standard_normal(64 * 256).astype(np.float32)
    t = np.tanh(act)
    _, xhat, rstd = kernels._numpy.layernorm_fwd(rows, gamma, beta, 1e-5)
    return {
        "gelu_fwd": lambda: kernels.gelu_fwd(act),
        "gelu_bwd": lambda: kernels.gelu_bwd(act, t, act),
        "layernorm_fwd": lambda: kernels.layernorm_fwd(rows, gamma, beta, 1e-5),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(rows, xhat, rstd, gamma),
        "masked_softmax_fwd": lambda: kernels.masked_softmax_fwd(scores, valid, 4 * 81),
        "softmax_bwd": lambda: kernels.softmax_bwd(y_sm, scores),
        "cross_entropy_fwd": lambda: kernels.cross_entropy_fwd(logits, tgt),
        "adamw_update": lambda: kernels.adamw_update(p, p, p.copy(), np.abs(p), 1e-3, 0.9, 0.98, 1e-8,
                                                     0.05, 0.1, 0.02),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    results = {}
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        for name, fn in cases(np.random.default_rng(0)).items():
            fn()
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                fn()
            results.setdefault(name, {})[backend] = (time.perf_counter() - t0) / args.repeat * 1e3
    for row in results.values():
        if "numba" in row and "numpy" in row:
            row["speedup"] = row["numpy"] / row["numba"]
    print(json.dumps({"unit": "ms per call", "kernels": results}, indent=2))


if __name__ == "__main__":
    main()
