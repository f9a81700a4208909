"""Time the compiled kernels against the numpy fallback on agent-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from paramnoise import _kernels_py

try:
    from paramnoise import _kernels
except ImportError:  # extension not built
    _kernels = None


def workloads(rng):
    widths = [128, 64, 64, 4]
    params = [(rng.normal(size=(o, i)) / np.sqrt(i), rng.normal(size=o)) for i, o in zip(widths, widths[1:])]
    x1 = rng.uniform(size=(1, 128))
    xb = rng.uniform(size=(32, 128))
    actions = rng.integers(0, 4, size=32)
    y = rng.normal(size=32)
    gq = rng.normal(size=4)
    mu, sigma = rng.normal(size=(64, 128)), rng.normal(size=(64, 128))
    fo, fi = rng.normal(size=64), rng.normal(size=128)
    return {
        "forward, 1 obs": lambda m: m.mlp_forward(params, x1),
        "forward, batch 32": lambda m: m.mlp_forward(params, xb),
        "td gradient, batch 32": lambda m: m.td_grad(params, xb, actions, y),
        "input gradient (FGSM)": lambda m: m.input_grad(params, x1[0], gq),
        "noisy weights 64x128": lambda m: m.noisy_weights(mu, sigma, fo, fi),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    backends = [("numpy", _kernels_py)] + ([("compiled", _kernels)] if _kernels else [])
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name, _ in backends) + ("     speedup" if _kernels else ""))
    for label, fn in workloads(np.random.default_rng(0)).items():
        times = []
        for _, mod in backends:
            fn(mod)
            best = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3))
            times.append(best / args.repeat * 1e6)
        row = f"{label:<24}" + "".join(f"{t:>11.1f} us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
