"""Time the GRU recurrence on both backends and check they agree.

    python3 benchmarks/bench_gru.py [--batch 16] [--steps 40] [--hidden 32] [--repeat 20]
"""
import argparse
import statistics
import time

import numpy as np

from deconfound.netcore import kernels


def make_inputs(batch, steps, hidden, seed=0):
    rng = np.random.default_rng(seed)
    xw = rng.normal(scale=0.5, size=(batch, steps, 3 * hidden))
    U = rng.normal(scale=1 / np.sqrt(hidden), size=(hidden, 3 * hidden))
    h0 = np.zeros((batch, hidden))
    lengths = rng.integers(steps // 2, steps + 1, batch)
    mask = (np.arange(steps)[None, :] < lengths[:, None]).astype(np.float64)
    return xw, U, h0, mask


def time_backend(name, inputs, repeat):
    kernels.use_backend(name)
    xw, U, h0, mask = inputs
    fwd, bwd = [], []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        hs, cache = kernels.gru_forward(xw, U, h0, mask)
        t1 = time.perf_counter()
        grads = kernels.gru_backward(np.ones_like(hs), U, h0, mask, hs, cache)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
        out = (hs, grads)
    return statistics.median(fwd), statistics.median(bwd), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    inputs = make_inputs(args.batch, args.steps, args.hidden)
    initial = kernels.BACKEND
    results = {}
    try:
        results["python"] = time_backend("python", inputs, args.repeat)
        if kernels.HAVE_COMPILED:
            results["compiled"] = time_backend("compiled", inputs, args.repeat)
    finally:
        kernels.use_backend(initial)

    print(f"batch={args.batch} steps={args.steps} hidden={args.hidden} repeat={args.repeat}")
    print(f"{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    for name, (f, b, _) in results.items():
        print(f"{name:<10}{1e3 * f:>12.3f}{1e3 * b:>13.3f}")
    if "compiled" not in results:
        print("compiled backend not built; rebuild with: pip install -e . --no-build-isolation")
        return 0
    (hp, gp), (hc, gc) = results["python"][2], results["compiled"][2]
    diff = max(np.abs(hp - hc).max(), *(np.abs(a - b).max() for a, b in zip(gp, gc)))
    pf, pb, _ = results["python"]
    cf, cb, _ = results["compiled"]
    print(f"speedup   forward x{pf / cf:.2f}  backward x{pb / cb:.2f}")
    print(f"max abs difference between backends: {diff:.2e}")
    return 0 if diff < 1e-12 else 1


if __name__ == "__main__":
    raise SystemExit(main())
