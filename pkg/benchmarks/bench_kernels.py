"""Time the compiled rollout kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--segments 20] [--steps 360] [--repeat 5]

One calibration iteration costs one forward and one adjoint sweep, so the
sum of the two columns is the per-iteration cost of each backend.
"""
import argparse
import timeit

import numpy as np

from metanet_calib import _kernels_py

try:
    from metanet_calib import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None


def make_case(n, T, seed=0):
    rng = np.random.default_rng(seed)
    P = np.array([rng.uniform(lo, hi, n) for lo, hi in
                  [(15 / 3600, 60 / 3600), (15, 60), (5, 60), (110, 150), (15, 100), (0.5, 5)]])
    return dict(rho0=rng.uniform(10, 150, n), v0=rng.uniform(20, 110, n), lanes=np.full(n, 3.0), params=P,
                r=rng.uniform(0, 500, (T, n)), beta=rng.uniform(0, 0.3, (T, n)), up_q=rng.uniform(2000, 5000, T),
                up_v=rng.uniform(60, 100, T), down_rho=rng.uniform(20, 90, T), down_lanes=3.0, L=0.4,
                delta=10 / 3600, v_min=1.0)


def forward(mod, c):
    return mod.forward(c["rho0"], c["v0"], c["lanes"], c["params"], c["r"], c["beta"], c["up_q"], c["up_v"],
                       c["down_rho"], c["down_lanes"], c["L"], c["delta"], c["v_min"])


def adjoint(mod, c, fwd, g_rho, g_v):
    rho, v, flags = fwd
    return mod.adjoint(rho, v, flags, c["lanes"], c["params"], c["beta"], c["up_v"], c["down_rho"],
                       c["down_lanes"], c["L"], c["delta"], g_rho, g_v)


def best_ms(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.2:
        number *= 2
    return 1e3 * min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--segments", type=int, default=20)
    ap.add_argument("--steps", type=int, default=360)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    c = make_case(args.segments, args.steps)
    rng = np.random.default_rng(1)
    g_rho = rng.normal(size=(args.steps, args.segments))
    g_v = rng.normal(size=(args.steps, args.segments))
    backends = [("python", _kernels_py)] + ([("cython", _kernels_cy)] if _kernels_cy is not None else [])

    print(f"grid {args.steps} x {args.segments}, best of {args.repeat}")
    print(f"{'backend':<8} {'forward ms':>11} {'adjoint ms':>11} {'total ms':>10}")
    totals = {}
    for name, mod in backends:
        fwd = forward(mod, c)
        t_f = best_ms(lambda: forward(mod, c), args.repeat)
        t_a = best_ms(lambda: adjoint(mod, c, fwd, g_rho, g_v), args.repeat)
        totals[name] = t_f + t_a
        print(f"{name:<8} {t_f:>11.3f} {t_a:>11.3f} {t_f + t_a:>10.3f}")
    if "cython" in totals:
        print(f"speedup  {totals['python'] / totals['cython']:.1f}x")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
