"""Compare the compiled kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3]

Each kernel is timed on both backends and the outputs are checked for
bitwise equality.
"""
import argparse
import time

import numpy as np

from escapemeta import _backend
from escapemeta.maps import make_doubling
from escapemeta.metastable import benchmark_family
from escapemeta.montecarlo import RngSpec, simulate_stationary, simulate_survival
from escapemeta.noise import HoleFamily, make_condition_C_noise, make_uniform_noise
from escapemeta.ulam import build_grid


def _best(fn, repeat):
    out, best = None, np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def cases():
    tmap = make_doubling()
    grid = build_grid(2**16)
    lo = np.array([b.lo for b in tmap.branches])
    sl = np.array([b.slope for b in tmap.branches])
    ic = np.array([b.intercept for b in tmap.branches])
    holes = HoleFamily(0.0, circle=True)
    noise = make_condition_C_noise(2.0**-6, 2, 8)
    fam = benchmark_family(2.0)
    meta_noise = make_uniform_noise(1e-2, 4)

    def transition(backend):
        return _backend.get_kernels(backend).affine_transition(grid.cuts, grid.cuts, lo, sl, ic)

    def survival(backend):
        return simulate_survival(tmap, holes, noise, 300, 200_000, RngSpec(2026), fit=False,
                                 backend=backend).survivors

    def stationary(backend):
        return simulate_stationary(fam, meta_noise, 20_000, 1_000, RngSpec(2026), bins=1024, n_chains=64,
                                   backend=backend).density.values

    return [("affine_transition N=2^16", transition), ("survival 2e5 x 300", survival),
            ("stationary 64 x 2e4", stationary)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _backend.HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':28s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s}  identical")
    for name, fn in cases():
        py, t_py = _best(lambda: fn("python"), args.repeat)
        cc, t_cc = _best(lambda: fn("compiled"), args.repeat)
        same = all(np.array_equal(a, b) for a, b in zip(py, cc)) if isinstance(py, tuple) else np.array_equal(py, cc)
        print(f"{name:28s} {t_py:10.3f} {t_cc:11.3f} {t_py / t_cc:8.1f}  {same}")


if __name__ == "__main__":
    main()
