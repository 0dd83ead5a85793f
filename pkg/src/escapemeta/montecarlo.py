"""Monte Carlo oracle: survival decay of open systems and stationary histograms.

Nothing here touches the Ulam code path.  Trajectories are simulated
pointwise by the hot kernels with one counter-based random stream per
trajectory, so results depend only on the seed and the trajectory index and
never on how the work is split across processes.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .maps import PiecewiseMap
from .noise import HoleFamily, NoiseModel
from .ulam import DensityVector, Grid

# added after every map step; keeps float orbits of the doubling map from
# collapsing onto 0 once the 52 mantissa bits are shifted out
DITHER = 2.0 ** -52
CHUNK = 1 << 17


class FitError(ValueError):
    def __init__(self, msg, curve=None):
        super().__init__(msg)
        self.curve = curve


@dataclass(frozen=True)
class RngSpec:
    """Master seed; trajectory ``i`` uses the substream keyed by ``(seed, i)``."""

    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class SurvivalCurve:
    survivors: np.ndarray
    n_traj: int
    seed: int
    lambda_hat: float = math.nan
    stderr: float = math.nan
    window: tuple = (0, -1)
    r_squared: float = math.nan

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.survivors.size)


def _affine_arrays(tmap: PiecewiseMap):
    if not tmap.is_affine:
        raise ValueError("the simulation kernels need affine branches")
    return (np.array([b.lo for b in tmap.branches]), np.array([b.slope for b in tmap.branches]),
            np.array([b.intercept for b in tmap.branches]))


def _hole_arrays(noise: NoiseModel, holes: HoleFamily):
    per_atom = [holes.holes(w) for w in noise.omegas]
    width = max(1, max(len(h) for h in per_atom))
    lo = np.full((len(per_atom), width), np.inf)
    hi = np.full((len(per_atom), width), -np.inf)
    for a, ivs in enumerate(per_atom):
        for j, (l, h) in enumerate(ivs):
            lo[a, j], hi[a, j] = l, h
    return lo, hi


def _cdf(noise: NoiseModel) -> np.ndarray:
    return np.cumsum(np.asarray(noise.weights, dtype=float))


def _survival_chunk(args):
    backend, seed, off, n, n_steps, arrays, circle, cdf, hlo, hhi, start = args
    k = _backend.get_kernels(backend)
    return k.survival_counts(seed, off, n, n_steps, *arrays, circle, cdf, hlo, hhi, DITHER, *start)


def _chunks(n: int, size: int):
    return [(off, min(size, n - off)) for off in range(0, n, size)]


def simulate_survival(tmap: PiecewiseMap, holes: HoleFamily, noise: NoiseModel, n_steps: int, n_traj: int,
                      rng: RngSpec = RngSpec(), jobs: int = 1, backend: Optional[str] = None,
                      start: tuple = (0.0, 1.0), fit: bool = True) -> SurvivalCurve:
    """Survivor counts of the random open system from a Lebesgue start.

    Each step draws an atom, kills the point if it sits in that atom's hole
    and otherwise maps it.  ``S_k`` counts points alive after k steps.
    """
    if n_traj < 1 or n_steps < 1:
        raise ValueError("need at least one trajectory and one step")
    backend = backend or _backend.BACKEND
    arrays = _affine_arrays(tmap)
    hlo, hhi = _hole_arrays(noise, holes)
    cdf = _cdf(noise)
    tasks = [(backend, int(rng.seed), off, n, n_steps, arrays, tmap.circle, cdf, hlo, hhi, tuple(start))
             for off, n in _chunks(n_traj, CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_survival_chunk, tasks))
    else:
        parts = [_survival_chunk(t) for t in tasks]
    counts = np.sum(parts, axis=0).astype(np.int64)
    curve = SurvivalCurve(counts, n_traj, int(rng.seed))
    return fit_survival(curve) if fit else curve


def fit_survival(curve: SurvivalCurve, min_count: int = 100, max_frac: float = 0.5) -> SurvivalCurve:
    """Least-squares decay rate of ``ln S_k`` on ``k >= 1, min_count <= S_k <= max_frac n``.

    The standard error propagates the binomial covariance
    ``Cov(S_j, S_k) = n (p_max(j,k) - p_j p_k)`` with plug-in ``p_k = S_k / n``
    through the linear slope estimator.
    """
    S = curve.survivors
    n = curve.n_traj
    if S[-1] == n:
        return SurvivalCurve(S, n, curve.seed, 0.0, 0.0, (1, S.size - 1), 1.0)
    k = np.arange(S.size)
    sel = (k >= 1) & (S >= min_count) & (S <= max_frac * n)
    if sel.sum() < 3:
        raise FitError(f"fit window has {int(sel.sum())} points; need 3", curve)
    kk = k[sel].astype(float)
    y = np.log(S[sel].astype(float))
    kc = kk - kk.mean()
    a = kc / np.dot(kc, kc)
    slope = float(np.dot(a, y))
    p = S[sel] / n
    idx = np.arange(p.size)
    pmax = p[np.maximum.outer(idx, idx)]
    cov = (pmax - np.outer(p, p)) / (n * np.outer(p, p))
    se = float(math.sqrt(max(a @ cov @ a, 0.0)))
    fitted = y.mean() + slope * kc
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    r2 = 1.0 - float(np.dot(y - fitted, y - fitted)) / ss_tot if ss_tot > 0 else 1.0
    return SurvivalCurve(S, n, curve.seed, -slope, se, (int(kk[0]), int(kk[-1])), r2)


def mc_vs_spectral(curve: SurvivalCurve, eigenvalue) -> float:
    """``(lambda_hat - (-ln e)) / se``; 0 when both rates vanish."""
    e = getattr(eigenvalue, "eigenvalue", eigenvalue)
    target = -math.log(e)
    diff = curve.lambda_hat - target
    if curve.lambda_hat == 0.0 and target == 0.0:
        return 0.0
    if curve.stderr == 0.0:
        return math.copysign(math.inf, diff) if diff else 0.0
    return diff / curve.stderr


@dataclass(frozen=True)
class StationarySample:
    density: DensityVector
    counts: np.ndarray
    left_fraction: np.ndarray
    boundary: float
    n_chains: int
    n_steps: int
    burn_in: int
    seed: int

    @property
    def left_mass(self) -> float:
        return float(self.left_fraction.mean())

    @property
    def left_mass_se(self) -> float:
        if self.n_chains < 2:
            return math.nan
        return float(self.left_fraction.std(ddof=1) / math.sqrt(self.n_chains))


def _stationary_chunk(args):
    backend, seed, off, n, n_steps, burn_in, atom_arrays, cdf, bins, boundary, start, circle = args
    k = _backend.get_kernels(backend)
    return k.stationary_histogram(seed, off, n, n_steps, burn_in, *atom_arrays, cdf, bins, boundary,
                                  *start, DITHER, circle)


def simulate_stationary(family, noise: NoiseModel, n_steps: int, burn_in: int = 10_000, rng: RngSpec = RngSpec(),
                        bins: int = 4096, n_chains: int = 1, start: tuple = (0.0, 1.0), jobs: int = 1,
                        backend: Optional[str] = None, chains_per_task: int = 256) -> StationarySample:
    """Occupation histogram of the random Markov chain ``x -> T_w(x)``.

    ``n_steps`` is recorded per chain after ``burn_in`` discarded steps.
    Chains are independent streams; their per-chain left fractions give a
    standard error for the mass of ``[0, b)``.
    """
    if n_chains < 1 or n_steps < 1:
        raise ValueError("need at least one chain and one step")
    backend = backend or _backend.BACKEND
    maps = [family.map(w) for w in noise.omegas]
    per = [_affine_arrays(m) for m in maps]
    nb = max(len(a[0]) for a in per)
    A = len(per)
    lo = np.full((A, nb), np.inf)
    sl = np.zeros((A, nb))
    ic = np.zeros((A, nb))
    cnt = np.zeros(A, dtype=np.int64)
    for i, (l, s, c) in enumerate(per):
        lo[i, :l.size], sl[i, :l.size], ic[i, :l.size], cnt[i] = l, s, c, l.size
    circle = bool(maps[0].circle)
    boundary = float(getattr(family, "b", 0.5))
    tasks = [(backend, int(rng.seed), off, n, n_steps, burn_in, (lo, sl, ic, cnt), _cdf(noise), bins,
              boundary, tuple(start), circle) for off, n in _chunks(n_chains, chains_per_task)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_stationary_chunk, tasks))
    else:
        parts = [_stationary_chunk(t) for t in tasks]
    hist = np.sum([p[0] for p in parts], axis=0)
    left = np.concatenate([p[1] for p in parts])
    grid = Grid(np.arange(bins + 1, dtype=float) / bins)
    dens = DensityVector(grid, hist / (hist.sum() * grid.widths))
    return StationarySample(dens, hist, left / n_steps, boundary, n_chains, n_steps, burn_in, int(rng.seed))
