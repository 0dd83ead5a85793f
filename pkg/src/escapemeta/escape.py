"""Escape rates of open random systems: sweeps, limits, q_k terms, accsm."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .maps import PeriodInfo, PiecewiseMap, detect_period
from .noise import HoleFamily, NoiseModel, averaged_hole_measures, merge_intervals
from .ulam import (DensityVector, EigenPair, Grid, GridAlignmentError, build_closed, build_grid, build_open,
                   check_eigen_identity, leading_eigenpair, ly_diagnostic, uniform_density)


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class EscapeRow:
    eps: float
    e_eps: float = math.nan
    rate: float = math.nan
    A_eps: float = math.nan
    Delta_eps: float = math.nan
    ratio: float = math.nan
    grid_N: int = 0
    residual: float = math.nan
    identity_residual: float = math.nan
    iterations: int = 0
    ly_sup: float = math.nan
    ly_growth: float = math.nan
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def invariant_density(tmap: PiecewiseMap, N: int, tol: float = 1e-12) -> DensityVector:
    """Closed-system density: exact for maps flagged uniform, else an Ulam eigenvector."""
    grid = build_grid(N, tmap.breakpoints)
    if tmap.uniform_density:
        return uniform_density(grid)
    return leading_eigenpair(build_closed(tmap, grid), tol=tol).vector


def open_eigenpair(tmap: PiecewiseMap, holes: HoleFamily, noise: NoiseModel, N: int,
                   tol: float = 1e-12, max_iter: int = 1_000_000, allow_unaligned: bool = False):
    """Leading eigenpair of the averaged open operator on an aligned N-cell grid."""
    refine = list(tmap.breakpoints) + ([] if allow_unaligned else holes.endpoints(noise))
    grid = build_grid(N, refine)
    op = build_open(tmap, grid, noise, holes, allow_unaligned=allow_unaligned)
    return leading_eigenpair(op, tol=tol, max_iter=max_iter), op


def escape_row(tmap: PiecewiseMap, holes: HoleFamily, noise: NoiseModel, N: int,
               rho: Optional[DensityVector] = None, tol: float = 1e-12, max_iter: int = 1_000_000,
               allow_unaligned: bool = False, ly_steps: int = 0) -> EscapeRow:
    """One sweep row; numerical failures are captured in ``error``.

    With ``ly_steps > 0`` the variation trace of ``P^n 1`` is summarised by
    its supremum and by ``mean(last 10) - mean(first 10)`` (negative or zero
    means no growth).
    """
    eps = noise.epsilon
    try:
        pair, op = open_eigenpair(tmap, holes, noise, N, tol, max_iter, allow_unaligned)
        hm = averaged_hole_measures(noise, holes, None if tmap.uniform_density else rho)
        e = pair.eigenvalue
        ly_sup = ly_growth = math.nan
        if ly_steps > 0:
            trace = np.array([v for _, v in ly_diagnostic(op, uniform_density(op.grid), ly_steps)])
            ly_sup = float(trace.max())
            m = min(10, trace.size // 2)
            ly_growth = float(trace[-m:].mean() - trace[:m].mean())
        return EscapeRow(eps, e, -math.log(e), hm.A_eps, hm.Delta_eps, (1.0 - e) / hm.Delta_eps,
                         op.grid.n, pair.residual, check_eigen_identity(pair, noise, holes), pair.iterations,
                         ly_sup, ly_growth)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        return EscapeRow(eps, grid_N=N, error=f"{type(exc).__name__}: {exc}")


def escape_sweep(tmap: PiecewiseMap, holes: HoleFamily, noise_builder: Callable[[float], NoiseModel],
                 eps_list: Sequence[float], N: int, tol: float = 1e-12, allow_unaligned: bool = False,
                 rho: Optional[DensityVector] = None, ly_steps: int = 0) -> list[EscapeRow]:
    """Rows of ``(1 - e_eps) / Delta_eps`` for a strictly decreasing list of eps.

    ``Delta_eps`` is measured against the closed invariant density ``rho``
    (computed once when omitted; Lebesgue for maps flagged uniform).
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])) or min(eps_list) <= 0:
        raise ValueError("eps list must be positive and strictly decreasing")
    if rho is None and not tmap.uniform_density:
        rho = invariant_density(tmap, N, tol)
    rows = []
    for eps in eps_list:
        try:
            noise = noise_builder(eps)
        except ValueError as exc:
            rows.append(EscapeRow(eps, grid_N=N, error=f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(escape_row(tmap, holes, noise, N, rho, tol, allow_unaligned=allow_unaligned, ly_steps=ly_steps))
    return rows


def theoretical_limit(tmap: PiecewiseMap, z: float, p_max: int = 32, tol: float = 1e-9) -> tuple[float, PeriodInfo]:
    """Limit of ``(1 - e_eps) / Delta_eps``: 1 off periodic orbits, ``1 - 1/|(T^p)'(z)|`` on them."""
    info = detect_period(tmap, z, p_max, tol)
    if not info.is_periodic:
        return 1.0, info
    if not info.smooth_neighborhood:
        raise ValueError(f"T^{info.period} is not C^1 near z={z}; the periodic formula does not apply")
    return 1.0 - 1.0 / abs(info.derivative_of_iterate), info


@dataclass(frozen=True)
class Extrapolation:
    r0: float
    slope: float
    residual: float
    n_rows: int


def extrapolate_limit(rows: Sequence) -> Extrapolation:
    """Least-squares line ``r_eps = r0 + a eps``; accepts EscapeRows or (eps, r) pairs.

    Rows carrying an error are skipped.
    """
    pts = []
    for r in rows:
        if isinstance(r, EscapeRow):
            if r.ok:
                pts.append((r.eps, r.ratio))
        else:
            pts.append((float(r[0]), float(r[1])))
    if len(pts) < 3:
        raise FitError("need at least 3 valid rows to extrapolate")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.unique(x).size < 2 or np.ptp(x) <= 1e-15 * np.abs(x).max():
        raise FitError("degenerate eps spacing")
    design = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = float(np.sqrt(np.mean((design @ coef - y) ** 2)))
    return Extrapolation(float(coef[0]), float(coef[1]), resid, len(pts))


@dataclass(frozen=True)
class QkTable:
    eps: float
    q: tuple
    ratio: float
    Delta_eps: float

    @property
    def partial_sum(self) -> float:
        return float(sum(self.q))

    @property
    def consistency_gap(self) -> float:
        """``|1 - sum q_k - r_eps|``."""
        return abs(1.0 - self.partial_sum - self.ratio)


def qk_terms(tmap: PiecewiseMap, rho: Optional[DensityVector], grid: Optional[Grid], noise: NoiseModel,
             holes: HoleFamily, k_max: int = 10, N: int = 2 ** 12, tol: float = 1e-12) -> QkTable:
    """``q_k = m((P0 - P) P^k (P0 - P) rho) / Delta`` on a common grid.

    ``P0`` is the closed and ``P`` the averaged open Ulam operator.  With
    ``grid=None`` an aligned grid of ``N`` cells is built; ``rho=None`` means
    Lebesgue for uniform-density maps and the closed Ulam eigenvector
    otherwise.  The returned table also carries ``r_eps`` for the consistency
    check ``1 - sum q_k ≈ r_eps``.
    """
    if grid is None:
        grid = build_grid(N, list(tmap.breakpoints) + holes.endpoints(noise))
    p0 = build_closed(tmap, grid)
    ph = build_open(tmap, grid, noise, holes)
    if rho is None:
        rho = uniform_density(grid) if tmap.uniform_density else leading_eigenpair(p0, tol=tol).vector
    elif rho.grid != grid:
        raise ValueError("rho must live on the operator grid")
    rho = rho.normalized()
    w = grid.widths
    delta_op = p0 - ph
    hm = averaged_hole_measures(noise, holes, rho)
    v = delta_op.apply_values(rho.values)
    q = []
    for _ in range(k_max + 1):
        q.append(float(np.dot(delta_op.apply_values(v), w)) / hm.Delta_eps)
        v = ph.apply_values(v)
    pair = leading_eigenpair(ph, tol=tol)
    return QkTable(noise.epsilon, tuple(q), (1.0 - pair.eigenvalue) / hm.Delta_eps, hm.Delta_eps)


def _intersect(a: Sequence, b: Sequence) -> list:
    out = []
    for lo1, hi1 in a:
        for lo2, hi2 in b:
            lo, hi = max(lo1, lo2), min(hi1, hi2)
            if hi > lo:
                out.append((lo, hi))
    return out


def accsm_measure(pair: EigenPair, noise: NoiseModel, holes: HoleFamily, A) -> float:
    """``nu_eps(A) = (1/e) sum theta(w) ∫_A 1_{X_w} g dm`` for a union of aligned intervals."""
    ivs = [A] if isinstance(A[0], (int, float)) else list(A)
    grid = pair.vector.grid
    for lo, hi in ivs:
        if grid.index_of(lo) is None or grid.index_of(hi) is None:
            raise GridAlignmentError(f"set endpoints [{lo}, {hi}] are not grid points")
    ivs = merge_intervals(ivs)
    g = pair.vector
    base = g.integrate(ivs)
    s = sum(p * (base - g.integrate(_intersect(ivs, merge_intervals(holes.holes(w))))) for w, p in noise.atoms)
    return s / pair.eigenvalue
