"""Two-component metastable systems under small random perturbations.

A :class:`PerturbedFamily` is a map ``T_0`` with two invariant halves
``I_l = [0, b]`` and ``I_r = [b, 1]`` together with perturbations ``T_w``
that leak mass across ``b`` through the left and right holes
``H_{l,w} = I_l ∩ T_w^{-1} I_r`` and ``H_{r,w} = I_r ∩ T_w^{-1} I_l``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .maps import MapConstructionError, PiecewiseMap, make_metastable
from .noise import HoleFamily, NoiseModel, measure, merge_intervals
from .ulam import (DensityVector, EigenPair, Grid, build_averaged_closed, build_closed, build_grid, build_open,
                   leading_eigenpair, recurrent_classes)

Interval = tuple[float, float]


class MetastableError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbedFamily:
    """Family ``w -> T_w`` around a two-component map.

    Parameters
    ----------
    b : float
        Boundary point between the halves; ``T_w(b) = b`` for every ``w``.
    builder : callable
        ``w -> PiecewiseMap``; ``builder(0)`` is the unperturbed map.
    c : float
        Asymmetry parameter (informational).
    h0 : tuple of float
        Declared infinitesimal holes ``T_0^{-1}{b} minus {b}``.
    uniform_halves : bool
        The restricted densities of ``T_0`` are known to be uniform.
    """

    b: float
    builder: Callable[[float], PiecewiseMap]
    c: float = 1.0
    h0: tuple = ()
    uniform_halves: bool = False
    name: str = "family"

    def map(self, omega: float) -> PiecewiseMap:
        return self.builder(omega)

    @property
    def t0(self) -> PiecewiseMap:
        return self.builder(0.0)

    def holes(self, omega: float) -> tuple[list[Interval], list[Interval]]:
        return compute_holes(self, omega)

    def hole_endpoints(self, noise: NoiseModel) -> list[float]:
        pts = set()
        for w in noise.omegas:
            hl, hr = self.holes(w)
            for lo, hi in hl + hr:
                pts.update((lo, hi))
        return sorted(pts)

    def refinement(self, noise: NoiseModel) -> list[float]:
        """Every point an exact grid for this family and noise must contain."""
        pts = {self.b}
        for w in noise.omegas:
            pts.update(self.map(w).breakpoints.tolist())
        pts.update(self.hole_endpoints(noise))
        return sorted(pts)

    def infinitesimal_holes(self) -> list[float]:
        """``T_0^{-1}{b}`` without ``b``, from the branch inverses."""
        t0 = self.t0
        pts = sorted({x for x, _ in t0.preimages(self.b) if abs(x - self.b) > 1e-12})
        return pts


def benchmark_family(c: float = 1.0) -> PerturbedFamily:
    """Six-branch zigzag family with infinitesimal holes 1/6 and 5/6."""
    return PerturbedFamily(0.5, lambda w: make_metastable(c, w), float(c), (1.0 / 6.0, 5.0 / 6.0),
                           uniform_halves=True, name=f"metastable(c={c:g})")


def _crossing_set(tmap: PiecewiseMap, lo: float, hi: float, target: Interval) -> list[Interval]:
    """``{x in [lo, hi] : T(x) in open target}`` for an affine map."""
    ta, tb = target
    out = []
    for br in tmap.branches:
        a, b = max(br.lo, lo), min(br.hi, hi)
        if b <= a:
            continue
        if not br.is_affine:
            raise MapConstructionError("hole computation needs affine branches")
        ya, yb = br.value(a), br.value(b)
        if max(ya, yb) <= ta or min(ya, yb) >= tb:
            continue
        xs = [a, b]
        for y in (ta, tb):
            if min(ya, yb) < y < max(ya, yb):
                xs.append(br.solve(y))
        xs.sort()
        for u, v in zip(xs, xs[1:]):
            if v > u and ta < br.value(0.5 * (u + v)) < tb:
                out.append((u, v))
    return merge_intervals(out)


def compute_holes(family: PerturbedFamily, omega: float) -> tuple[list[Interval], list[Interval]]:
    """Left and right holes of ``T_omega`` as component lists."""
    tmap = family.map(omega)
    b = family.b
    return _crossing_set(tmap, 0.0, b, (b, 1.0)), _crossing_set(tmap, b, 1.0, (0.0, b))


def _side_bounds(family: PerturbedFamily, side: str) -> Interval:
    if side == "left":
        return 0.0, family.b
    if side == "right":
        return family.b, 1.0
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def _embed(family: PerturbedFamily, grid: Grid, side: str, sub: Optional[DensityVector]) -> DensityVector:
    """Density on the full grid supported on one half, integrating to 1."""
    lo, hi = _side_bounds(family, side)
    centers = grid.centers
    inside = (centers > lo) & (centers < hi)
    vals = np.zeros(grid.n)
    if sub is None:
        vals[inside] = 1.0 / (hi - lo)
    else:
        # piecewise-constant sub density on rescaled coordinates
        u = (centers[inside] - lo) / (hi - lo)
        idx = np.minimum(np.searchsorted(sub.grid.cuts, u, side="right") - 1, sub.grid.n - 1)
        vals[inside] = sub.values[idx] / (hi - lo)
    return DensityVector(grid, vals).normalized()


def _side_grid(grid: Grid, lo: float, hi: float) -> Grid:
    cuts = grid.cuts[(grid.cuts >= lo - 1e-15) & (grid.cuts <= hi + 1e-15)]
    u = (cuts - lo) / (hi - lo)
    u[0], u[-1] = 0.0, 1.0
    return Grid(u)


def restricted_invariant_densities(family: PerturbedFamily, grid: Grid, exact: Optional[bool] = None,
                                   tol: float = 1e-12) -> tuple[DensityVector, DensityVector]:
    """``(rho_l, rho_r)`` on ``grid``, each supported on its half with unit mass.

    With ``exact=None`` the uniform closed form is used when the family
    declares uniform halves; otherwise the restricted maps are rescaled onto
    [0, 1] and solved by Ulam.
    """
    if grid.index_of(family.b) is None:
        raise MetastableError("grid must contain the boundary point b")
    use_exact = family.uniform_halves if exact is None else exact
    out = []
    for side in ("left", "right"):
        if use_exact:
            out.append(_embed(family, grid, side, None))
            continue
        lo, hi = _side_bounds(family, side)
        sub_map = family.t0.restrict(lo, hi)
        sg = _side_grid(grid, lo, hi)
        pair = leading_eigenpair(build_closed(sub_map, sg, allow_unaligned=True), tol=tol)
        out.append(_embed(family, grid, side, pair.vector))
    return out[0], out[1]


def _averaged_side_measures(family: PerturbedFamily, noise: NoiseModel, rho_l, rho_r):
    L = R = 0.0
    for w, p in noise.atoms:
        hl, hr = family.holes(w)
        L += p * rho_l.integrate(hl)
        R += p * rho_r.integrate(hr)
    return L, R


def lahr(family: PerturbedFamily, noise: NoiseModel, densities=None) -> float:
    """Finite-eps averaged holes ratio ``sum theta mu_r(H_r) / sum theta mu_l(H_l)``.

    ``densities`` is ``(rho_l, rho_r)``; omitted for uniform-half families,
    whose restricted measures are ``m / b`` and ``m / (1 - b)``.
    """
    if densities is None:
        if not family.uniform_halves:
            raise MetastableError("restricted densities required for this family")
        b = family.b
        L = R = 0.0
        for w, p in noise.atoms:
            hl, hr = family.holes(w)
            L += p * measure(hl) / b
            R += p * measure(hr) / (1.0 - b)
    else:
        rho_l, rho_r = densities
        L, R = 0.0, 0.0
        for w, p in noise.atoms:
            hl, hr = family.holes(w)
            L += p * rho_l.integrate(hl)
            R += p * rho_r.integrate(hr)
    if L <= 0.0:
        raise MetastableError("left averaged hole measure vanishes")
    return R / L


def predicted_alpha(lahr_value: float) -> float:
    if lahr_value < 0:
        raise ValueError("ratio must be non-negative")
    if math.isinf(lahr_value):
        return 1.0
    return lahr_value / (1.0 + lahr_value)


# relative balance gaps below this are indistinguishable from rounding in the
# stationary vector and are reported as 0
BALANCE_FLOOR = 1e-12


def balance_check(rho_eps: DensityVector, family: PerturbedFamily, noise: NoiseModel) -> float:
    """Relative gap between the stationary mass in the left and right holes.

    Gaps below ``BALANCE_FLOOR`` are returned as 0.
    """
    L = R = 0.0
    for w, p in noise.atoms:
        hl, hr = family.holes(w)
        L += p * rho_eps.integrate(hl)
        R += p * rho_eps.integrate(hr)
    big = max(L, R)
    if big < 1e-14:
        return 0.0
    gap = abs(L - R) / big
    return 0.0 if gap < BALANCE_FLOOR else gap


def polish_two_block(op, pair: EigenPair, left: np.ndarray, sweeps: int = 100, steps: int = 4) -> EigenPair:
    """Aggregation/disaggregation refinement of a stationary vector.

    The slow mode of a metastable chain is the split of mass between the two
    blocks, which power iteration resolves only at rate ``1 - gap``.  Each
    sweep keeps the within-block profiles, re-solves the aggregated 2-state
    chain for the block weights and smooths with a few power steps.
    """
    w = op.grid.widths
    pt = op.transposed
    m = pair.vector.values * w
    m = m / m.sum()
    res = pair.residual
    it = pair.iterations
    for _ in range(sweeps):
        mass_l, mass_r = m[left].sum(), m[~left].sum()
        if mass_l <= 0.0 or mass_r <= 0.0:
            break
        ul = np.where(left, m, 0.0) / mass_l
        ur = np.where(left, 0.0, m) / mass_r
        p_lr = (pt @ ul)[~left].sum()
        p_rl = (pt @ ur)[left].sum()
        if p_lr + p_rl <= 0.0:
            break
        a = p_rl / (p_lr + p_rl)
        m = a * ul + (1.0 - a) * ur
        for _ in range(steps):
            m = pt @ m
            m /= m.sum()
        it += steps
        new = pt @ m
        res_new = float(np.abs(new - m).sum())
        if res_new >= res and abs(a - mass_l) < 1e-15:
            break
        res = res_new
    v = m / w
    return EigenPair(1.0, DensityVector(op.grid, v / float(np.dot(v, w))), float(np.abs(pt @ m - m).sum()), it)


def open_subsystem_eigen(family: PerturbedFamily, side: str, noise: NoiseModel, N: int,
                         tol: float = 1e-12) -> EigenPair:
    """Leading eigenpair of one half as an open system.

    The unperturbed restricted map is used with the perturbed holes as
    masks, all rescaled onto [0, 1].
    """
    lo, hi = _side_bounds(family, side)
    k = 0 if side == "left" else 1
    width = hi - lo
    sub_map = family.t0.restrict(lo, hi)

    def rule(w):
        ivs = family.holes(w)[k]
        return [((a - lo) / width, (b - lo) / width) for a, b in ivs]

    hs = [h for h in family.h0 if lo < h < hi]
    center = (hs[0] - lo) / width if hs else 0.5
    holes = HoleFamily(center, "custom", rule=rule)
    grid = build_grid(N, list(sub_map.breakpoints) + holes.endpoints(noise))
    return leading_eigenpair(build_open(sub_map, grid, noise, holes), tol=tol)


def corollary_ratio(e_l: float, e_r: float) -> tuple[float, float]:
    """``((1 - e_l)/(1 - e_r), (1 - e_r)/(1 - e_l))``; inf where a denominator vanishes."""
    dl, dr = 1.0 - e_l, 1.0 - e_r

    def div(a, b):
        if b == 0.0:
            return math.inf if a > 0 else math.nan
        return a / b

    return div(dl, dr), div(dr, dl)


def check_B4(family: PerturbedFamily, noise: NoiseModel, tol: float = 1e-12) -> str:
    """``"pass"``, ``"fail"`` or ``"not-applicable"`` (no atom with w > 0)."""
    t0 = family.t0
    for h in family.h0:
        if abs(t0.eval(h, "left") - t0.eval(h, "right")) > tol:
            return "fail"
    positive = [w for w in noise.omegas if w > 0.0]
    if not positive:
        return "not-applicable"
    for w in positive:
        hl, hr = family.holes(w)
        for h in family.h0:
            ivs = hl if h < family.b else hr
            if not any(lo <= h <= hi for lo, hi in ivs):
                return "fail"
    return "pass"


@dataclass
class MetastableReport:
    c: float
    eps: float
    grid_N: int
    rho_eps: DensityVector
    rho_l: DensityVector
    rho_r: DensityVector
    lahr: float
    alpha_pred: float
    alpha_mass: float
    l1_error: float
    balance_residual: float
    e_left: float = math.nan
    e_right: float = math.nan
    ratio_forward: float = math.nan
    ratio_reverse: float = math.nan
    orientation: str = "undetermined"
    plateau_left: float = math.nan
    plateau_right: float = math.nan
    flatness: float = math.nan
    ergodic: bool = True
    degenerate: bool = False
    residual: float = math.nan
    iterations: int = 0
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        keys = ("c", "eps", "grid_N", "lahr", "alpha_pred", "alpha_mass", "l1_error", "balance_residual",
                "e_left", "e_right", "ratio_forward", "ratio_reverse", "orientation", "plateau_left",
                "plateau_right", "flatness", "ergodic", "degenerate", "residual", "iterations", "warnings")
        return {k: getattr(self, k) for k in keys}


def plateau_heights(rho: DensityVector, family: PerturbedFamily, radius: float = 0.05) -> tuple[float, float]:
    """Mean density on each half away from ``b``, the infinitesimal holes and the ends."""
    x = rho.grid.centers
    w = rho.grid.widths
    avoid = [family.b, *family.h0]
    far = np.ones(x.size, dtype=bool)
    for p in avoid:
        far &= np.abs(x - p) > radius
    out = []
    for lo, hi in (_side_bounds(family, "left"), _side_bounds(family, "right")):
        sel = far & (x > lo) & (x < hi)
        out.append(float(np.dot(rho.values[sel], w[sel]) / w[sel].sum()))
    return out[0], out[1]


def flatness_in_left_hole(rho: DensityVector, family: PerturbedFamily, noise: NoiseModel, alpha: float,
                          rho_l: DensityVector) -> float:
    """``max |rho_eps - alpha rho_l|`` over cells inside the left envelope hole."""
    env = merge_intervals([iv for w in noise.omegas for iv in family.holes(w)[0]])
    if not env:
        return 0.0
    x = rho.grid.centers
    inside = np.zeros(x.size, dtype=bool)
    for lo, hi in env:
        inside |= (x > lo) & (x < hi)
    if not inside.any():
        return 0.0
    return float(np.max(np.abs(rho.values[inside] - alpha * rho_l.values[inside])))


def stationary_and_compare(family: PerturbedFamily, noise: NoiseModel, N: int, tol: float = 1e-12,
                           with_subsystems: bool = True, match_rtol: float = 0.05) -> MetastableReport:
    """Stationary density of the averaged operator against ``alpha rho_l + (1 - alpha) rho_r``."""
    grid = build_grid(N, family.refinement(noise))
    op = build_averaged_closed(family, grid, noise)
    notes = []
    classes = recurrent_classes(op)
    if classes != 1:
        msg = f"averaged operator has {classes} closed classes; ergodicity is doubtful"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    pair = polish_two_block(op, leading_eigenpair(op, tol=tol), grid.centers < family.b)
    rho = pair.vector
    rho_l, rho_r = restricted_invariant_densities(family, grid)
    densities = None if family.uniform_halves else (rho_l, rho_r)
    try:
        ratio = lahr(family, noise, densities)
        alpha = predicted_alpha(ratio)
    except MetastableError as exc:
        notes.append(str(exc))
        ratio, alpha = math.nan, math.nan
    mix = DensityVector(grid, alpha * rho_l.values + (1.0 - alpha) * rho_r.values)
    L, R = _averaged_side_measures(family, noise, rho_l, rho_r)
    degenerate = L < 1e-14 or R < 1e-14
    pl, pr = plateau_heights(rho, family)
    rep = MetastableReport(
        c=family.c, eps=noise.epsilon, grid_N=grid.n, rho_eps=rho, rho_l=rho_l, rho_r=rho_r,
        lahr=ratio, alpha_pred=alpha, alpha_mass=rho.integrate([(0.0, family.b)]),
        l1_error=rho.l1_distance(mix) if not math.isnan(alpha) else math.nan,
        balance_residual=balance_check(rho, family, noise),
        plateau_left=pl, plateau_right=pr,
        flatness=flatness_in_left_hole(rho, family, noise, alpha, rho_l) if not math.isnan(alpha) else math.nan,
        ergodic=classes == 1, degenerate=degenerate, residual=pair.residual, iterations=pair.iterations,
        warnings=notes)
    if with_subsystems:
        el = open_subsystem_eigen(family, "left", noise, N, tol).eigenvalue
        er = open_subsystem_eigen(family, "right", noise, N, tol).eigenvalue
        fwd, rev = corollary_ratio(el, er)
        rep.e_left, rep.e_right, rep.ratio_forward, rep.ratio_reverse = el, er, fwd, rev
        rep.orientation = match_orientation(fwd, rev, alpha, match_rtol)
    return rep


def match_orientation(forward: float, reverse: float, alpha: float, rtol: float = 0.05) -> str:
    """Which escape-ratio orientation reproduces ``alpha / (1 - alpha)``."""
    if math.isnan(alpha) or alpha >= 1.0:
        return "undetermined"
    target = alpha / (1.0 - alpha)
    hits = []
    for name, val in (("forward", forward), ("reverse", reverse)):
        if math.isfinite(val) and abs(val - target) <= rtol * max(target, 1e-300):
            hits.append(name)
    if not hits:
        return "neither"
    return "both" if len(hits) == 2 else hits[0]
