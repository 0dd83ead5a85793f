"""Piecewise expanding interval maps.

A map is an ordered list of branches tiling [0, 1].  Each branch is either
affine (``slope * x + intercept``) or smooth (forward / derivative / inverse
callables).  At breakpoints the map is bi-valued; every evaluation takes an
explicit side, and orbits use the right-side convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

SIDES = ("left", "right")
_IMAGE_TOL = 1e-12


class MapDomainError(ValueError):
    """Raised when a point lies outside [0, 1]."""


class MapConstructionError(ValueError):
    """Raised when branches do not define a valid expanding map."""


class PeriodAmbiguityError(ValueError):
    """Raised when an orbit lands on a discontinuity and the next iterate is ambiguous."""


@dataclass(frozen=True)
class Branch:
    lo: float
    hi: float
    slope: Optional[float] = None
    intercept: Optional[float] = None
    forward: Optional[Callable[[float], float]] = None
    derivative: Optional[Callable[[float], float]] = None
    inverse: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise MapConstructionError(f"empty branch domain [{self.lo}, {self.hi}]")
        if self.is_affine:
            if self.slope == 0:
                raise MapConstructionError("affine branch with zero slope")
        elif self.forward is None or self.derivative is None:
            raise MapConstructionError("smooth branch needs forward and derivative")

    @property
    def is_affine(self) -> bool:
        return self.slope is not None

    @property
    def increasing(self) -> bool:
        if self.is_affine:
            return self.slope > 0
        return self.derivative(0.5 * (self.lo + self.hi)) > 0

    @property
    def orientation(self) -> str:
        return "increasing" if self.increasing else "decreasing"

    def value(self, x):
        if self.is_affine:
            return self.slope * x + self.intercept
        return self.forward(x)

    def deriv(self, x):
        if self.is_affine:
            return self.slope
        return self.derivative(x)

    def solve(self, y: float) -> float:
        """Point of the (closed) domain mapped to ``y``."""
        if self.is_affine:
            return (y - self.intercept) / self.slope
        if self.inverse is None:
            raise MapConstructionError("smooth branch has no inverse")
        return self.inverse(y)

    def image(self) -> tuple[float, float]:
        a, b = self.value(self.lo), self.value(self.hi)
        return (min(a, b), max(a, b))


@dataclass(frozen=True)
class PiecewiseMap:
    """Piecewise C^2 expanding map of [0, 1].

    Parameters
    ----------
    branches : sequence of Branch
        Ordered, tiling [0, 1].
    expansion_bound : float
        Declared lower bound on ``|T'|``; must exceed 1 (``context="open"``)
        or 2 (``context="metastable"``).
    circle : bool
        Treat 0 and 1 as the same point (doubling map).
    uniform_density : bool
        Lebesgue measure is known to be invariant, so exact hole measures can
        be used instead of an Ulam density.
    """

    branches: tuple
    expansion_bound: float
    context: str = "open"
    circle: bool = False
    uniform_density: bool = False
    name: str = "affine"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches:
            raise MapConstructionError("map needs at least one branch")
        if self.context not in ("open", "metastable"):
            raise MapConstructionError(f"unknown context {self.context!r}")
        need = 1.0 if self.context == "open" else 2.0
        if not self.expansion_bound > need:
            raise MapConstructionError(
                f"expansion bound {self.expansion_bound} must exceed {need} for context {self.context}")
        if self.branches[0].lo != 0.0 or self.branches[-1].hi != 1.0:
            raise MapConstructionError("branches must start at 0 and end at 1")
        for a, b in zip(self.branches, self.branches[1:]):
            if a.hi != b.lo:
                raise MapConstructionError(f"branches do not tile: {a.hi} != {b.lo}")
        for k, br in enumerate(self.branches):
            lo, hi = br.image()
            if lo < -_IMAGE_TOL or hi > 1.0 + _IMAGE_TOL:
                raise MapConstructionError(f"branch {k} image [{lo}, {hi}] leaves [0, 1]")
            if br.is_affine:
                if abs(br.slope) < self.expansion_bound:
                    raise MapConstructionError(
                        f"branch {k} slope {br.slope} below expansion bound {self.expansion_bound}")
            else:
                xs = np.linspace(br.lo, br.hi, 66)[1:-1]
                if np.min(np.abs([br.deriv(x) for x in xs])) < self.expansion_bound:
                    raise MapConstructionError(f"branch {k} violates the expansion bound")
        object.__setattr__(self, "_los", np.array([b.lo for b in self.branches]))

    @property
    def breakpoints(self) -> np.ndarray:
        """All partition points, including 0 and 1."""
        return np.array([b.lo for b in self.branches] + [1.0])

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def is_affine(self) -> bool:
        return all(b.is_affine for b in self.branches)

    def branch_index(self, x: float, side: str = "right") -> int:
        _check_point(x)
        if side not in SIDES:
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        los = self._los
        if side == "right":
            k = int(np.searchsorted(los, x, side="right")) - 1
        else:
            k = int(np.searchsorted(los, x, side="left")) - 1
        return min(max(k, 0), len(los) - 1)

    def eval(self, x: float, side: str = "right") -> float:
        br = self.branches[self.branch_index(x, side)]
        return float(br.value(x))

    def derivative(self, x: float, side: str = "right") -> float:
        br = self.branches[self.branch_index(x, side)]
        return float(br.deriv(x))

    def step(self, x: float) -> float:
        """One iterate with the right-side convention; wraps on the circle."""
        y = self.eval(x, "right")
        if self.circle:
            y = y % 1.0
        return min(max(y, 0.0), 1.0)

    def preimages(self, y: float) -> list[tuple[float, int]]:
        _check_point(y)
        out = []
        for k, br in enumerate(self.branches):
            lo, hi = br.image()
            if not (lo - _IMAGE_TOL <= y <= hi + _IMAGE_TOL):
                continue
            x = min(max(br.solve(y), br.lo), br.hi)
            # 1 is identified with 0 on the circle, where T(0) = 0
            if self.circle and x == 1.0:
                continue
            out.append((float(x), k))
        return out

    def orbit(self, x: float, n: int) -> list[float]:
        _check_point(x)
        xs = [float(x)]
        for _ in range(n):
            xs.append(self.step(xs[-1]))
        return xs

    def genuine_breakpoints(self) -> list[float]:
        """Interior breakpoints where T or T' has a jump (circle-aware)."""
        pts = []
        for a, b in zip(self.branches, self.branches[1:]):
            c = a.hi
            jump = a.value(c) - b.value(c)
            if self.circle:
                jump = jump - round(jump)
            if abs(jump) > _IMAGE_TOL or abs(a.deriv(c) - b.deriv(c)) > _IMAGE_TOL:
                pts.append(c)
        return pts

    def discontinuities(self) -> list[float]:
        pts = []
        for a, b in zip(self.branches, self.branches[1:]):
            c = a.hi
            jump = a.value(c) - b.value(c)
            if self.circle:
                jump = jump - round(jump)
            if abs(jump) > _IMAGE_TOL:
                pts.append(c)
        return pts

    def is_continuous_at(self, x: float, tol: float = 1e-12) -> bool:
        jump = self.eval(x, "left") - self.eval(x, "right")
        if self.circle:
            jump -= round(jump)
        return abs(jump) <= tol

    def distance(self, x: float, y: float) -> float:
        d = abs(x - y)
        if self.circle:
            d = min(d, 1.0 - d)
        return d

    def restrict(self, lo: float, hi: float, name: Optional[str] = None) -> "PiecewiseMap":
        """Restriction to an invariant subinterval, rescaled affinely onto [0, 1]."""
        if not self.is_affine:
            raise MapConstructionError("restriction is implemented for affine maps only")
        width = hi - lo
        new = []
        for br in self.branches:
            if br.hi <= lo or br.lo >= hi:
                continue
            if br.lo < lo or br.hi > hi:
                raise MapConstructionError("subinterval must be a union of branch domains")
            a, b = br.image()
            if a < lo - _IMAGE_TOL or b > hi + _IMAGE_TOL:
                raise MapConstructionError(f"[{lo}, {hi}] is not invariant")
            # u -> (T(lo + width u) - lo) / width
            slope = br.slope
            intercept = (br.slope * lo + br.intercept - lo) / width
            new.append(Branch((br.lo - lo) / width, (br.hi - lo) / width, slope, intercept))
        # pin endpoints exactly
        first, last = new[0], new[-1]
        new[0] = Branch(0.0, first.hi, first.slope, first.intercept)
        new[-1] = Branch(new[-1].lo, 1.0, last.slope, last.intercept)
        return PiecewiseMap(tuple(new), self.expansion_bound, context="open",
                            name=name or f"{self.name}|[{lo},{hi}]")


@dataclass(frozen=True)
class PeriodInfo:
    is_periodic: bool
    period: Optional[int] = None
    derivative_of_iterate: Optional[float] = None
    smooth_neighborhood: bool = True


def _check_point(x: float):
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise MapDomainError(f"point {x} outside [0, 1]")


def detect_period(tmap: PiecewiseMap, z: float, p_max: int = 32, tol: float = 1e-9) -> PeriodInfo:
    """Minimal period of ``z`` up to ``p_max`` with the chain-rule derivative of ``T^p``.

    Raises PeriodAmbiguityError if the orbit passes within ``tol`` of a
    discontinuity, since the next iterate then depends on the side.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_point(z)
    disc = tmap.discontinuities()
    kinks = tmap.genuine_breakpoints()
    x = float(z)
    deriv = 1.0
    smooth = True
    for p in range(1, p_max + 1):
        if any(abs(x - c) <= tol for c in disc):
            raise PeriodAmbiguityError(f"orbit of {z} hits a discontinuity at step {p - 1}")
        if any(abs(x - c) <= 10 * tol for c in kinks):
            smooth = False
        deriv *= tmap.derivative(x, "right")
        x = tmap.step(x)
        if tmap.distance(x, z) <= tol:
            return PeriodInfo(True, p, deriv, smooth)
    return PeriodInfo(False, None, None, smooth)


def affine_map(pieces: Sequence[tuple[float, float, float, float]], expansion_bound: Optional[float] = None,
               context: str = "open", circle: bool = False, uniform_density: bool = False,
               name: str = "affine") -> PiecewiseMap:
    """Build a map from ``(lo, hi, slope, intercept)`` tuples."""
    branches = tuple(Branch(float(lo), float(hi), float(s), float(c)) for lo, hi, s, c in pieces)
    if expansion_bound is None:
        expansion_bound = min(abs(b.slope) for b in branches)
    return PiecewiseMap(branches, expansion_bound, context=context, circle=circle,
                        uniform_density=uniform_density, name=name)


def make_doubling() -> PiecewiseMap:
    return affine_map([(0.0, 0.5, 2.0, 0.0), (0.5, 1.0, 2.0, -1.0)], expansion_bound=2.0,
                      circle=True, uniform_density=True, name="doubling")


def zigzag_pieces(peak_x: float, peak: float, valley_x: float, valley: float):
    """Six affine branches: an up-down-up zigzag on each half of [0, 1].

    The left half rises to ``peak`` at ``peak_x``, falls to 0 at 1/3 and rises
    back to 1/2; the right half mirrors this with a valley.
    """
    third, half, two3 = 1.0 / 3.0, 0.5, 2.0 / 3.0
    s1 = peak / peak_x
    s2 = -peak / (third - peak_x)
    s5 = -(1.0 - valley) / (valley_x - two3)
    s6 = (1.0 - valley) / (1.0 - valley_x)
    return [
        (0.0, peak_x, s1, 0.0),
        (peak_x, third, s2, -s2 * third),
        (third, half, 3.0, -1.0),
        (half, two3, 3.0, -1.0),
        (two3, valley_x, s5, 1.0 - s5 * two3),
        (valley_x, 1.0, s6, 1.0 - s6),
    ]


def make_metastable(c: float = 1.0, omega: float = 0.0) -> PiecewiseMap:
    """Benchmark two-component family ``T_omega``.

    The left peak at x = 1/6 is raised to 1/2 + omega and the right valley at
    x = 5/6 is lowered to 1/2 - c*omega, opening leakage holes around the
    infinitesimal holes 1/6 and 5/6.  ``T_omega(1/2) = 1/2`` for every omega.
    """
    if c < 0 or omega < 0:
        raise MapConstructionError("c and omega must be non-negative")
    pieces = zigzag_pieces(1.0 / 6.0, 0.5 + omega, 5.0 / 6.0, 0.5 - c * omega)
    # slopes written in closed form so that omega = 0 gives exactly 3
    s1, s6 = 3.0 + 6.0 * omega, 3.0 + 6.0 * c * omega
    pieces[0] = (0.0, 1.0 / 6.0, s1, 0.0)
    pieces[1] = (1.0 / 6.0, 1.0 / 3.0, -s1, (0.5 + omega) + s1 / 6.0)
    pieces[4] = (2.0 / 3.0, 5.0 / 6.0, -s6, 1.0 + s6 * 2.0 / 3.0)
    pieces[5] = (5.0 / 6.0, 1.0, s6, (0.5 - c * omega) - s6 * 5.0 / 6.0)
    tmap = affine_map(pieces, expansion_bound=3.0, context="metastable", name="metastable")
    tmap.params.update(c=float(c), omega=float(omega))
    return tmap
