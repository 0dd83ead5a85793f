"""Finite atomic noise spaces and random hole families."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

Interval = tuple[float, float]

# relative slack for the open window of condition (C); hole sizes are
# computed as differences of endpoints and carry rounding error
_WINDOW_RTOL = 1e-12


class HoleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Atomic distribution ``theta_eps`` on ``[0, eps]``."""

    epsilon: float
    omegas: tuple
    weights: tuple
    upsilon: Optional[float] = None

    def __post_init__(self):
        om = tuple(float(w) for w in self.omegas)
        wt = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "weights", wt)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if len(om) != len(wt) or not om:
            raise ValueError("need one weight per atom")
        if min(wt) < 0 or abs(sum(wt) - 1.0) > 1e-14:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={sum(wt)!r})")
        if min(om) < 0 or max(om) > self.epsilon * (1 + 1e-15):
            raise ValueError("atoms must lie in [0, epsilon]")

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.omegas, self.weights))

    def __len__(self):
        return len(self.omegas)


def _equal_weights(n: int) -> tuple:
    w = [1.0 / n] * n
    # absorb the rounding residue so the sum is 1 to the last bit we can get
    w[-1] = 1.0 - sum(w[:-1])
    return tuple(w)


def make_uniform_noise(eps: float, L: int) -> NoiseModel:
    """Atoms ``j*eps/L`` for ``j = 0..L`` with equal weights."""
    if L < 1:
        raise ValueError("L must be at least 1")
    # the top atom is eps itself; eps * L / L can round one ulp above it
    om = tuple(eps * j / L for j in range(L)) + (eps,)
    return NoiseModel(eps, om, _equal_weights(L + 1))


def make_deterministic_noise(eps: float) -> NoiseModel:
    """Single atom at ``eps``: the deterministic (non-random) hole."""
    return NoiseModel(eps, (eps,), (1.0,))


def make_condition_C_noise(eps: float, upsilon: float, L: int, placement: str = "midpoint") -> NoiseModel:
    """Discrete stand-in for the density ``eps**-upsilon`` on ``(eps - eps**upsilon, eps)``.

    ``placement="midpoint"`` puts the L atoms at the centres of L equal
    sub-windows, so every atom is strictly inside the open window.
    ``placement="right"`` uses the right endpoints, the last atom sitting at
    ``eps`` itself.
    """
    if upsilon <= 1:
        raise ValueError("condition (C) needs upsilon > 1")
    if L < 1:
        raise ValueError("L must be at least 1")
    width = eps ** upsilon
    if not width < eps:
        raise ValueError("eps**upsilon must be smaller than eps")
    if placement == "midpoint":
        om = tuple(eps - width * (j + 0.5) / L for j in range(L))
    elif placement == "right":
        om = tuple(eps - width * j / L for j in range(L))
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return NoiseModel(eps, om, _equal_weights(L), upsilon=upsilon)


def symmetric_holes(z: float, omega: float, circle: bool = False) -> list[Interval]:
    """``[z - omega/2, z + omega/2]``, split in two when it wraps on the circle."""
    lo, hi = z - omega / 2.0, z + omega / 2.0
    if lo >= 0.0 and hi <= 1.0:
        return [(lo, hi)]
    if not circle:
        raise HoleDomainError(f"hole [{lo}, {hi}] leaves [0, 1]")
    if omega >= 1.0:
        return [(0.0, 1.0)]
    if lo < 0.0:
        return [(0.0, hi), (1.0 + lo, 1.0)]
    return [(0.0, hi - 1.0), (lo, 1.0)]


def measure(intervals: Sequence[Interval]) -> float:
    return float(sum(max(hi - lo, 0.0) for lo, hi in intervals))


def merge_intervals(intervals: Sequence[Interval], tol: float = 0.0) -> list[Interval]:
    ivs = sorted((lo, hi) for lo, hi in intervals if hi > lo)
    out: list[Interval] = []
    for lo, hi in ivs:
        if out and lo <= out[-1][1] + tol:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


def contains(outer: Sequence[Interval], inner: Sequence[Interval], tol: float = 1e-15) -> bool:
    for lo, hi in inner:
        if hi <= lo:
            continue
        if not any(a - tol <= lo and hi <= b + tol for a, b in outer):
            return False
    return True


@dataclass(frozen=True)
class HoleFamily:
    """Rule ``omega -> H_omega`` around a centre ``z``.

    kind is ``"symmetric"`` (``[z - w/2, z + w/2]``), ``"right_sided"``
    (``[z, z + w]``) or ``"custom"`` (``rule(omega)`` returns a list of
    intervals).
    """

    center: float
    kind: str = "symmetric"
    circle: bool = False
    rule: Optional[Callable[[float], Sequence[Interval]]] = None

    def __post_init__(self):
        if self.kind not in ("symmetric", "right_sided", "custom"):
            raise ValueError(f"unknown hole kind {self.kind!r}")
        if self.kind == "custom" and self.rule is None:
            raise ValueError("custom holes need a rule")
        if not 0.0 <= self.center <= 1.0:
            raise HoleDomainError("hole centre outside [0, 1]")

    def holes(self, omega: float) -> list[Interval]:
        z = self.center
        if self.kind == "symmetric":
            ivs = symmetric_holes(z, omega, self.circle)
        elif self.kind == "right_sided":
            if z + omega <= 1.0:
                ivs = [(z, z + omega)]
            elif self.circle:
                ivs = [(z, 1.0), (0.0, z + omega - 1.0)]
            else:
                raise HoleDomainError(f"hole [{z}, {z + omega}] leaves [0, 1]")
        else:
            ivs = list(self.rule(omega))
        return [(float(lo), float(hi)) for lo, hi in ivs if hi > lo]

    def envelope(self, eps: float, noise: Optional[NoiseModel] = None) -> list[Interval]:
        """``H_eps``; for custom rules the union over the atoms of ``noise``."""
        if self.kind == "custom":
            if noise is None:
                return self.holes(eps)
            return merge_intervals([iv for w in noise.omegas for iv in self.holes(w)])
        return self.holes(eps)

    def endpoints(self, noise: NoiseModel) -> list[float]:
        pts = set()
        for w in noise.omegas:
            for lo, hi in self.holes(w):
                pts.update((lo, hi))
        return sorted(pts)


def check_condition_C(noise: NoiseModel, holes: HoleFamily, upsilon: float) -> tuple[bool, float]:
    """Mass of atoms whose hole size lies in the open window ``(eps - eps**u, eps)``.

    Returns ``(passed, margin)`` with ``margin = mass - (1 - eps**u)``.
    Hole sizes are measured, never read off the atom values.
    """
    eps = noise.epsilon
    width = eps ** upsilon
    lo, hi = eps - width, eps
    slack = _WINDOW_RTOL * eps
    mass = 0.0
    for w, p in noise.atoms:
        size = measure(holes.holes(w))
        if lo + slack < size < hi - slack:
            mass += p
    margin = mass - (1.0 - width)
    return margin > 0, margin


@dataclass(frozen=True)
class AveragedHoleMeasures:
    A_eps: float
    Delta_eps: float

    @property
    def ratio(self) -> float:
        return self.Delta_eps / self.A_eps


def averaged_hole_measures(noise: NoiseModel, holes: HoleFamily, density=None) -> AveragedHoleMeasures:
    """``A = sum theta m(H_w)`` and ``Delta = sum theta mu(H_w)``.

    ``density`` is a DensityVector (piecewise constant, integrated exactly)
    or None for Lebesgue measure.
    """
    A = 0.0
    D = 0.0
    for w, p in noise.atoms:
        ivs = holes.holes(w)
        A += p * measure(ivs)
        D += p * (measure(ivs) if density is None else density.integrate(ivs))
    return AveragedHoleMeasures(A, D)


def weights_array(noise: NoiseModel) -> np.ndarray:
    return np.asarray(noise.weights, dtype=float)
