import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escapemeta.maps import (MapConstructionError, MapDomainError, affine_map, detect_period, make_doubling,
                             make_metastable)


def brute_period(k: int, m: int, p_max: int = 32):
    """Minimal period of k/2^m under doubling by exact rational orbit enumeration."""
    x0 = Fraction(k, 2 ** m)
    x = x0
    for p in range(1, p_max + 1):
        x = (2 * x) % 1
        if x == x0:
            return p
    return None


class TestEval:
    def test_doubling_values(self):
        t = make_doubling()
        assert t.eval(0.3) == pytest.approx(0.6)
        assert t.eval(0.5, "left") == 1.0
        assert t.eval(0.5, "right") == 0.0

    def test_metastable_values(self):
        assert make_metastable(1, 0).eval(1 / 6, "left") == pytest.approx(0.5)
        assert make_metastable(1, 0.01).eval(1 / 6, "left") == pytest.approx(0.51)
        assert make_metastable(2, 0.01).eval(5 / 6, "left") == pytest.approx(0.5 - 0.02)

    def test_derivatives(self):
        assert make_doubling().derivative(0.3) == 2
        assert make_metastable(1, 0).derivative(0.25) == pytest.approx(-3)
        assert make_metastable(2, 0.01).derivative(0.8) == pytest.approx(-3.12)

    def test_domain_error(self):
        with pytest.raises(MapDomainError):
            make_doubling().eval(1.5)


class TestPreimagesAndOrbits:
    def test_doubling_preimages(self):
        t = make_doubling()
        assert sorted(round(x, 12) for x, _ in t.preimages(0.5)) == [0.25, 0.75]
        assert [round(x, 12) for x, _ in t.preimages(1.0)] == [0.5]

    def test_metastable_preimages_brute_force(self):
        t = make_metastable(1, 0)
        pre = [x for x, _ in t.preimages(0.25)]
        xs = np.linspace(0, 0.5, 6001)
        below = np.array([t.eval(float(x)) < 0.25 for x in xs])
        sign_changes = int(np.sum(below[:-1] != below[1:]))
        assert sign_changes == 3
        assert len([x for x in pre if x <= 0.5]) == 3
        for x, i in t.preimages(0.25):
            assert t.branches[i].value(x) == pytest.approx(0.25, abs=1e-12)

    def test_orbits(self):
        t = make_doubling()
        assert t.orbit(1 / 3, 3) == pytest.approx([1 / 3, 2 / 3, 1 / 3, 2 / 3])
        assert t.orbit(0.0, 2) == [0.0, 0.0, 0.0]
        assert make_metastable(1, 0).orbit(1 / 6, 2) == pytest.approx([1 / 6, 0.5, 0.5])


class TestPeriods:
    def test_named_points(self):
        t = make_doubling()
        info = detect_period(t, 0.0)
        assert info.is_periodic and info.period == 1 and info.derivative_of_iterate == 2
        info = detect_period(t, 1 / 3)
        assert info.is_periodic and info.period == 2 and info.derivative_of_iterate == pytest.approx(4)
        assert not detect_period(t, math.sqrt(2) - 1, p_max=20).is_periodic

    @pytest.mark.parametrize("m", range(1, 7))
    def test_dyadic_rationals_match_brute_force(self, m):
        t = make_doubling()
        for k in range(2 ** m):
            if k % 2 == 0 and k > 0:
                continue
            info = detect_period(t, k / 2 ** m)
            want = brute_period(k, m)
            assert info.is_periodic == (want is not None)
            if want is not None:
                assert info.period == want

    def test_derivative_of_iterate_bound(self):
        t = make_doubling()
        for z in (0.0, 1 / 3, 1 / 7, 2 / 5):
            info = detect_period(t, z)
            assert abs(info.derivative_of_iterate) >= 2 ** info.period - 1e-9


class TestConstruction:
    def test_metastable_images_fill_halves(self):
        t = make_metastable(1.5, 0)
        left = [b.image() for b in t.branches[:3]]
        right = [b.image() for b in t.branches[3:]]
        for lo, hi in left:
            assert (lo, hi) == pytest.approx((0.0, 0.5))
        for lo, hi in right:
            assert (lo, hi) == pytest.approx((0.5, 1.0))

    def test_metastable_fixed_boundary_and_slopes(self):
        for c, w in [(0, 0), (1, 0.01), (2, 0.05)]:
            t = make_metastable(c, w)
            assert t.eval(0.5, "left") == pytest.approx(0.5)
            assert t.eval(0.5, "right") == pytest.approx(0.5)
            assert min(abs(b.slope) for b in t.branches) >= 3

    def test_out_of_range_image_rejected(self):
        with pytest.raises(MapConstructionError):
            affine_map([(0.0, 0.5, 3.0, 0.0), (0.5, 1.0, 2.0, -1.0)])

    def test_invariance_of_left_half(self):
        t = make_metastable(2, 0)
        rng = np.random.default_rng(0)
        for x in rng.uniform(0, 0.5, 200):
            assert max(t.orbit(float(x), 30)) <= 0.5

    def test_breakpoint_images_avoid_infinitesimal_holes(self):
        t = make_metastable(1, 0)
        for x in t.breakpoints:
            for side in ("left", "right"):
                if (x == 0.0 and side == "left") or (x == 1.0 and side == "right"):
                    continue
                y = t.eval(float(x), side)
                for _ in range(10):
                    assert min(abs(y - 1 / 6), abs(y - 5 / 6)) >= 0.01
                    y = t.eval(y)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0, 3), w=st.floats(0, 0.05))
def test_tiling_and_expansion(c, w):
    t = make_metastable(c, w)
    lengths = sum(b.hi - b.lo for b in t.branches)
    assert lengths == pytest.approx(1.0, abs=1e-15)
    for a, b in zip(t.branches, t.branches[1:]):
        assert a.hi == b.lo
    xs = np.linspace(1e-6, 1 - 1e-6, 10_000)
    assert min(abs(t.derivative(float(x))) for x in xs[::50]) >= t.expansion_bound


@settings(max_examples=40, deadline=None)
@given(y=st.floats(0, 1), c=st.floats(0, 3), w=st.floats(0, 0.05))
def test_preimages_invert(y, c, w):
    t = make_metastable(c, w)
    for x, i in t.preimages(y):
        b = t.branches[i]
        assert b.lo - 1e-15 <= x <= b.hi + 1e-15
        assert b.value(x) == pytest.approx(y, abs=1e-10)
