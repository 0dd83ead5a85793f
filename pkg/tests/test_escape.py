import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escapemeta.escape import (EscapeRow, FitError, accsm_measure, escape_row, escape_sweep, extrapolate_limit,
                               open_eigenpair, qk_terms, theoretical_limit)
from escapemeta.maps import make_doubling
from escapemeta.noise import HoleFamily, make_condition_C_noise, make_deterministic_noise
from escapemeta.ulam import GridAlignmentError, build_grid, build_open

GOLDEN = (1 + 5 ** 0.5) / 4
RIGHT0 = HoleFamily(0.0, "right_sided", circle=True)


def dense_rate(eps: float, N: int) -> float:
    op = build_open(make_doubling(), build_grid(N), make_deterministic_noise(eps), RIGHT0)
    e = max(abs(np.linalg.eigvals(op.matrix.toarray())))
    return (1 - e) / eps


class TestSweep:
    def test_analytic_rows(self):
        rows = escape_sweep(make_doubling(), RIGHT0, make_deterministic_noise, [0.5, 0.25], N=4)
        assert rows[0].e_eps == pytest.approx(0.5, abs=1e-14) and rows[0].ratio == pytest.approx(1.0)
        assert rows[1].e_eps == pytest.approx(GOLDEN, abs=1e-12)
        assert rows[1].ratio == pytest.approx(0.7639320225, abs=1e-9)
        for r in rows:
            assert 0 < r.e_eps < 1 and r.rate == pytest.approx(-math.log(r.e_eps)) and r.rate > 0

    def test_fixed_point_trend_against_dense_solve(self):
        eps = [2.0 ** -k for k in range(2, 11)]
        rows = escape_sweep(make_doubling(), RIGHT0, make_deterministic_noise, eps, N=2 ** 10)
        ratios = [r.ratio for r in rows]
        assert all(b < a for a, b in zip(ratios, ratios[1:]))
        assert all(r > 0.5 for r in ratios)
        for r in rows[:5]:
            assert r.ratio == pytest.approx(dense_rate(r.eps, 2 ** 7), abs=1e-9)

    def test_extrapolation_fixed_point(self):
        eps = [2.0 ** -k for k in range(4, 11)]
        rows = escape_sweep(make_doubling(), RIGHT0, make_deterministic_noise, eps, N=2 ** 12)
        assert extrapolate_limit(rows).r0 == pytest.approx(0.5, rel=0.01)

    def test_eps_list_validated(self):
        with pytest.raises(ValueError):
            escape_sweep(make_doubling(), RIGHT0, make_deterministic_noise, [0.25, 0.5], N=4)

    def test_row_errors_are_captured(self):
        rows = escape_sweep(make_doubling(), HoleFamily(0.5), make_deterministic_noise, [2.0, 0.25], N=8)
        assert not rows[0].ok and rows[0].error
        assert rows[1].ok


class TestLimits:
    def test_examples(self):
        t = make_doubling()
        assert theoretical_limit(t, 0.0)[0] == 0.5
        assert theoretical_limit(t, 1 / 3)[0] == pytest.approx(0.75)
        assert theoretical_limit(t, math.sqrt(2) - 1)[0] == 1.0

    def test_synthetic_extrapolation(self):
        eps = [0.1, 0.05, 0.025, 0.0125]
        fit = extrapolate_limit([(e, 0.5 + 2 * e) for e in eps])
        assert fit.r0 == pytest.approx(0.5, abs=1e-12) and fit.slope == pytest.approx(2.0)
        fit = extrapolate_limit([(e, 1.0) for e in eps])
        assert fit.r0 == pytest.approx(1.0) and fit.slope == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_fits(self):
        with pytest.raises(FitError):
            extrapolate_limit([(0.1, 1.0), (0.05, 1.0)])
        with pytest.raises(FitError):
            extrapolate_limit([(0.1, 1.0)] * 4)
        with pytest.raises(FitError):
            extrapolate_limit([EscapeRow(0.1, error="x")] * 3)


class TestQk:
    def test_fixed_point(self):
        tab = qk_terms(make_doubling(), None, None, make_deterministic_noise(2.0 ** -6), RIGHT0, N=2 ** 12)
        assert tab.q[0] == pytest.approx(0.5, rel=0.02)
        assert max(abs(q) for q in tab.q[1:]) < 0.02

    def test_period_two(self):
        tab = qk_terms(make_doubling(), None, None, make_deterministic_noise(2.0 ** -6), HoleFamily(1 / 3), N=2 ** 12)
        assert tab.q[1] == pytest.approx(0.25, rel=0.05)
        assert abs(tab.q[0]) < 1e-12 and max(abs(q) for q in tab.q[2:6]) < 1e-12
        # later returns of the 2-cycle vanish as eps shrinks
        tab = qk_terms(make_doubling(), None, None, make_deterministic_noise(2.0 ** -10), HoleFamily(1 / 3),
                       N=2 ** 12)
        assert 1 - tab.partial_sum == pytest.approx(0.75, abs=0.002)

    def test_nonperiodic(self):
        tab = qk_terms(make_doubling(), None, None, make_deterministic_noise(2.0 ** -8),
                       HoleFamily(math.sqrt(2) - 1), N=2 ** 12)
        assert max(abs(q) for q in tab.q) < 0.02

    def test_consistency_with_ratio(self):
        noise = make_condition_C_noise(2.0 ** -8, 2, 8)
        for z in (0.0, 1 / 3):
            tab = qk_terms(make_doubling(), None, None, noise, HoleFamily(z, circle=True), N=2 ** 12)
            assert tab.consistency_gap <= 0.05 * tab.ratio

    def test_rho_grid_mismatch(self):
        from escapemeta.ulam import uniform_density
        with pytest.raises(ValueError):
            qk_terms(make_doubling(), uniform_density(build_grid(8)), build_grid(16),
                     make_deterministic_noise(0.25), RIGHT0)


class TestAccsm:
    def test_examples(self):
        noise = make_deterministic_noise(0.5)
        pair, _ = open_eigenpair(make_doubling(), RIGHT0, noise, 2)
        assert accsm_measure(pair, noise, RIGHT0, (0.5, 1.0)) == pytest.approx(1.0, abs=1e-14)
        assert accsm_measure(pair, noise, RIGHT0, (0.0, 0.5)) == 0.0
        noise = make_deterministic_noise(0.25)
        pair, _ = open_eigenpair(make_doubling(), RIGHT0, noise, 16)
        assert accsm_measure(pair, noise, RIGHT0, (0.0, 1.0)) == pytest.approx(1.0, abs=1e-11)
        assert accsm_measure(pair, noise, RIGHT0, (0.0, 0.25)) == 0.0

    def test_unaligned_set(self):
        noise = make_deterministic_noise(0.25)
        pair, _ = open_eigenpair(make_doubling(), RIGHT0, noise, 4)
        with pytest.raises(GridAlignmentError):
            accsm_measure(pair, noise, RIGHT0, (0.1, 0.6))

    @settings(max_examples=40, deadline=None)
    @given(cuts=st.lists(st.integers(0, 64), min_size=3, max_size=3, unique=True))
    def test_additivity(self, cuts):
        a, b, c = sorted(k / 64 for k in cuts)
        noise = make_condition_C_noise(2.0 ** -4, 2, 4)
        holes = HoleFamily(1 / 3)
        pair, _ = open_eigenpair(make_doubling(), holes, noise, 64)
        whole = accsm_measure(pair, noise, holes, (a, c))
        parts = accsm_measure(pair, noise, holes, (a, b)) + accsm_measure(pair, noise, holes, (b, c))
        assert whole == pytest.approx(parts, abs=1e-14)
        assert accsm_measure(pair, noise, holes, [(a, b), (b, c)]) == pytest.approx(whole, abs=1e-14)


@pytest.mark.parametrize("z", [0.0, 1 / 3, math.sqrt(2) - 1])
def test_rows_bracketed_and_scale_consistent(z):
    t = make_doubling()
    limit = theoretical_limit(t, z)[0]
    holes = HoleFamily(z, circle=True)
    rows = [escape_row(t, holes, make_condition_C_noise(2.0 ** -k, 2, 8), 2 ** 13) for k in range(6, 12)]
    for row in rows:
        assert row.ok and 1 - row.e_eps > 0
        if limit < 1:
            assert limit - 1e-9 <= row.ratio <= 1.0
        else:
            # the non-periodic ratio approaches 1 from above
            assert 1.0 <= row.ratio <= 1.05
        if row.e_eps > 0.99:
            assert row.rate == pytest.approx(1 - row.e_eps, rel=0.02)
        assert row.identity_residual <= 1e-11
    assert abs(rows[-1].ratio - limit) < abs(rows[0].ratio - limit)
