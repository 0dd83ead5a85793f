from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from escapemeta.maps import make_doubling, make_metastable
from escapemeta.metastable import benchmark_family
from escapemeta.noise import HoleFamily, NoiseModel, make_deterministic_noise, make_uniform_noise
from escapemeta.ulam import (ConvergenceError, DensityVector, GridAlignmentError, UlamOperator, build_averaged_closed,
                             build_closed, build_grid, build_open, check_eigen_identity, dump_binary, export_mtx,
                             indicator_density, leading_eigenpair, load_binary, ly_diagnostic, uniform_density,
                             variation)

GOLDEN = (1 + 5 ** 0.5) / 4


def exact_ulam(pieces, cuts, keep=lambda lo, hi: [(lo, hi)]):
    """Ulam matrix by rational interval arithmetic; pieces are (lo, hi, slope, intercept) Fractions."""
    n = len(cuts) - 1
    M = [[Fraction(0)] * n for _ in range(n)]
    for i in range(n):
        a, b = cuts[i], cuts[i + 1]
        for lo, hi, s, c in pieces:
            for klo, khi in keep(max(a, lo), min(b, hi)):
                if khi <= klo:
                    continue
                for j in range(n):
                    # x with s x + c in [cuts[j], cuts[j+1]]
                    p, q = (cuts[j] - c) / s, (cuts[j + 1] - c) / s
                    x0, x1 = max(klo, min(p, q)), min(khi, max(p, q))
                    if x1 > x0:
                        M[i][j] += (x1 - x0) / (b - a)
    return np.array([[float(v) for v in row] for row in M])


DOUBLING = [(Fraction(0), Fraction(1, 2), Fraction(2), Fraction(0)),
            (Fraction(1, 2), Fraction(1), Fraction(2), Fraction(-1))]


def doubling_hole(N, lo, hi):
    return build_open(make_doubling(), build_grid(N), make_deterministic_noise(hi - lo),
                      HoleFamily(lo, "right_sided", circle=True))


class TestGrid:
    def test_examples(self):
        assert list(build_grid(4).cuts) == [0, 0.25, 0.5, 0.75, 1]
        assert list(build_grid(2, [1 / 3]).cuts) == [0, 1 / 3, 0.5, 1]
        assert list(build_grid(4, [0.25]).cuts) == list(build_grid(4).cuts)

    @settings(max_examples=50, deadline=None)
    @given(N=st.integers(2, 64), pts=st.lists(st.floats(0, 1), max_size=8))
    def test_refinement(self, N, pts):
        g = build_grid(N, pts)
        assert g.cuts[0] == 0 and g.cuts[-1] == 1
        assert np.all(np.diff(g.cuts) > 0)
        assert g.n >= N
        for p in pts:
            assert np.min(np.abs(g.cuts - p)) <= 1e-13


class TestClosed:
    def test_doubling_small(self):
        assert build_closed(make_doubling(), build_grid(2)).matrix.toarray() == pytest.approx(np.full((2, 2), 0.5))
        want = [[.5, .5, 0, 0], [0, 0, .5, .5], [.5, .5, 0, 0], [0, 0, .5, .5]]
        assert build_closed(make_doubling(), build_grid(4)).matrix.toarray() == pytest.approx(np.array(want))

    @pytest.mark.parametrize("c,w", [(0, 0), (1, 0.01), (2, 0.03)])
    def test_metastable_against_rational_oracle(self, c, w):
        t = make_metastable(c, w)
        grid = build_grid(24, t.breakpoints)
        pieces = [(Fraction(b.lo), Fraction(b.hi), Fraction(b.slope), Fraction(b.intercept)) for b in t.branches]
        want = exact_ulam(pieces, [Fraction(x) for x in grid.cuts])
        assert build_closed(t, grid).matrix.toarray() == pytest.approx(want, abs=1e-13)

    def test_block_structure(self):
        grid = build_grid(60, make_metastable(1, 0).breakpoints)
        m = build_closed(make_metastable(1, 0), grid).matrix.tocoo()
        left = grid.centers < 0.5
        assert np.all(left[m.row] == left[m.col])

    def test_requires_breakpoints(self):
        with pytest.raises(GridAlignmentError):
            build_closed(make_metastable(1, 0), build_grid(4))


class TestOpen:
    def test_quarter_hole_matrix(self):
        got = doubling_hole(4, 0.0, 0.25).matrix.toarray()
        ref = build_closed(make_doubling(), build_grid(4)).matrix.toarray()
        assert np.all(got[0] == 0)
        assert got[1:] == pytest.approx(ref[1:])

    def test_two_atoms(self):
        noise = NoiseModel(0.5, (0.25, 0.5), (0.5, 0.5))
        got = build_open(make_doubling(), build_grid(4), noise, HoleFamily(0.0, "right_sided")).matrix.toarray()
        ref = build_closed(make_doubling(), build_grid(4)).matrix.toarray()
        assert np.all(got[0] == 0)
        assert got[1] == pytest.approx(ref[1] / 2)
        assert got[2:] == pytest.approx(ref[2:])

    def test_zero_holes_equal_closed(self):
        g = build_grid(16)
        got = build_open(make_doubling(), g, NoiseModel(0.1, (0.0,), (1.0,)), HoleFamily(0.3))
        assert got.matrix.toarray() == pytest.approx(build_closed(make_doubling(), g).matrix.toarray())

    def test_unaligned_hole_refused(self):
        with pytest.raises(GridAlignmentError):
            doubling_hole(4, 0.0, 0.3)
        op = build_open(make_doubling(), build_grid(4), make_deterministic_noise(0.3),
                        HoleFamily(0.0, "right_sided", circle=True), allow_unaligned=True)
        assert op.row_sums()[1] == pytest.approx(0.8)

    @settings(max_examples=30, deadline=None)
    @given(z=st.floats(0.05, 0.9), eps=st.floats(1e-3, 0.08), L=st.integers(1, 6))
    def test_row_sums_are_survival_fractions(self, z, eps, L):
        noise = make_uniform_noise(eps, L)
        holes = HoleFamily(z)
        grid = build_grid(64, holes.endpoints(noise))
        op = build_open(make_doubling(), grid, noise, holes)
        assert op.matrix.data.min() >= 0
        want = np.zeros(grid.n)
        for w, p in noise.atoms:
            for i, (a, b) in enumerate(zip(grid.cuts[:-1], grid.cuts[1:])):
                cut = sum(max(0.0, min(b, hi) - max(a, lo)) for lo, hi in holes.holes(w))
                want[i] += p * (1 - cut / (b - a))
        assert op.row_sums() == pytest.approx(want, abs=1e-12)


class TestAveragedClosed:
    def test_single_zero_atom_is_closed(self):
        fam = benchmark_family(1.0)
        noise = NoiseModel(0.01, (0.0,), (1.0,))
        g = build_grid(36, fam.refinement(noise))
        got = build_averaged_closed(fam, g, noise).matrix.toarray()
        assert got == pytest.approx(build_closed(fam.t0, g).matrix.toarray())

    def test_linear_in_atoms(self):
        fam = benchmark_family(2.0)
        noise = NoiseModel(0.02, (0.0, 0.02), (0.5, 0.5))
        g = build_grid(48, fam.refinement(noise))
        got = build_averaged_closed(fam, g, noise).matrix.toarray()
        parts = [build_closed(fam.map(w), g).matrix.toarray() for w in noise.omegas]
        assert got == pytest.approx(0.5 * parts[0] + 0.5 * parts[1], abs=1e-14)
        assert got.sum(axis=1) == pytest.approx(np.ones(g.n), abs=1e-12)

    def test_two_way_coupling(self):
        fam = benchmark_family(2.0)
        noise = make_uniform_noise(0.01, 4)
        g = build_grid(256, fam.refinement(noise))
        m = build_averaged_closed(fam, g, noise).matrix.tocoo()
        left = g.centers < 0.5
        assert np.any(left[m.row] & ~left[m.col])
        assert np.any(~left[m.row] & left[m.col])


class TestEigen:
    def test_closed_doubling(self):
        pair = leading_eigenpair(build_closed(make_doubling(), build_grid(2)))
        assert pair.eigenvalue == pytest.approx(1.0, abs=1e-14)
        assert pair.vector.values == pytest.approx([1.0, 1.0])

    def test_quarter_hole_against_dense_solve(self):
        op = doubling_hole(4, 0.0, 0.25)
        pair = leading_eigenpair(op)
        dense = np.linalg.eigvals(op.matrix.toarray())
        assert pair.eigenvalue == pytest.approx(max(dense.real), abs=1e-12)
        assert pair.eigenvalue == pytest.approx(GOLDEN, abs=1e-12)
        assert pair.residual <= 1e-12

    def test_half_hole(self):
        pair = leading_eigenpair(doubling_hole(2, 0.0, 0.5))
        assert pair.eigenvalue == pytest.approx(0.5, abs=1e-14)
        assert pair.vector.values == pytest.approx([1.0, 1.0])
        assert check_eigen_identity(pair, make_deterministic_noise(0.5),
                                    HoleFamily(0.0, "right_sided", circle=True)) <= 1e-14

    def test_identity_for_quarter_hole(self):
        pair = leading_eigenpair(doubling_hole(4, 0.0, 0.25))
        noise, holes = make_deterministic_noise(0.25), HoleFamily(0.0, "right_sided", circle=True)
        assert check_eigen_identity(pair, noise, holes) <= 10 * 1e-12

    def test_identity_zero_holes(self):
        pair = leading_eigenpair(build_closed(make_doubling(), build_grid(8)))
        assert check_eigen_identity(pair, NoiseModel(0.1, (0.0,), (1.0,)), HoleFamily(0.5)) <= 1e-14

    def test_nilpotent_reported(self):
        op = UlamOperator(build_grid(2), sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]])), "open")
        with pytest.raises(ConvergenceError):
            leading_eigenpair(op)

    def test_max_iter(self):
        fam = benchmark_family(2.0)
        noise = make_uniform_noise(1e-3, 4)
        g = build_grid(512, fam.refinement(noise))
        with pytest.raises(ConvergenceError) as info:
            leading_eigenpair(build_averaged_closed(fam, g, noise), max_iter=5)
        assert info.value.iterations == 5 and info.value.residual > 0

    @settings(max_examples=25, deadline=None)
    @given(z=st.floats(0.05, 0.9), eps=st.floats(2e-3, 0.1))
    def test_spectral_sanity_matches_dense(self, z, eps):
        noise = make_uniform_noise(eps, 3)
        holes = HoleFamily(z)
        op = build_open(make_doubling(), build_grid(32, holes.endpoints(noise)), noise, holes)
        pair = leading_eigenpair(op)
        assert 0.0 < pair.eigenvalue <= 1.0
        dense = max(abs(np.linalg.eigvals(op.matrix.toarray())))
        assert pair.eigenvalue == pytest.approx(dense, abs=1e-9)
        assert check_eigen_identity(pair, noise, holes) <= 1e-11

    @pytest.mark.parametrize("z,eps", [(2 ** 0.5 - 1, 0.1), (np.pi / 10, 0.1), (3 ** 0.5 - 1.5, 0.05)])
    def test_refinement_is_cauchy_for_unaligned_hole(self, z, eps):
        noise = make_deterministic_noise(eps)
        holes = HoleFamily(z, "right_sided")
        es = [leading_eigenpair(build_open(make_doubling(), build_grid(2 ** k), noise, holes,
                                           allow_unaligned=True)).eigenvalue for k in (10, 12, 14)]
        assert abs(es[2] - es[1]) < abs(es[1] - es[0])


class TestVariation:
    def test_examples(self):
        g = build_grid(4)
        assert variation(uniform_density(g)) == 0
        assert variation(indicator_density(g, 0, 0.5)) == pytest.approx(2.0)

    def test_closed_doubling_trace(self):
        trace = ly_diagnostic(build_closed(make_doubling(), build_grid(64)), uniform_density(build_grid(64)), 20)
        assert [v for _, v in trace] == [0.0] * 21

    def test_quarter_hole_trace_bounded(self):
        op = doubling_hole(4, 0.0, 0.25)
        trace = ly_diagnostic(op, uniform_density(op.grid), 50)
        assert len(trace) == 51
        assert max(v for _, v in trace) <= 1.0
        # g0 = g1, g2 = g3 and e g0 = g2 / 2 from the 4x4 system
        g = leading_eigenpair(op).vector.values
        assert g / g[0] == pytest.approx([1, 1, 2 * GOLDEN, 2 * GOLDEN], abs=1e-10)

    def test_metastable_trace_bounded(self):
        fam = benchmark_family(2.0)
        noise = make_uniform_noise(0.01, 4)
        op = build_averaged_closed(fam, build_grid(1024, fam.refinement(noise)), noise)
        trace = [v for _, v in ly_diagnostic(op, uniform_density(op.grid), 50)]
        assert max(trace) < 10


class TestIO:
    def test_binary_round_trip(self, tmp_path):
        op = doubling_hole(16, 0.0, 0.25)
        dump_binary(op, tmp_path / "op.bin")
        back = load_binary(tmp_path / "op.bin", kind="open")
        assert back.grid == op.grid
        assert (back.matrix != op.matrix).nnz == 0

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage!" + b"\0" * 32)
        with pytest.raises(ValueError):
            load_binary(tmp_path / "x.bin")

    def test_mtx(self, tmp_path):
        import scipy.io
        op = doubling_hole(8, 0.0, 0.25)
        export_mtx(op, tmp_path / "op.mtx")
        back = scipy.io.mmread(str(tmp_path / "op.mtx")).toarray()
        assert back == pytest.approx(op.matrix.toarray(), abs=0)
