import numpy as np
import pytest

from escapemeta import _backend, _kernels_py
from escapemeta.maps import make_doubling
from escapemeta.metastable import benchmark_family
from escapemeta.montecarlo import RngSpec, simulate_stationary, simulate_survival
from escapemeta.noise import HoleFamily, make_condition_C_noise, make_uniform_noise
from escapemeta.ulam import build_closed, build_grid

compiled = pytest.mark.skipif(not _backend.HAVE_COMPILED, reason="compiled kernels not built")


def test_unknown_backend():
    with pytest.raises(ValueError):
        _backend.get_kernels("fortran")


def test_default_is_available():
    assert _backend.BACKEND in ("compiled", "python")
    assert _backend.get_kernels() is _backend.kernels


@compiled
def test_transition_bit_identical():
    t = benchmark_family(2.0).map(0.013)
    grid = build_grid(257, t.breakpoints)
    args = (grid.cuts, grid.cuts, np.array([b.lo for b in t.branches]), np.array([b.slope for b in t.branches]),
            np.array([b.intercept for b in t.branches]))
    a = _kernels_py.affine_transition(*args)
    b = _backend.get_kernels("compiled").affine_transition(*args)
    for x, y in zip(a, b):
        assert np.array_equal(np.asarray(x), np.asarray(y))


@compiled
@pytest.mark.parametrize("z", [0.0, 1 / 3])
def test_survival_bit_identical(z):
    args = (make_doubling(), HoleFamily(z, circle=True), make_condition_C_noise(2.0 ** -4, 2, 8), 200, 3000,
            RngSpec(2026))
    a = simulate_survival(*args, backend="python", fit=False)
    b = simulate_survival(*args, backend="compiled", fit=False)
    assert np.array_equal(a.survivors, b.survivors)


@compiled
def test_stationary_bit_identical():
    fam = benchmark_family(2.0)
    noise = make_uniform_noise(0.01, 4)
    a = simulate_stationary(fam, noise, 3000, 100, RngSpec(4), bins=128, n_chains=6, backend="python")
    b = simulate_stationary(fam, noise, 3000, 100, RngSpec(4), bins=128, n_chains=6, backend="compiled")
    assert np.array_equal(a.counts, b.counts)
    assert np.array_equal(a.left_fraction, b.left_fraction)


def test_operator_independent_of_backend(monkeypatch):
    grid = build_grid(64)
    a = build_closed(make_doubling(), grid).matrix.toarray()
    monkeypatch.setattr(_backend, "kernels", _kernels_py)
    b = build_closed(make_doubling(), grid).matrix.toarray()
    assert np.array_equal(a, b)
