import math

import numpy as np
import pytest

from escapemeta import _kernels_py
from escapemeta.maps import make_doubling
from escapemeta.metastable import benchmark_family, stationary_and_compare
from escapemeta.montecarlo import (FitError, RngSpec, SurvivalCurve, fit_survival, mc_vs_spectral, simulate_stationary,
                                   simulate_survival)
from escapemeta.noise import HoleFamily, NoiseModel, make_deterministic_noise, make_uniform_noise

GOLDEN = (1 + 5 ** 0.5) / 4
RIGHT0 = HoleFamily(0.0, "right_sided", circle=True)
MASK = (1 << 64) - 1


def finalizer(z: int):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def splitmix64(state: int):
    """First output of SplitMix64 from ``state``."""
    z = (state + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


class TestStreams:
    def test_mixer_matches_reference_splitmix(self):
        # first output of SplitMix64 seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF
        assert int(_kernels_py.fmix(np.uint64(0x9E3779B97F4A7C15))) == 0xE220A8397B1DCDAF

    def test_stream_addressing(self):
        keys = _kernels_py.stream_keys(12345, np.arange(4))
        key = splitmix64(12345)
        for i in range(4):
            assert int(keys[i]) == finalizer(key ^ splitmix64(i))
        u = _kernels_py.uniforms(keys, 3)
        for i in range(4):
            h = splitmix64((int(keys[i]) + 3 * 0x9E3779B97F4A7C15) & MASK)
            assert u[i] == (h >> 11) * 2.0 ** -53

    def test_seed_range(self):
        with pytest.raises(ValueError):
            RngSpec(-1)


class TestSurvival:
    def test_zero_holes(self):
        noise = NoiseModel(0.1, (0.0,), (1.0,))
        curve = simulate_survival(make_doubling(), RIGHT0, noise, 30, 1000, RngSpec(1))
        assert np.all(curve.survivors == 1000)
        assert curve.lambda_hat == 0.0
        assert mc_vs_spectral(curve, 1.0) == 0.0

    @pytest.mark.parametrize("eps,e", [(0.5, 0.5), (0.25, GOLDEN)])
    def test_analytic_fixtures(self, eps, e):
        curve = simulate_survival(make_doubling(), RIGHT0, make_deterministic_noise(eps), 80, 10 ** 6, RngSpec(2026))
        assert curve.survivors[0] == 10 ** 6
        assert np.all(np.diff(curve.survivors) <= 0)
        assert abs(mc_vs_spectral(curve, e)) <= 3
        assert curve.r_squared >= 0.99

    def test_negative_control(self):
        curve = simulate_survival(make_doubling(), RIGHT0, make_deterministic_noise(0.25), 80, 10 ** 6, RngSpec(7))
        assert abs(mc_vs_spectral(curve, 1 - 0.3)) > 10

    def test_parallel_and_chunking_invariance(self, monkeypatch):
        args = (make_doubling(), HoleFamily(1 / 3), make_uniform_noise(0.05, 4), 60, 5000, RngSpec(99))
        a = simulate_survival(*args)
        b = simulate_survival(*args, jobs=2)
        import escapemeta.montecarlo as mc
        monkeypatch.setattr(mc, "CHUNK", 777)
        c = simulate_survival(*args, jobs=2)
        assert np.array_equal(a.survivors, b.survivors) and np.array_equal(a.survivors, c.survivors)

    def test_fit_window(self):
        with pytest.raises(FitError) as info:
            simulate_survival(make_doubling(), RIGHT0, make_deterministic_noise(0.5), 20, 50, RngSpec(3))
        assert info.value.curve is not None
        n = 10 ** 5
        S = np.array([n] + [round(n * 0.5 ** k) for k in range(1, 20)])
        curve = fit_survival(SurvivalCurve(S, n, 0))
        lo, hi = curve.window
        assert lo == 1 and S[hi] >= 100 and S[hi + 1] < 100
        assert curve.lambda_hat == pytest.approx(math.log(2), rel=1e-3)


class TestStationary:
    def test_invariant_half_without_noise(self):
        noise = NoiseModel(0.01, (0.0,), (1.0,))
        s = simulate_stationary(benchmark_family(1.0), noise, 20_000, 100, RngSpec(5), bins=256, n_chains=4,
                                start=(0.0, 0.5))
        assert s.counts[128:].sum() == 0
        assert s.left_mass == 1.0

    def test_c2_left_mass(self):
        fam = benchmark_family(2.0)
        noise = make_uniform_noise(0.01, 4)
        s = simulate_stationary(fam, noise, 50_000, 10_000, RngSpec(2026), n_chains=400)
        rep = stationary_and_compare(fam, noise, 2 ** 12, with_subsystems=False)
        assert s.left_mass == pytest.approx(2 / 3, abs=0.02)
        assert abs(s.left_mass - rep.alpha_mass) <= 3 * s.left_mass_se

    def test_c1_histogram_close_to_operator(self):
        fam = benchmark_family(1.0)
        noise = make_uniform_noise(0.01, 4)
        s = simulate_stationary(fam, noise, 50_000, 10_000, RngSpec(11), bins=1024, n_chains=200)
        rho = stationary_and_compare(fam, noise, 2 ** 12, with_subsystems=False).rho_eps
        cuts = s.density.grid.cuts
        op_mass = np.array([rho.integrate([(a, b)]) for a, b in zip(cuts[:-1], cuts[1:])])
        mc_mass = s.counts / s.counts.sum()
        assert np.abs(op_mass - mc_mass).sum() <= 0.05

    def test_parallel_invariance(self):
        fam = benchmark_family(2.0)
        noise = make_uniform_noise(0.01, 4)
        a = simulate_stationary(fam, noise, 2000, 100, RngSpec(8), bins=64, n_chains=10, chains_per_task=3)
        b = simulate_stationary(fam, noise, 2000, 100, RngSpec(8), bins=64, n_chains=10, jobs=2)
        assert np.array_equal(a.counts, b.counts) and np.array_equal(a.left_fraction, b.left_fraction)
