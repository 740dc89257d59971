"""
noise モジュールのユニットテスト
"""

import math

import numpy as np
import pytest

from src.models import Domain, InitialConditionSpec, NoiseSpec, SpectralField
from src.noise import (
    coarsen_path,
    path_cumsum,
    initial_char_functional,
    ito_pairing,
    path_generator,
    sample_initial,
    sample_path,
    thetas_for,
    validate_kq,
    white_noise_pairing,
    wiener_char_functional,
)
from src.spectral_core import build_basis
from src.verify import make_test_function

DOMAIN = Domain(dim=1, lengths=(1.0,))


@pytest.fixture
def basis():
    return build_basis(DOMAIN, 4)


@pytest.fixture
def spec():
    return NoiseSpec(sigma2=0.01, q=2.0, master_seed=7)


class TestThetas:
    def test_generator_family(self, basis, spec):
        np.testing.assert_allclose(thetas_for(spec, basis), 0.01 * basis.eigenvalues ** -2.0)

    def test_explicit_list_too_short(self, basis):
        with pytest.raises(ValueError):
            thetas_for(NoiseSpec(thetas=(1.0, 0.5)), basis)

    def test_negative_theta_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(thetas=(1.0, -0.1))

    def test_negative_decay_exponent_rejected(self):
        """q < 0 では ϑ_k が増加してしまう"""
        with pytest.raises(ValueError):
            NoiseSpec(sigma2=0.01, q=-1.0)


class TestValidateKQ:
    def test_decaying_generator_passes(self, basis, spec):
        report = validate_kq(spec, basis)
        assert report.converged
        assert report.passed
        assert report.gating
        assert report.partial_sum > 0

    def test_flat_generator_fails(self, basis):
        """ϑ_k 一定ではブロック和が倍々に増える"""
        report = validate_kq(NoiseSpec(sigma2=1.0, q=0.0), basis, probe_depth=64)
        assert report.tail_ratio == pytest.approx(2.0)
        assert not report.passed

    def test_explicit_list_is_advisory(self, basis):
        report = validate_kq(NoiseSpec(thetas=(1.0,) * 16), basis)
        assert not report.converged
        assert not report.gating
        assert report.passed

    def test_zero_noise(self, basis):
        report = validate_kq(NoiseSpec(sigma2=0.0), basis, probe_depth=16)
        assert report.partial_sum == 0.0
        assert report.passed

    def test_probe_depth_too_small(self, basis, spec):
        with pytest.raises(ValueError):
            validate_kq(spec, basis, probe_depth=3)

    def test_inverse_eigenvalue_decay_fails_in_3d(self):
        """d=3 では ϑ_k = μ_k^{−1} で (μ_k − 1) ϑ_k → 1 となり和が発散する"""
        basis_3d = build_basis(Domain(dim=3, lengths=(1.0, 1.0, 1.0)), 1)
        report = validate_kq(NoiseSpec(sigma2=1.0, q=1.0), basis_3d)
        assert not report.converged
        assert not report.passed


class TestSamplePath:
    def test_reproducible(self, basis, spec):
        a = sample_path(spec, basis, 10, 0.01, 3)
        b = sample_path(spec, basis, 10, 0.01, 3)
        np.testing.assert_array_equal(a.increments, b.increments)
        assert a.lineage == (7, 3)

    def test_independent_indices(self, basis, spec):
        a = sample_path(spec, basis, 10, 0.01, 0)
        b = sample_path(spec, basis, 10, 0.01, 1)
        assert not np.array_equal(a.increments, b.increments)

    def test_prefix_consistent_across_modes(self, spec):
        """m を増やしても先頭モードの増分は変わらない"""
        small = sample_path(spec, build_basis(DOMAIN, 4), 20, 0.01, 2)
        large = sample_path(spec, build_basis(DOMAIN, 8), 20, 0.01, 2)
        np.testing.assert_array_equal(large.increments[:, :4], small.increments)

    def test_zero_noise_is_zero(self, basis):
        path = sample_path(NoiseSpec(sigma2=0.0), basis, 5, 0.1, 0)
        assert np.all(path.increments == 0.0)

    def test_increment_variance_and_mode_independence(self, basis, spec):
        """Var ΔW_k = ϑ_k dt、異なるモードの相関は 0（4σ の CLT 帯）"""
        steps, dt = 100_000, 0.01
        path = sample_path(spec, basis, steps, dt, 5)
        expected = thetas_for(spec, basis) * dt
        variance = np.mean(path.increments ** 2, axis=0)
        np.testing.assert_array_less(np.abs(variance - expected), 4.0 * expected * math.sqrt(2.0 / steps))

        xi = path.increments / np.sqrt(expected)
        cov = xi.T @ xi / steps
        off_diagonal = cov[~np.eye(basis.m, dtype=bool)]
        assert np.max(np.abs(off_diagonal)) < 4.0 / math.sqrt(steps)

    def test_distinct_indices_are_uncorrelated(self, basis, spec):
        steps, dt = 100_000, 0.01
        expected = np.sqrt(thetas_for(spec, basis) * dt)
        a = sample_path(spec, basis, steps, dt, 0).increments / expected
        b = sample_path(spec, basis, steps, dt, 1).increments / expected
        corr = np.mean(a * b, axis=0)
        assert np.max(np.abs(corr)) < 4.0 / math.sqrt(steps)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            path_generator(0, -1)

    def test_coarsen_sums_increments(self, basis, spec):
        fine = sample_path(spec, basis, 8, 0.01, 0)
        coarse = coarsen_path(fine, 4)
        assert coarse.steps == 2
        assert coarse.dt == pytest.approx(0.04)
        np.testing.assert_allclose(coarse.increments[0], fine.increments[:4].sum(axis=0))
        np.testing.assert_allclose(path_cumsum(coarse)[-1], path_cumsum(fine)[-1])

    def test_coarsen_requires_divisor(self, basis, spec):
        with pytest.raises(ValueError):
            coarsen_path(sample_path(spec, basis, 9, 0.01, 0), 2)

    def test_cumulative_starts_at_zero(self, basis, spec):
        w = path_cumsum(sample_path(spec, basis, 5, 0.01, 0))
        assert w.shape == (6, 4)
        assert np.all(w[0] == 0.0)


class TestPairings:
    def test_ito_and_trapezoid_differ_by_half_step(self, basis, spec):
        """線形 g では台形則と伊藤和の差が −dt·w(T)/2 に一致する"""
        steps, dt = 50, 0.01
        path = sample_path(spec, basis, steps, dt, 1)
        v = make_test_function(1, "linear", steps * dt)
        w_T = path_cumsum(path)[-1, 1]
        diff = white_noise_pairing(path, v) - ito_pairing(path, v)
        assert diff == pytest.approx(-0.5 * dt * w_T, abs=1e-14)

    def test_horizon_mismatch(self, basis, spec):
        path = sample_path(spec, basis, 10, 0.01, 0)
        with pytest.raises(ValueError):
            white_noise_pairing(path, make_test_function(1, "linear", 0.2))

    def test_mode_out_of_range(self, basis, spec):
        path = sample_path(spec, basis, 10, 0.01, 0)
        with pytest.raises(ValueError):
            ito_pairing(path, make_test_function(4, "linear", 0.1))

    def test_char_functional_linear(self, basis, spec):
        """∫(T − t)² dt = T³/3"""
        T = 0.5
        v = make_test_function(2, "linear", T)
        theta = thetas_for(spec, basis)[2]
        value = wiener_char_functional(v, spec, basis)
        assert value.real == pytest.approx(math.exp(-0.5 * theta * T ** 3 / 3.0))
        assert value.imag == 0.0

    def test_char_functional_matches_monte_carlo(self, basis):
        """E[exp(i⟨∂w/∂t, v⟩)] を 10⁴ パスで推定し exp(−ϑ_k T³/6) と比べる"""
        spec = NoiseSpec(thetas=(4.0, 2.0, 1.0, 0.5), master_seed=3)
        T, steps, n_paths = 1.0, 20, 10_000
        paths = [sample_path(spec, basis, steps, T / steps, i) for i in range(n_paths)]
        for k in (0, 1, 2):
            v = make_test_function(k, "linear", T)
            pairings = np.array([white_noise_pairing(p, v) for p in paths])
            estimate = np.mean(np.exp(1j * pairings))
            closed = wiener_char_functional(v, spec, basis)
            assert closed.real == pytest.approx(math.exp(-spec.thetas[k] * T ** 3 / 6.0))
            assert abs(estimate - closed) < 3e-2

    def test_char_functional_rejects_plain_callable(self, basis, spec):
        with pytest.raises(TypeError):
            wiener_char_functional(lambda t: t, spec, basis)


class TestInitialCondition:
    def test_deterministic(self, basis):
        ic = InitialConditionSpec(kind="deterministic", mean=(0.0, 0.1))
        phi0 = sample_initial(ic, basis, 0, 5)
        assert phi0.coeffs.tolist() == [0.0, 0.1, 0.0, 0.0]

    def test_gaussian_reproducible(self, basis):
        ic = InitialConditionSpec(kind="gaussian", mean=(0.0,), variance=(0.0, 0.01, 0.01))
        a = sample_initial(ic, basis, 3, 1)
        b = sample_initial(ic, basis, 3, 1)
        np.testing.assert_array_equal(a.coeffs, b.coeffs)
        assert a.coeffs[0] == 0.0
        assert a.coeffs[3] == 0.0
        assert a.coeffs[1] != 0.0

    def test_char_functional(self, basis):
        xi = SpectralField(coeffs=np.array([0.0, 1.0, 2.0, 0.0]), basis=basis)
        det = InitialConditionSpec(kind="deterministic", mean=(0.0, 0.5))
        assert initial_char_functional(det, xi) == pytest.approx(complex(math.cos(0.5), math.sin(0.5)))
        gauss = InitialConditionSpec(kind="gaussian", mean=(), variance=(0.0, 0.1, 0.1))
        assert abs(initial_char_functional(gauss, xi)) == pytest.approx(math.exp(-0.5 * (0.1 + 0.4)))

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            InitialConditionSpec(kind="uniform")
