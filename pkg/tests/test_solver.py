"""
solver モジュールのユニットテスト
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from src.models import (
    AssumptionViolation,
    BlowUpDetected,
    Domain,
    GridField,
    KernelSpec,
    NoiseSpec,
    SolverConfig,
    SpectralField,
    VelocitySpec,
)
from src.noise import path_cumsum, sample_path
from src.solver import (
    build_context,
    config_fingerprint,
    drift,
    simulate,
    simulate_ensemble,
    step_count,
    step_em,
    step_imex,
    with_modes,
)
from src.spectral_core import build_basis, evaluate, project


def make_config(
    m=4,
    level=2.5,
    sigma2=0.0,
    thetas=None,
    T=0.01,
    dt=1e-3,
    stepper="imex",
    linearized=False,
    record_stride=1,
    blowup_threshold=1e3,
    seed=11,
) -> SolverConfig:
    basis = build_basis(Domain(dim=1, lengths=(1.0,)), m)
    return SolverConfig(
        basis=basis,
        kernel=KernelSpec(family="constant", level=level),
        velocity=VelocitySpec(),
        noise=NoiseSpec(thetas=thetas, sigma2=sigma2, q=2.0, master_seed=seed),
        T=T,
        dt=dt,
        stepper=stepper,
        linearized=linearized,
        record_stride=record_stride,
        blowup_threshold=blowup_threshold,
    )


def make_field(config, coeffs) -> SpectralField:
    values = np.zeros(config.basis.m)
    values[: len(coeffs)] = coeffs
    return SpectralField(coeffs=values, basis=config.basis)


class TestConfig:
    def test_step_count(self):
        assert step_count(0.5, 1e-4) == 5000

    def test_step_count_not_multiple(self):
        with pytest.raises(ValueError):
            step_count(0.5, 0.3)

    def test_invalid_stepper(self):
        with pytest.raises(ValueError):
            make_config(stepper="rk4")

    def test_with_modes_keeps_fingerprint_inputs(self):
        config = make_config(m=4)
        larger = with_modes(config, 8)
        assert larger.basis.m == 8
        assert config_fingerprint(config) != config_fingerprint(larger)
        assert config_fingerprint(config) == config_fingerprint(make_config(m=4))


class TestBuildContext:
    def test_default_stabilisation(self):
        """S 省略時は max a + 2"""
        ctx = build_context(make_config(level=2.5))
        assert ctx.c0 == pytest.approx(1.5)
        assert ctx.potential.c0 == ctx.c0
        assert ctx.stab == pytest.approx(4.5)

    def test_c0_gate(self):
        with pytest.raises(AssumptionViolation) as exc:
            build_context(make_config(level=1.0))
        assert exc.value.gate == "c0_positive"

    def test_trace_gate(self):
        config = make_config()
        flat = replace(config, noise=NoiseSpec(sigma2=1.0, q=0.0))
        with pytest.raises(AssumptionViolation) as exc:
            build_context(flat)
        assert exc.value.gate == "trace_kq"


class TestDrift:
    def test_mean_mode_drift_is_zero(self):
        """保存則: b_0 = 0"""
        config = make_config(m=8)
        ctx = build_context(config)
        phi = make_field(config, [0.2, 0.3, -0.1, 0.05])
        assert drift(phi, ctx).coeffs[0] == 0.0

    def test_first_mode_formula(self):
        """J ≡ 2.5, φ = 0.1·e_1 → b_1 = −π²(1.5·0.1 + (φ³)_1)"""
        config = make_config(m=8)
        ctx = build_context(config)
        phi = make_field(config, [0.0, 0.1])
        values = evaluate(phi).values
        cubic = project(GridField(values=values ** 3, basis=config.basis)).coeffs[1]
        expected = -math.pi ** 2 * (1.5 * 0.1 + cubic)
        assert drift(phi, ctx).coeffs[1] == pytest.approx(expected, rel=1e-12)


class TestSteps:
    def test_em_and_imex_agree_to_first_order(self):
        config = make_config(m=4)
        ctx = build_context(config)
        phi = make_field(config, [0.0, 0.1])
        dw = np.zeros(4)
        em = step_em(phi, dw, 1e-6, ctx)
        imex = step_imex(phi, dw, 1e-6, ctx)
        np.testing.assert_allclose(em.coeffs, imex.coeffs, atol=1e-9)

    def test_imex_without_stabilisation_is_em(self):
        """S = 0 の IMEX は EM と一致する"""
        config = replace(make_config(m=4), stab=0.0)
        ctx = build_context(config)
        assert ctx.stab == 0.0
        phi = make_field(config, [0.1, 0.2, -0.1])
        dw = np.array([1e-3, -2e-3, 5e-4, 0.0])
        np.testing.assert_array_equal(step_imex(phi, dw, 1e-3, ctx).coeffs, step_em(phi, dw, 1e-3, ctx).coeffs)

    def test_blowup_raises(self):
        config = make_config(m=4, blowup_threshold=1.0)
        ctx = build_context(config)
        phi = make_field(config, [0.5])
        with pytest.raises(BlowUpDetected) as exc:
            step_em(phi, np.array([5.0, 0.0, 0.0, 0.0]), 1e-3, ctx)
        assert exc.value.sup_norm > 1.0

    def test_increment_shape(self):
        config = make_config(m=4)
        ctx = build_context(config)
        with pytest.raises(ValueError):
            step_em(make_field(config, [0.1]), np.zeros(3), 1e-3, ctx)


class TestSimulate:
    def test_equilibrium_is_constant(self):
        """Q = 0 で定数の初期値は動かない"""
        config = make_config(m=8, T=0.01, dt=1e-3)
        phi0 = make_field(config, [0.3])
        traj = simulate(config, phi0)
        assert traj.completed
        assert len(traj.times) == 11
        np.testing.assert_allclose(traj.coeffs, np.tile(phi0.coeffs, (11, 1)), atol=1e-12)

    def test_linearised_decay_matches_exponential(self):
        """線形化・Q=0 では c_1(t) = c_1(0) exp(−π²·1.5·t)"""
        config = make_config(m=4, T=0.1, dt=1e-4, stepper="em", linearized=True)
        traj = simulate(config, make_field(config, [0.0, 0.2]))
        rate = (config.basis.eigenvalues[1] - 1.0) * 1.5
        assert traj.coeffs[-1, 1] == pytest.approx(0.2 * math.exp(-rate * 0.1), rel=5e-3)
        np.testing.assert_allclose(traj.coeffs[:, 2:], 0.0, atol=1e-12)

    def test_mean_conserved_without_mean_noise(self):
        """ϑ_0 = 0 ならモード0は保存される"""
        thetas = (0.0, 1e-3, 1e-3, 1e-3)
        config = make_config(m=4, thetas=thetas, T=0.02, dt=1e-3)
        traj = simulate(config, make_field(config, [0.25, 0.1]), path_index=3)
        np.testing.assert_allclose(traj.coeffs[:, 0], 0.25, atol=1e-14)

    def test_mass_mode_follows_noise(self):
        """ϑ_0 > 0 でも c_0(t_n) − c_0(0) = Σ ΔW_0（両スキーム・複数の初期値）"""
        rng = np.random.default_rng(8)
        for stepper in ("em", "imex"):
            for seed in range(5):
                config = make_config(m=4, sigma2=0.01, T=0.02, dt=1e-3, stepper=stepper, seed=seed)
                phi0 = make_field(config, 0.1 * rng.standard_normal(4))
                traj = simulate(config, phi0, path_index=seed)
                assert traj.completed
                np.testing.assert_allclose(
                    traj.coeffs[:, 0] - phi0.coeffs[0], path_cumsum(traj.path)[:, 0], atol=1e-12
                )

    def test_deterministic_replay(self):
        config = make_config(m=4, sigma2=0.01)
        phi0 = make_field(config, [0.0, 0.1])
        a = simulate(config, phi0, path_index=2)
        b = simulate(config, phi0, path_index=2)
        np.testing.assert_array_equal(a.coeffs, b.coeffs)
        assert a.path.lineage == (11, 2)
        assert a.config_hash == config_fingerprint(config)

    def test_record_stride(self):
        config = make_config(m=4, T=0.01, dt=1e-3, record_stride=4)
        traj = simulate(config, make_field(config, [0.0, 0.1]))
        np.testing.assert_allclose(traj.times, [0.0, 0.004, 0.008, 0.01])

    def test_explicit_path(self):
        config = make_config(m=4, sigma2=0.01)
        path = sample_path(config.noise, config.basis, 10, 1e-3, 5)
        traj = simulate(config, make_field(config, [0.0, 0.1]), path=path)
        assert traj.path is path

    def test_blowup_status(self):
        """上限超過は例外ではなく status で返す"""
        config = make_config(m=4, blowup_threshold=0.1)
        traj = simulate(config, make_field(config, [0.5]))
        assert traj.status == "blowup"
        assert traj.blowup_step == 0
        assert not traj.completed


class TestSimulateEnsemble:
    def test_batch_matches_single(self):
        config = make_config(m=4, sigma2=0.01)
        initial = [make_field(config, [0.0, 0.1]), make_field(config, [0.1, -0.2])]
        batch = simulate_ensemble(config, initial, [0, 1])
        for index, phi0 in enumerate(initial):
            single = simulate(config, phi0, path_index=index)
            np.testing.assert_allclose(batch[index].coeffs, single.coeffs, atol=1e-13)

    def test_blowup_is_masked_per_path(self):
        """1 本だけ爆発しても他のパスは最後まで進む"""
        config = make_config(m=4, blowup_threshold=1.0)
        initial = np.array([[0.1, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]])
        trajectories = simulate_ensemble(config, initial, [0, 1])
        assert trajectories[0].completed
        assert len(trajectories[0].times) == 11
        assert trajectories[1].status == "blowup"

    def test_index_count_mismatch(self):
        config = make_config(m=4)
        with pytest.raises(ValueError):
            simulate_ensemble(config, np.zeros((2, 4)), [0])

    def test_path_shape_mismatch(self):
        config = make_config(m=4, sigma2=0.01)
        wrong = sample_path(config.noise, config.basis, 5, 1e-3, 0)
        with pytest.raises(ValueError):
            simulate_ensemble(config, np.zeros((1, 4)), [0], paths=[wrong])
