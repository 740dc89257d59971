"""
検証汎関数。

  - エネルギー Z(φ) とその伊藤収支（ドリフト仕事・マルチンゲール・伊藤補正・残差）
  - ‖φ‖² の伊藤収支
  - m の二進はしごにまたがるモーメント推定（非爆発判定）
  - C(φ,v) と弱解の特性汎関数恒等式の Monte-Carlo 検査
  - 強解残差 |C(φ,v) − ⟨∂w/∂t, v⟩| と刻み半減による収束次数
  - B^{−1/2} ノルムでの一意性グロンウォール検査

空間積分はすべてデエイリアスされたグリッド上の中点則、時間積分は記録時刻上の台形則。
"""

import math
from dataclasses import replace
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .models import (
    EnergyLedger,
    GridField,
    GronwallReport,
    InitialConditionSpec,
    KernelTables,
    LineageMismatch,
    MomentEntry,
    MomentReport,
    SolverConfig,
    SpectralField,
    StrongResidualReport,
    TestFunction,
    Trajectory,
    WeakCheckEntry,
    WeakCheckReport,
    WienerPath,
)
from .noise import (
    coarsen_path,
    initial_char_functional,
    sample_initial,
    sample_path,
    white_noise_pairing,
    wiener_char_functional,
)
from .physics import convolve_array, gronwall_rate
from .solver import (
    SimulationContext,
    StateTerms,
    build_context,
    simulate,
    simulate_ensemble,
    state_terms,
    step_count,
    with_modes,
)
from .spectral_core import (
    basis_grid_values,
    evaluate_array,
    holder_seminorm,
    integrate,
    sobolev_norm,
    sobolev_norm_array,
)
from .utils import chunk_list, get_logger

logger = get_logger(__name__)

STATE_CHUNK = 4096
DEFAULT_EPSILON = 0.1
DEFAULT_HOLDER_BETA = 0.4
DEFAULT_P_PRIME = 3.5
CLT_Z = 1.96
NON_EXPLOSION_FACTOR = 2.0
GRONWALL_SLACK = 0.1
GRONWALL_ABS_TOL = 1e-14

MOMENT_FUNCTIONALS = ("l2_u_sq", "linf_h_sq", "l4_l4_pow4", "holder_vdual", "grad_mu_sq")


# ---------------------------------------------------------------------------
# テスト関数
# ---------------------------------------------------------------------------

def time_profile(name: str, T: float):
    """
    g(T) = 0 を満たす時間プロファイル (g, g′, g″)。

    linear: T − t / quadratic: (T − t)² / cosine: 1 + cos(πt/T)
    """
    if name == "linear":
        return (
            lambda t: T - np.asarray(t, dtype=float),
            lambda t: np.full_like(np.asarray(t, dtype=float), -1.0),
            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        )
    if name == "quadratic":
        return (
            lambda t: (T - np.asarray(t, dtype=float)) ** 2,
            lambda t: -2.0 * (T - np.asarray(t, dtype=float)),
            lambda t: np.full_like(np.asarray(t, dtype=float), 2.0),
        )
    if name == "cosine":
        w = np.pi / T
        return (
            lambda t: 1.0 + np.cos(w * np.asarray(t, dtype=float)),
            lambda t: -w * np.sin(w * np.asarray(t, dtype=float)),
            lambda t: -(w ** 2) * np.cos(w * np.asarray(t, dtype=float)),
        )
    raise ValueError(f"未知の時間プロファイルです: {name}")


def make_test_function(mode: int, profile: str, T: float) -> TestFunction:
    g, dg, d2g = time_profile(profile, T)
    return TestFunction(mode=mode, g=g, dg=dg, d2g=d2g, T=T, label=f"k{mode}:{profile}")


def default_battery(
    T: float,
    modes: Sequence[int] = (1, 2, 3),
    profiles: Sequence[str] = ("linear", "quadratic", "cosine"),
) -> list[TestFunction]:
    """k ∈ modes × g ∈ profiles のテスト関数一式"""
    return [make_test_function(k, p, T) for k in modes for p in profiles]


def compactness_exponents(p_prime: float = DEFAULT_P_PRIME) -> tuple[float, float]:
    """
    2/3 + 1/p′ + 1/q′ = 1 を満たす (p′, q′)。レポートに載せるだけで判定には使わない。
    """
    if not 3.0 < p_prime < 4.0:
        raise ValueError(f"p′ は (3, 4) の範囲である必要があります: {p_prime}")
    return p_prime, 1.0 / (1.0 - 2.0 / 3.0 - 1.0 / p_prime)


# ---------------------------------------------------------------------------
# 共通ヘルパー
# ---------------------------------------------------------------------------

def _scan_states(ctx: SimulationContext, rows: np.ndarray, chunk: int = STATE_CHUNK) -> Iterator[tuple[slice, StateTerms]]:
    for start in range(0, rows.shape[0], chunk):
        sl = slice(start, min(start + chunk, rows.shape[0]))
        yield sl, state_terms(ctx, rows[sl])


def _energy_density(a_values: np.ndarray, phi: np.ndarray, conv: np.ndarray, linearized: bool) -> np.ndarray:
    potential = -0.5 * phi ** 2 if linearized else 0.25 * phi ** 4 - 0.5 * phi ** 2
    return 0.5 * a_values * phi ** 2 + potential - 0.5 * conv * phi


@lru_cache(maxsize=16)
def _noise_weights(ctx: SimulationContext) -> tuple[np.ndarray, float]:
    """q(x) = Σ ϑ_k e_k(x)² と Σ ϑ_k (J∗e_k, e_k)_h"""
    basis = ctx.basis
    modes = basis_grid_values(basis)
    weights = ctx.thetas.reshape((-1,) + (1,) * basis.dim)
    q = np.sum(weights * modes ** 2, axis=0)
    conv = convolve_array(ctx.kernel, modes, ctx.config.backend)
    kernel_trace = float(np.sum(ctx.thetas * integrate(basis, conv * modes)))
    return q, kernel_trace


def _require_dense(traj: Trajectory) -> WienerPath:
    if not traj.completed:
        raise ValueError(f"爆発した軌道（step={traj.blowup_step}）は収支に使えません")
    if traj.path is None:
        raise ValueError("収支の計算には軌道を生成した Wiener パスが必要です")
    path = traj.path
    if len(traj.times) != path.steps + 1 or not np.allclose(np.diff(traj.times), path.dt, rtol=1e-9, atol=0.0):
        raise ValueError("収支の計算には毎ステップの記録（record_stride=1）が必要です")
    return path


# ---------------------------------------------------------------------------
# エネルギー
# ---------------------------------------------------------------------------

def energy(
    phi: SpectralField,
    a: GridField,
    kernel: KernelTables,
    backend: str = "fft_padded",
    linearized: bool = False,
) -> float:
    """
    Z(φ) = ∫ {aφ²/2 + F(φ)} − ½(J∗φ, φ)。

    例: φ ≡ 1, J ≡ c（単位領域）→ −1/4
    """
    basis = phi.basis
    values = evaluate_array(basis, phi.coeffs)
    conv = convolve_array(kernel, values, backend)
    return float(integrate(basis, _energy_density(a.values, values, conv, linearized)))


def energy_identity_residual(traj: Trajectory, ctx: SimulationContext) -> EnergyLedger:
    """
    Z(φ_m) の伊藤収支表を作る。

    drift_work[n]  = (μ_m, b(φ^n)) dt
    martingale[n]  = (μ_m, ΔW^n)
    correction[n]  = ½ dt [∫(3φ_n² + a − 1) Σϑ_k e_k² − Σ ϑ_k (J∗e_k, e_k)]

    Raises:
        ValueError: 爆発した軌道または間引き記録
    """
    path = _require_dense(traj)
    q, kernel_trace = _noise_weights(ctx)
    n_states = len(traj.times)
    values = np.empty(n_states)
    work = np.empty(n_states)
    martingale = np.zeros(n_states)
    correction = np.empty(n_states)
    dt = path.dt

    cubic = 0.0 if ctx.config.linearized else 3.0
    for sl, terms in _scan_states(ctx, traj.coeffs):
        values[sl] = integrate(
            ctx.basis, _energy_density(ctx.a.values, terms.phi, terms.conv, ctx.config.linearized)
        )
        work[sl] = np.sum(terms.mu_hat * terms.drift, axis=1) * dt
        curvature = cubic * terms.phi ** 2 + ctx.a.values - 1.0
        correction[sl] = 0.5 * dt * (integrate(ctx.basis, curvature * q) - kernel_trace)
        stop = min(sl.stop, path.steps)
        if sl.start < stop:
            martingale[sl.start:stop] = np.sum(
                terms.mu_hat[: stop - sl.start] * path.increments[sl.start:stop], axis=1
            )

    drift_work, martingale, correction = work[:-1], martingale[:-1], correction[:-1]
    cumulative = np.concatenate([[0.0], np.cumsum(drift_work + martingale + correction)])
    residual = values - values[0] - cumulative
    return EnergyLedger(
        functional="energy",
        times=traj.times.copy(),
        values=values,
        drift_work=drift_work,
        martingale=martingale,
        correction=correction,
        residual=residual,
    )


def h_norm_ledger(traj: Trajectory, ctx: SimulationContext) -> EnergyLedger:
    """
    ‖φ_m(t)‖² = ‖φ_m(0)‖² + 2∫(φ_m, b) dt + t·tr(Q_m) + 2∫(φ_m, dw_m) の収支表。
    """
    path = _require_dense(traj)
    coeffs = traj.coeffs
    drifts = np.empty_like(coeffs)
    for sl, terms in _scan_states(ctx, coeffs):
        drifts[sl] = terms.drift
    dt = path.dt
    drift_work = 2.0 * np.sum(coeffs[:-1] * drifts[:-1], axis=1) * dt
    martingale = 2.0 * np.sum(coeffs[:-1] * path.increments, axis=1)
    correction = np.full(path.steps, float(np.sum(ctx.thetas)) * dt)
    values = np.sum(coeffs ** 2, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(drift_work + martingale + correction)])
    return EnergyLedger(
        functional="h_norm",
        times=traj.times.copy(),
        values=values,
        drift_work=drift_work,
        martingale=martingale,
        correction=correction,
        residual=values - values[0] - cumulative,
    )


def _gradient_mu_terms(ctx: SimulationContext, coeffs: np.ndarray) -> np.ndarray:
    out = np.empty(coeffs.shape[0])
    weights = ctx.basis.eigenvalues - 1.0
    for sl, terms in _scan_states(ctx, coeffs):
        out[sl] = np.sum(weights * terms.mu_hat ** 2, axis=1)
    return out


def gradient_mu_norm(traj: Trajectory, ctx: SimulationContext) -> float:
    """Σ_n (t_{n+1} − t_n)·‖∇μ_m(φ(t_n))‖²（左端点和）"""
    if len(traj.times) < 2:
        return 0.0
    terms = _gradient_mu_terms(ctx, traj.coeffs[:-1])
    return float(np.sum(np.diff(traj.times) * terms))


def initial_energy_moment(
    ic: InitialConditionSpec,
    ctx: SimulationContext,
    master_seed: int,
    samples: int = 256,
) -> dict:
    """E[‖φ₀‖²_U + ∫φ₀⁴/4 − ∫φ₀²/2] の Monte-Carlo 推定"""
    if samples < 1:
        raise ValueError("samples は 1 以上である必要があります")
    basis = ctx.basis
    count = 1 if ic.kind == "deterministic" else samples
    coeffs = np.stack([sample_initial(ic, basis, master_seed, i).coeffs for i in range(count)])
    phi = evaluate_array(basis, coeffs)
    values = sobolev_norm_array(basis, coeffs, 1.0) ** 2 + integrate(basis, 0.25 * phi ** 4 - 0.5 * phi ** 2)
    half_width = CLT_Z * float(np.std(values, ddof=1)) / math.sqrt(count) if count > 1 else 0.0
    return {"mean": float(np.mean(values)), "half_width": half_width, "samples": count}


# ---------------------------------------------------------------------------
# モーメント推定
# ---------------------------------------------------------------------------

def trajectory_functionals(
    traj: Trajectory, ctx: SimulationContext, beta: float = DEFAULT_HOLDER_BETA
) -> dict[str, float]:
    """
    1 本の軌道に対する5つの汎関数:
      l2_u_sq      ∫‖φ‖²_U dt
      linf_h_sq    sup_t ‖φ‖²_H
      l4_l4_pow4   ∫∫ φ⁴ dx dt
      holder_vdual sup_t ‖φ‖_{V′} + [φ]_{C^β(V′)}（サンプル対上の下側推定）
      grad_mu_sq   Σ dt ‖∇μ_m‖²
    """
    basis = traj.basis
    coeffs = traj.coeffs
    times = traj.times
    l4 = np.empty(len(times))
    grad = np.empty(len(times))
    weights = basis.eigenvalues - 1.0
    for sl, terms in _scan_states(ctx, coeffs):
        l4[sl] = integrate(basis, terms.phi ** 4)
        grad[sl] = np.sum(weights * terms.mu_hat ** 2, axis=1)
    holder = holder_seminorm(traj, beta, -2.0) if len(times) >= 2 else 0.0
    return {
        "l2_u_sq": float(trapezoid(np.sum(basis.eigenvalues * coeffs ** 2, axis=1), times)),
        "linf_h_sq": float(np.max(np.sum(coeffs ** 2, axis=1))),
        "l4_l4_pow4": float(trapezoid(l4, times)),
        "holder_vdual": float(np.max(sobolev_norm_array(basis, coeffs, -2.0))) + holder,
        "grad_mu_sq": float(np.sum(np.diff(times) * grad[:-1])),
    }


def _mean_and_half_width(values: Sequence[float], z: float) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), z * float(arr.std(ddof=1)) / math.sqrt(arr.size)


def _run_shards(
    config: SolverConfig,
    ctx: SimulationContext,
    ic: InitialConditionSpec,
    indices: Sequence[int],
    shard_size: int,
) -> Iterator[tuple[list[int], list[SpectralField], list[Trajectory]]]:
    for shard in chunk_list(list(indices), shard_size):
        initial = [sample_initial(ic, config.basis, config.noise.master_seed, i) for i in shard]
        yield shard, initial, simulate_ensemble(config, initial, shard, ctx=ctx)


def estimate_moments(
    config: SolverConfig,
    ic: InitialConditionSpec,
    m_list: Sequence[int],
    paths: int,
    shard_size: int = 256,
    beta: float = DEFAULT_HOLDER_BETA,
    z: float = CLT_Z,
    p_prime: float = DEFAULT_P_PRIME,
) -> MomentReport:
    """
    各 m について 5 つの汎関数の Monte-Carlo 平均と CLT 半幅を求め、
    max_m ≤ 2 × median_m を非爆発判定とする。爆発パスが1本でもあれば無効。

    Raises:
        ValueError: paths < 2 または m_list が空
    """
    if paths < 2:
        raise ValueError(f"paths は 2 以上である必要があります: {paths}")
    if not m_list:
        raise ValueError("m_list が空です")

    entries = []
    for m in m_list:
        cfg = with_modes(config, int(m))
        ctx = build_context(cfg)
        samples: dict[str, list[float]] = {name: [] for name in MOMENT_FUNCTIONALS}
        blowups: list[int] = []
        for shard, _, trajectories in _run_shards(cfg, ctx, ic, range(paths), shard_size):
            for index, traj in zip(shard, trajectories):
                if not traj.completed:
                    blowups.append(index)
                    continue
                for name, value in trajectory_functionals(traj, ctx, beta).items():
                    samples[name].append(value)
        means, half_widths = {}, {}
        for name in MOMENT_FUNCTIONALS:
            means[name], half_widths[name] = _mean_and_half_width(samples[name], z)
        entries.append(MomentEntry(m=int(m), paths=paths, means=means, half_widths=half_widths, blowups=blowups))
        logger.info(f"m={m}: モーメント推定完了（爆発 {len(blowups)} 件）")

    valid = all(not e.blowups for e in entries)
    verdicts = {}
    for name in MOMENT_FUNCTIONALS:
        column = np.array([e.means[name] for e in entries])
        verdicts[name] = bool(valid and np.max(column) <= NON_EXPLOSION_FACTOR * np.median(column))
    p, q = compactness_exponents(p_prime)
    return MomentReport(entries=entries, verdicts=verdicts, valid=valid, p_prime=p, q_prime=q, dt=config.dt, T=config.T)


def galerkin_ladder(
    config: SolverConfig,
    ic: InitialConditionSpec,
    m_list: Sequence[int],
    paths: int,
    shard_size: int = 256,
) -> dict:
    """同じシードで m を変えたときの E[sup_t ‖φ_m‖²] と隣接比（< 2 で合格）"""
    means = []
    for m in m_list:
        cfg = with_modes(config, int(m))
        ctx = build_context(cfg)
        values = []
        for _, _, trajectories in _run_shards(cfg, ctx, ic, range(paths), shard_size):
            values.extend(float(np.max(np.sum(t.coeffs ** 2, axis=1))) for t in trajectories if t.completed)
        means.append(float(np.mean(values)) if values else float("nan"))
    ratios = []
    for a, b in zip(means[:-1], means[1:]):
        ratios.append(max(a, b) / min(a, b) if min(a, b) > 0 else (1.0 if a == b else float("inf")))
    return {
        "m": [int(m) for m in m_list],
        "sup_h_sq": means,
        "ratios": ratios,
        "passed": all(r < 2.0 for r in ratios),
    }


# ---------------------------------------------------------------------------
# C(φ, v)
# ---------------------------------------------------------------------------

def _check_test_function(v: TestFunction, times: np.ndarray, m: int) -> None:
    if v.mode >= m:
        raise ValueError(f"テスト関数のモード {v.mode} が m={m} を超えています")
    if abs(float(v.g(v.T))) > 1e-12:
        raise ValueError("g(T) ≠ 0 のテスト関数は使えません")
    if times[0] != 0.0 or abs(times[-1] - v.T) > 1e-9 * max(1.0, v.T):
        raise ValueError(f"軌道の時間範囲 [{times[0]}, {times[-1]}] がテスト関数の [0, {v.T}] と一致しません")


def c_functional_values(
    ctx: SimulationContext,
    times: np.ndarray,
    coeffs: np.ndarray,
    phi0: np.ndarray,
    battery: Sequence[TestFunction],
) -> np.ndarray:
    """
    C(φ, g e_k) = −g(0)(φ₀)_k − ∫ g(t) [Σ_i(φu_i, ∂_i e_k) + (1−μ_k)(μ, e_k)] dt − ∫ c_k(t) g′(t) dt

    Args:
        times: 記録時刻 [n_t]
        coeffs: 係数 [n_t × P × m]
        phi0: 初期データ [P × m]
        battery: テスト関数のリスト

    Returns:
        [P × len(battery)] の実数行列
    """
    basis = ctx.basis
    for v in battery:
        _check_test_function(v, times, basis.m)
    n_t, n_paths, m = coeffs.shape
    modes = sorted({v.mode for v in battery})
    column = {k: i for i, k in enumerate(modes)}
    flux = np.empty((n_t * n_paths, len(modes)))
    for sl, terms in _scan_states(ctx, coeffs.reshape(n_t * n_paths, m)):
        flux[sl] = terms.drift[:, modes]
    flux = flux.reshape(n_t, n_paths, len(modes))

    out = np.empty((n_paths, len(battery)))
    for j, v in enumerate(battery):
        k = v.mode
        g = np.asarray(v.g(times), dtype=float)[:, None]
        dg = np.asarray(v.dg(times), dtype=float)[:, None]
        out[:, j] = (
            -float(v.g(0.0)) * phi0[:, k]
            - trapezoid(g * flux[:, :, column[k]], times, axis=0)
            - trapezoid(coeffs[:, :, k] * dg, times, axis=0)
        )
    return out


def c_functional(traj: Trajectory, v: TestFunction, phi0: SpectralField, ctx: SimulationContext) -> float:
    """
    弱形式の汎関数 C(φ, v)。

    Raises:
        ValueError: g(T) ≠ 0、モード範囲外、または爆発した軌道
    """
    if not traj.completed:
        raise ValueError("爆発した軌道では C(φ,v) を計算できません")
    values = c_functional_values(ctx, traj.times, traj.coeffs[:, None, :], phi0.coeffs[None, :], [v])
    return float(values[0, 0])


# ---------------------------------------------------------------------------
# 弱解の特性汎関数検査
# ---------------------------------------------------------------------------

def _phase_sums(
    ctx: SimulationContext,
    trajectories: Sequence[Trajectory],
    initial: Sequence[SpectralField],
    battery: Sequence[TestFunction],
    xi_matrix: np.ndarray,
) -> np.ndarray:
    times = trajectories[0].times
    coeffs = np.stack([t.coeffs for t in trajectories], axis=1)
    phi0 = np.stack([f.coeffs for f in initial])
    c_values = c_functional_values(ctx, times, coeffs, phi0, battery)
    theta0 = coeffs[0] @ xi_matrix.T
    phases = np.exp(1j * (theta0[:, :, None] + c_values[:, None, :]))
    return phases.sum(axis=0)


def weak_solution_check(
    config: SolverConfig,
    ic: InitialConditionSpec,
    battery: Sequence[TestFunction],
    xi_list: Sequence[SpectralField],
    paths: int,
    shard_size: int = 256,
    bias_constant: Optional[float] = None,
) -> WeakCheckReport:
    """
    E[exp(i⟨φ_m(0), ξ⟩ + iC(φ_m, v))] = Ξ̂(ξ)·Ŵ_m(−∂v/∂t) を N パスで検査する。

    許容幅は 3/√N + C·dt。bias_constant を省略すると、同じパスを 2 倍の刻みに
    粗くした実行との差から C を推定する。

    Raises:
        ValueError: ξ またはテスト関数のモードが範囲外
    """
    basis = config.basis
    if paths < 1:
        raise ValueError("paths は 1 以上である必要があります")
    for xi in xi_list:
        if xi.basis.m > basis.m:
            raise ValueError(f"ξ のモード数 {xi.basis.m} が m={basis.m} を超えています")
    for v in battery:
        if v.mode >= basis.m:
            raise ValueError(f"テスト関数のモード {v.mode} が m={basis.m} を超えています")

    fine_cfg = replace(config, record_stride=1)
    ctx = build_context(fine_cfg)
    steps = step_count(config.T, config.dt)
    xi_matrix = np.zeros((len(xi_list), basis.m))
    for i, xi in enumerate(xi_list):
        xi_matrix[i, : xi.basis.m] = xi.coeffs

    fit_bias = bias_constant is None
    if fit_bias:
        if steps % 2 != 0:
            raise ValueError("バイアス推定には偶数のステップ数が必要です")
        coarse_cfg = replace(fine_cfg, dt=2.0 * config.dt)
        coarse_ctx = build_context(coarse_cfg)
        coarse_sums = np.zeros((len(xi_list), len(battery)), dtype=complex)

    sums = np.zeros((len(xi_list), len(battery)), dtype=complex)
    blowups: list[int] = []
    for shard in chunk_list(list(range(paths)), shard_size):
        initial = [sample_initial(ic, basis, config.noise.master_seed, i) for i in shard]
        fine_paths = [sample_path(config.noise, basis, steps, config.dt, i) for i in shard]
        trajectories = simulate_ensemble(fine_cfg, initial, shard, paths=fine_paths, ctx=ctx)
        if fit_bias:
            coarse = simulate_ensemble(
                coarse_cfg, initial, shard, paths=[coarsen_path(p, 2) for p in fine_paths], ctx=coarse_ctx
            )
            good = [i for i in range(len(shard)) if trajectories[i].completed and coarse[i].completed]
        else:
            good = [i for i in range(len(shard)) if trajectories[i].completed]
        blowups.extend(shard[i] for i in range(len(shard)) if i not in good)
        if not good:
            continue
        sums += _phase_sums(ctx, [trajectories[i] for i in good], [initial[i] for i in good], battery, xi_matrix)
        if fit_bias:
            coarse_sums += _phase_sums(
                coarse_ctx, [coarse[i] for i in good], [initial[i] for i in good], battery, xi_matrix
            )
        logger.debug(f"弱解検査: パス {shard[0]}–{shard[-1]} を処理しました")

    completed = paths - len(blowups)
    denominator = max(completed, 1)
    lhs = sums / denominator
    if fit_bias:
        bias_constant = float(np.max(np.abs(lhs - coarse_sums / denominator))) / config.dt
    band = 3.0 / math.sqrt(denominator) + bias_constant * config.dt

    entries = []
    for i, xi in enumerate(xi_list):
        xi_full = SpectralField(coeffs=xi_matrix[i], basis=basis)
        xi_hat = initial_char_functional(ic, xi_full)
        for j, v in enumerate(battery):
            rhs = xi_hat * wiener_char_functional(v, config.noise, basis)
            entries.append(WeakCheckEntry(
                xi_index=i,
                test_label=v.label,
                lhs=complex(lhs[i, j]),
                rhs=complex(rhs),
                discrepancy=float(abs(lhs[i, j] - rhs)),
                band=band,
            ))
    logger.info(f"弱解検査: N={completed}, 許容幅={band:.4g}（C={bias_constant:.4g}）")
    return WeakCheckReport(entries=entries, paths=completed, dt=config.dt, blowups=blowups)


# ---------------------------------------------------------------------------
# 強解残差
# ---------------------------------------------------------------------------

def strong_residual(
    traj: Trajectory,
    path: WienerPath,
    phi0: SpectralField,
    battery: Sequence[TestFunction],
    ctx: SimulationContext,
    epsilon: float = DEFAULT_EPSILON,
    negative_control: bool = False,
) -> StrongResidualReport:
    """
    residual(v) = |C(φ, v) − ⟨∂w/∂t, v⟩| と ‖φ(0) − φ₀‖_{−ε}。

    negative_control=True のときだけ、軌道を生成したものとは別番号のパスを受け付ける。

    Raises:
        LineageMismatch: 設定ハッシュ・シード・刻み・ステップ数・パス番号の不一致
    """
    if traj.config_hash != ctx.fingerprint:
        raise LineageMismatch("軌道の設定ハッシュがコンテキストと一致しません")
    source = traj.path
    if source is None:
        raise LineageMismatch("軌道に Wiener パスの系譜がありません")
    if source.master_seed != path.master_seed:
        raise LineageMismatch(f"master_seed が一致しません: {source.master_seed} ≠ {path.master_seed}")
    if source.steps != path.steps or not math.isclose(source.dt, path.dt, rel_tol=1e-12):
        raise LineageMismatch("パスの刻み幅またはステップ数が軌道と一致しません")
    if source.path_index != path.path_index and not negative_control:
        raise LineageMismatch(f"path_index が一致しません: {source.path_index} ≠ {path.path_index}")
    if not 0.0 < epsilon < 0.25:
        raise ValueError(f"ε は (0, 1/4) の範囲である必要があります: {epsilon}")

    residuals = {}
    for v in battery:
        c_value = c_functional(traj, v, phi0, ctx)
        residuals[v.label] = abs(c_value - white_noise_pairing(path, v))
    mismatch = sobolev_norm(traj.state(0).with_coeffs(traj.coeffs[0] - phi0.coeffs), -epsilon)
    return StrongResidualReport(residuals=residuals, ic_mismatch=mismatch, negative_control=negative_control)


def _fit_order(dts: Sequence[float], errors: Sequence[float]) -> Optional[float]:
    errors = np.asarray(errors, dtype=float)
    if np.any(errors <= 0.0):
        return None
    slope, _ = np.polyfit(np.log(np.asarray(dts)), np.log(errors), 1)
    return float(slope)


def _refined_path(config: SolverConfig, path_index: int, halvings: int, path_seed_index: Optional[int] = None) -> tuple[WienerPath, float]:
    fine_dt = config.dt / 2 ** halvings
    steps = step_count(config.T, fine_dt)
    index = path_index if path_seed_index is None else path_seed_index
    return sample_path(config.noise, config.basis, steps, fine_dt, index), fine_dt


def strong_residual_study(
    config: SolverConfig,
    phi0: SpectralField,
    battery: Sequence[TestFunction],
    path_index: int = 0,
    halvings: int = 3,
    epsilon: float = DEFAULT_EPSILON,
    min_order: float = 0.5,
    control_factor: float = 10.0,
) -> dict:
    """
    1 本の細かいパスを粗くして dt, dt/2, … の各刻みで残差を測り、最小二乗で次数を推定する。
    最細刻みでは別番号のパスとの残差（負の対照）も測る。
    """
    if halvings < 1:
        raise ValueError("halvings は 1 以上である必要があります")
    fine, _ = _refined_path(config, path_index, halvings)
    dts, levels = [], []
    for level in range(halvings + 1):
        factor = 2 ** (halvings - level)
        cfg = replace(config, dt=config.dt / 2 ** level, record_stride=1)
        ctx = build_context(cfg)
        path = coarsen_path(fine, factor)
        traj = simulate(cfg, phi0, path=path, ctx=ctx)
        if not traj.completed:
            return {"passed": False, "blowup": True, "level": level, "dt": cfg.dt}
        report = strong_residual(traj, path, phi0, battery, ctx, epsilon)
        dts.append(cfg.dt)
        levels.append(report)

    control_path, _ = _refined_path(config, path_index, halvings, path_seed_index=path_index + 1)
    control = strong_residual(traj, control_path, phi0, battery, ctx, epsilon, negative_control=True)

    per_test = {}
    passed = True
    for v in battery:
        errors = [r.residuals[v.label] for r in levels]
        order = _fit_order(dts, errors)
        matched = errors[-1]
        ratio = control.residuals[v.label] / matched if matched > 0 else float("inf")
        negligible = max(errors) <= 1e-12
        ok = negligible or (order is not None and order >= min_order and ratio >= control_factor)
        passed = passed and ok
        per_test[v.label] = {"residuals": errors, "order": order, "control": control.residuals[v.label], "control_ratio": ratio, "passed": ok}
    return {
        "passed": passed,
        "dt": dts,
        "tests": per_test,
        "ic_mismatch": levels[-1].ic_mismatch,
    }


def energy_ledger_study(
    config: SolverConfig,
    phi0: SpectralField,
    path_index: int = 0,
    halvings: int = 3,
    min_factor: float = 1.8,
) -> dict:
    """同じ細かいパス上で刻みを半減させたときの |R(T)| の縮小率"""
    if halvings < 1:
        raise ValueError("halvings は 1 以上である必要があります")
    fine, _ = _refined_path(config, path_index, halvings)
    dts, finals, ledgers = [], [], []
    for level in range(halvings + 1):
        cfg = replace(config, dt=config.dt / 2 ** level, record_stride=1)
        ctx = build_context(cfg)
        traj = simulate(cfg, phi0, path=coarsen_path(fine, 2 ** (halvings - level)), ctx=ctx)
        if not traj.completed:
            return {"passed": False, "blowup": True, "level": level, "dt": cfg.dt}
        ledger = energy_identity_residual(traj, ctx)
        dts.append(cfg.dt)
        finals.append(abs(float(ledger.residual[-1])))
        ledgers.append(ledger.to_dict())
    factors = [a / b if b > 0 else float("inf") for a, b in zip(finals[:-1], finals[1:])]
    return {
        "passed": all(f >= min_factor for f in factors),
        "dt": dts,
        "final_residual": finals,
        "factors": factors,
        "ledgers": ledgers,
    }


def strong_convergence_order(
    config: SolverConfig,
    phi0: SpectralField,
    path_index: int = 0,
    levels: int = 3,
    reference_factor: int = 4,
) -> dict:
    """同じブラウン運動上で、最細刻みの参照解に対する T での H 誤差と次数"""
    if levels < 2:
        raise ValueError("levels は 2 以上である必要があります")
    finest_halvings = levels - 1
    total = 2 ** finest_halvings * reference_factor
    ref_dt = config.dt / total
    fine = sample_path(config.noise, config.basis, step_count(config.T, ref_dt), ref_dt, path_index)
    ref_cfg = replace(config, dt=ref_dt, record_stride=step_count(config.T, ref_dt))
    reference = simulate(ref_cfg, phi0, path=fine)
    if not reference.completed:
        return {"passed": False, "blowup": True, "level": "reference"}
    dts, errors = [], []
    for level in range(levels):
        dt = config.dt / 2 ** level
        cfg = replace(config, dt=dt, record_stride=step_count(config.T, dt))
        traj = simulate(cfg, phi0, path=coarsen_path(fine, int(round(dt / ref_dt))))
        if not traj.completed:
            return {"passed": False, "blowup": True, "level": level}
        dts.append(dt)
        errors.append(float(np.sqrt(np.sum((traj.coeffs[-1] - reference.coeffs[-1]) ** 2))))
    return {"dt": dts, "errors": errors, "order": _fit_order(dts, errors)}


# ---------------------------------------------------------------------------
# 一意性（グロンウォール）
# ---------------------------------------------------------------------------

def uniqueness_gronwall(
    traj1: Trajectory,
    traj2: Trajectory,
    ctx: SimulationContext,
    slack: float = GRONWALL_SLACK,
    abs_tol: float = GRONWALL_ABS_TOL,
) -> GronwallReport:
    """
    r = φ₁ − φ₂ について G(t) = Σ_{k≥1} r_k² / (μ_k − 1) を計算し、

        G_{n+1} ≤ G_n (1 + K Δt)(1 + slack·Δt/T) + abs_tol
        G(T)    ≤ G(0) e^{KT} (1 + slack) + abs_tol

    を検査する。K = (2‖∇J‖²_{L¹} + ‖u‖²_∞) / c0。

    Raises:
        LineageMismatch: 2 本の軌道が同じ Wiener パスから生成されていない
        ValueError: t=0 のモード0係数が異なる、または記録時刻が異なる
    """
    for traj in (traj1, traj2):
        if not traj.completed:
            raise ValueError("爆発した軌道は比較できません")
        if traj.path is None:
            raise LineageMismatch("軌道に Wiener パスの系譜がありません")
    p1, p2 = traj1.path, traj2.path
    if p1.lineage != p2.lineage or p1.steps != p2.steps or not math.isclose(p1.dt, p2.dt, rel_tol=1e-12):
        raise LineageMismatch(f"2 本の軌道の Wiener パスが異なります: {p1.lineage} ≠ {p2.lineage}")
    if traj1.coeffs.shape != traj2.coeffs.shape or not np.array_equal(traj1.times, traj2.times):
        raise ValueError("記録時刻または係数の形状が一致しません")
    if traj1.coeffs[0, 0] != traj2.coeffs[0, 0]:
        raise ValueError("t=0 のモード0係数（平均）が異なるため平均ゼロの議論が使えません")

    basis = ctx.basis
    r = traj1.coeffs - traj2.coeffs
    G = np.sum(r[:, 1:] ** 2 / (basis.eigenvalues[1:] - 1.0), axis=1)
    K = gronwall_rate(ctx.kernel.grad_l1_norm, ctx.velocity.sup_norm, ctx.c0)
    times = traj1.times
    T = float(times[-1] - times[0])
    steps = np.diff(times)
    bound = G[:-1] * (1.0 + K * steps) * (1.0 + slack * steps / T) + abs_tol
    violations = [int(n) for n in np.flatnonzero(G[1:] > bound)]
    final_bound = float(G[0] * math.exp(K * T) * (1.0 + slack) + abs_tol)
    return GronwallReport(
        times=times.copy(),
        G=G,
        K=K,
        violations=violations,
        final_bound=final_bound,
        mean_zero_defect=float(np.max(np.abs(r[:, 0]))),
    )


def uniqueness_study(
    config: SolverConfig,
    phi0: SpectralField,
    seeds: int = 10,
    perturbation: float = 1e-3,
    slack: float = GRONWALL_SLACK,
) -> dict:
    """各パス番号で (1) 同一入力のビット一致と (2) δ·e_1 摂動のグロンウォール上界を検査する"""
    if config.basis.m < 2:
        raise ValueError("摂動には m ≥ 2 が必要です")
    ctx = build_context(config)
    perturbed = phi0.coeffs.copy()
    perturbed[1] += perturbation
    phi_b = phi0.with_coeffs(perturbed)
    results = []
    for index in range(seeds):
        first = simulate(config, phi0, index, ctx=ctx)
        second = simulate(config, phi0, index, ctx=ctx)
        identical = bool(np.array_equal(first.coeffs, second.coeffs) and first.status == second.status)
        if not first.completed:
            results.append({"path_index": index, "identical": identical, "blowup": True, "passed": False})
            continue
        other = simulate(config, phi_b, index, path=first.path, ctx=ctx)
        if not other.completed:
            results.append({"path_index": index, "identical": identical, "blowup": True, "passed": False})
            continue
        report = uniqueness_gronwall(first, other, ctx, slack=slack)
        results.append({
            "path_index": index,
            "identical": identical,
            "gronwall": report.to_dict(),
            "passed": identical and report.passed,
        })
    return {"passed": all(r["passed"] for r in results), "seeds": results, "perturbation": perturbation}
