"""
ガラーキン確率常微分方程式系

    dc_k = b_k(c) dt + √ϑ_k dβ_k
    b_k  = Σ_i (φu_i, ∂_i e_k)_h + (1 − μ_k) μ̂_k

の時間積分（Euler–Maruyama と線形安定化 IMEX）。
アンサンブルはパス方向にバッチ化し、パスごとに爆発をマスクして止める。
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .models import (
    AssumptionViolation,
    BlowUpDetected,
    GridField,
    KernelTables,
    KQReport,
    PotentialParams,
    SolverConfig,
    SpectralField,
    Trajectory,
    VelocityField,
    WienerPath,
)
from .noise import sample_path, thetas_for, validate_kq
from .physics import (
    chemical_potential_grid,
    coefficient_a,
    kernel_table,
    validate_c0,
    velocity_eval,
)
from .spectral_core import build_basis, divergence_projection_array, evaluate_array, project_array
from .utils import canonical_hash, get_logger

logger = get_logger(__name__)

STEP_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class SimulationContext:
    """設定から一度だけ組み立てる検証済みの物理量"""
    config: SolverConfig
    kernel: KernelTables
    a: GridField
    potential: PotentialParams
    velocity: VelocityField
    thetas: np.ndarray
    stab: float
    kq: KQReport
    fingerprint: str

    @property
    def basis(self):
        return self.config.basis

    @property
    def c0(self) -> float:
        return self.potential.c0


@dataclass(frozen=True, eq=False)
class StateTerms:
    """状態（バッチ）ごとのグリッド量と係数量"""
    phi: np.ndarray
    mu: np.ndarray
    conv: np.ndarray
    mu_hat: np.ndarray
    convection: np.ndarray
    drift: np.ndarray


def config_fingerprint(config: SolverConfig) -> str:
    """軌道とパスの系譜照合に使う設定ハッシュ"""
    basis = config.basis
    kernel = config.kernel
    payload = {
        "domain": {"dim": basis.dim, "lengths": list(basis.domain.lengths)},
        "modes": basis.m,
        "grid": list(basis.grid_shape),
        "kernel": {
            "family": kernel.family,
            "amplitude": kernel.amplitude,
            "width": kernel.width,
            "level": kernel.level,
            "table": None if kernel.table is None else canonical_hash(np.round(kernel.table, 15).tolist()),
        },
        "velocity": {"family": config.velocity.family, "amplitude": config.velocity.amplitude},
        "noise": {
            "thetas": None if config.noise.thetas is None else list(config.noise.thetas),
            "sigma2": config.noise.sigma2,
            "q": config.noise.q,
            "master_seed": config.noise.master_seed,
        },
        "T": config.T,
        "dt": config.dt,
        "stepper": config.stepper,
        "stab": config.stab,
        "blowup_threshold": config.blowup_threshold,
        "backend": config.backend,
        "linearized": config.linearized,
    }
    return canonical_hash(payload)


def step_count(T: float, dt: float) -> int:
    """
    Raises:
        ValueError: T が dt の整数倍でない場合
    """
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > STEP_TOLERANCE * max(1.0, T):
        raise ValueError(f"T={T} は dt={dt} の整数倍である必要があります")
    return steps


def with_modes(config: SolverConfig, m: int) -> SolverConfig:
    """同じ領域・パディングでモード数だけ変えた設定"""
    basis = build_basis(config.basis.domain, m, config.basis.padding)
    return replace(config, basis=basis)


def build_context(config: SolverConfig) -> SimulationContext:
    """
    カーネル表・a(x)・c0・速度場・ϑ_k・K(Q) を組み立てて仮定を検査する。

    Raises:
        AssumptionViolation: いずれかのゲートが不成立
    """
    basis = config.basis
    tables = kernel_table(config.kernel, basis)
    a = coefficient_a(tables, basis, config.backend)
    c0 = validate_c0(a)
    velocity = velocity_eval(config.velocity, basis)
    kq = validate_kq(config.noise, basis, config.probe_depth)
    if not kq.passed:
        raise AssumptionViolation(
            "trace_kq",
            f"K(Q) の二進ブロック和が減衰しません（ratio={kq.tail_ratio}）",
            {"partial_sum": kq.partial_sum, "tail_ratio": kq.tail_ratio},
        )
    thetas = thetas_for(config.noise, basis)
    stab = config.stab if config.stab is not None else float(np.max(a.values)) + 2.0
    logger.debug(f"コンテキスト: m={basis.m}, c0={c0:.6g}, S={stab:.6g}, K(Q)≈{kq.partial_sum:.6g}")
    return SimulationContext(
        config=config,
        kernel=tables,
        a=a,
        potential=PotentialParams(c0=c0),
        velocity=velocity,
        thetas=thetas,
        stab=stab,
        kq=kq,
        fingerprint=config_fingerprint(config),
    )


# ---------------------------------------------------------------------------
# ドリフト
# ---------------------------------------------------------------------------

def state_terms(ctx: SimulationContext, coeffs: np.ndarray) -> StateTerms:
    """係数 [..., m] からグリッド量・化学ポテンシャル・ドリフトを計算する"""
    basis = ctx.basis
    config = ctx.config
    phi = evaluate_array(basis, coeffs)
    mu, conv = chemical_potential_grid(phi, ctx.a.values, ctx.kernel, config.backend, config.linearized)
    mu_hat = project_array(basis, mu)
    if ctx.velocity.sup_norm > 0.0:
        convection = divergence_projection_array(basis, [phi * u for u in ctx.velocity.components])
    else:
        convection = np.zeros_like(mu_hat)
    drift = convection + (1.0 - basis.eigenvalues) * mu_hat
    return StateTerms(phi=phi, mu=mu, conv=conv, mu_hat=mu_hat, convection=convection, drift=drift)


def drift(phi: SpectralField, ctx: SimulationContext) -> SpectralField:
    """
    b(φ_m) = π_m[−div(φu)] + Δμ_m を係数で返す。

    例: Q=0, J≡2.5（単位区間）, u=0, φ=0.1·e_1 のとき b_0 = 0 で、
    b_1 = −π²·(1.5·0.1 + (φ³の射影)_1) に一致する。
    """
    return phi.with_coeffs(state_terms(ctx, phi.coeffs).drift)


def _select(terms: StateTerms, mask: np.ndarray) -> StateTerms:
    return StateTerms(
        phi=terms.phi[mask],
        mu=terms.mu[mask],
        conv=terms.conv[mask],
        mu_hat=terms.mu_hat[mask],
        convection=terms.convection[mask],
        drift=terms.drift[mask],
    )


def _sup_norms(phi: np.ndarray, dim: int) -> np.ndarray:
    axes = tuple(range(phi.ndim - dim, phi.ndim))
    with np.errstate(invalid="ignore"):
        return np.max(np.abs(phi), axis=axes)


def _em_update(ctx: SimulationContext, coeffs: np.ndarray, terms: StateTerms, dW: np.ndarray, dt: float) -> np.ndarray:
    return coeffs + dt * terms.drift + dW


def _imex_update(ctx: SimulationContext, coeffs: np.ndarray, terms: StateTerms, dW: np.ndarray, dt: float) -> np.ndarray:
    lam = ctx.stab * (ctx.basis.eigenvalues - 1.0)
    return (coeffs + dt * (terms.drift + lam * coeffs) + dW) / (1.0 + dt * lam)


_UPDATES = {"em": _em_update, "imex": _imex_update}


def _checked_step(update, phi: SpectralField, dW_n: np.ndarray, dt: float, ctx: SimulationContext) -> SpectralField:
    dW_n = np.asarray(dW_n, dtype=float)
    if dW_n.shape != (phi.basis.m,):
        raise ValueError(f"増分の形状 {dW_n.shape} が m={phi.basis.m} と一致しません")
    with np.errstate(all="ignore"):
        terms = state_terms(ctx, phi.coeffs)
        new = update(ctx, phi.coeffs, terms, dW_n, dt)
        sup = float(_sup_norms(evaluate_array(phi.basis, new), phi.basis.dim))
    if not np.all(np.isfinite(new)) or not sup <= ctx.config.blowup_threshold:
        raise BlowUpDetected(
            f"sup ノルムが上限 {ctx.config.blowup_threshold:g} を超えました: {sup:.6g}", sup
        )
    return phi.with_coeffs(new)


def step_em(phi: SpectralField, dW_n: np.ndarray, dt: float, ctx: SimulationContext) -> SpectralField:
    """
    φ^{n+1} = φ^n + dt·b(φ^n) + ΔW^n

    Raises:
        BlowUpDetected: 新しい状態の sup ノルムが上限を超えるか非有限
    """
    return _checked_step(_em_update, phi, dW_n, dt, ctx)


def step_imex(phi: SpectralField, dW_n: np.ndarray, dt: float, ctx: SimulationContext) -> SpectralField:
    """
    (1 + dt·S·(μ_k − 1)) c_k^{n+1} = c_k^n + dt·(b_k + S(μ_k − 1)c_k^n) + ΔW_k^n

    Raises:
        BlowUpDetected: 新しい状態の sup ノルムが上限を超えるか非有限
    """
    return _checked_step(_imex_update, phi, dW_n, dt, ctx)


# ---------------------------------------------------------------------------
# シミュレーション
# ---------------------------------------------------------------------------

def _initial_matrix(initial, m: int) -> np.ndarray:
    if isinstance(initial, SpectralField):
        rows = initial.coeffs[None, :]
    elif isinstance(initial, np.ndarray):
        rows = np.atleast_2d(np.asarray(initial, dtype=float))
    else:
        rows = np.stack([np.asarray(f.coeffs if isinstance(f, SpectralField) else f, dtype=float) for f in initial])
    if rows.shape[1] != m:
        raise ValueError(f"初期係数の長さ {rows.shape[1]} が m={m} と一致しません")
    return rows.copy()


def simulate_ensemble(
    config: SolverConfig,
    initial,
    path_indices: Sequence[int],
    paths: Optional[Sequence[WienerPath]] = None,
    ctx: Optional[SimulationContext] = None,
) -> list[Trajectory]:
    """
    複数パスをバッチで積分する。

    Args:
        config: ソルバー設定
        initial: 初期係数（[P × m] 配列、または SpectralField のリスト）
        path_indices: 各パスの番号
        paths: 明示的に与える Wiener パス（省略時は sample_path で生成）
        ctx: 構築済みのコンテキスト

    Returns:
        Trajectory のリスト（爆発したパスは status="blowup"）
    """
    ctx = ctx or build_context(config)
    basis = config.basis
    steps = step_count(config.T, config.dt)
    coeffs = _initial_matrix(initial, basis.m)
    n_paths = coeffs.shape[0]
    if len(path_indices) != n_paths:
        raise ValueError(f"パス番号の数 {len(path_indices)} が初期状態の数 {n_paths} と一致しません")

    if paths is None:
        paths = [sample_path(config.noise, basis, steps, config.dt, int(i)) for i in path_indices]
    for p in paths:
        if p.steps != steps or abs(p.dt - config.dt) > STEP_TOLERANCE * config.dt or p.m != basis.m:
            raise ValueError(
                f"パス {p.path_index} の (steps, dt, m)=({p.steps}, {p.dt}, {p.m}) が設定と一致しません"
            )
    increments = np.stack([p.increments for p in paths], axis=1)

    update = _UPDATES[config.stepper]
    stride = config.record_stride
    record_steps = [n for n in range(steps + 1) if n % stride == 0 or n == steps]
    records = np.empty((len(record_steps), n_paths, basis.m))
    records[0] = coeffs
    next_record = 1
    recorded = np.full(n_paths, 1)

    alive = np.ones(n_paths, dtype=bool)
    blowup_step = np.full(n_paths, -1)
    threshold = config.blowup_threshold

    with np.errstate(all="ignore"):
        for n in range(steps + 1):
            if not alive.any():
                break
            live = np.flatnonzero(alive)
            terms = state_terms(ctx, coeffs[live])
            sup = _sup_norms(terms.phi, basis.dim)
            bad = ~(np.isfinite(sup) & (sup <= threshold)) | ~np.all(np.isfinite(coeffs[live]), axis=1)
            if bad.any():
                for p, s in zip(live[bad], sup[bad]):
                    logger.warning(f"パス {path_indices[p]} がステップ {n} で爆発しました（sup={s:.3g}）")
                blowup_step[live[bad]] = n
                alive[live[bad]] = False
                # 状態 n が記録済みなら取り消す
                if record_steps[next_record - 1] == n:
                    recorded[live[bad]] -= 1
                live = live[~bad]
                terms = _select(terms, ~bad)
            if n == steps or live.size == 0:
                break
            coeffs[live] = update(ctx, coeffs[live], terms, increments[n, live], config.dt)
            if record_steps[next_record] == n + 1:
                records[next_record] = coeffs
                recorded[live] += 1
                next_record += 1

    record_times = np.asarray(record_steps, dtype=float) * config.dt
    trajectories = []
    for p in range(n_paths):
        count = int(recorded[p])
        status = "completed" if blowup_step[p] < 0 else "blowup"
        trajectories.append(Trajectory(
            times=record_times[:count],
            coeffs=records[:count, p].copy(),
            basis=basis,
            path=paths[p],
            status=status,
            blowup_step=None if blowup_step[p] < 0 else int(blowup_step[p]),
            config_hash=ctx.fingerprint,
        ))
    blown = int(np.sum(blowup_step >= 0))
    logger.debug(f"{n_paths} パスを積分しました（steps={steps}, 爆発 {blown} 件）")
    return trajectories


def simulate(
    config: SolverConfig,
    phi0: SpectralField,
    path_index: int = 0,
    path: Optional[WienerPath] = None,
    ctx: Optional[SimulationContext] = None,
) -> Trajectory:
    """
    1 パスを積分する。

    path を与えると、その増分をそのまま使う（細かいパスを粗くしたものを渡すと
    同じブラウン運動の異なる時間刻みでの近似になる）。
    """
    paths = None if path is None else [path]
    index = path_index if path is None else path.path_index
    return simulate_ensemble(config, [phi0], [index], paths=paths, ctx=ctx)[0]
