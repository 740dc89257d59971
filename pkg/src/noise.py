"""
Q-Wiener 過程の打ち切り w_m = Σ √ϑ_k β_k e_k。

乱数は numpy の SeedSequence(master_seed, spawn_key=(path_index, stream)) から
Philox ビットジェネレータを派生させ、(master_seed, path_index) だけで再現できるようにする。
stream 0 がノイズ増分、stream 1 が初期条件。
"""

import math
from typing import Sequence

import numpy as np
from scipy.integrate import quad, trapezoid

from .models import (
    BasisSpec,
    InitialConditionSpec,
    KQReport,
    NoiseSpec,
    SpectralField,
    TestFunction,
    WienerPath,
)
from .spectral_core import enumerate_modes
from .utils import get_logger

logger = get_logger(__name__)

NOISE_STREAM = 0
INITIAL_STREAM = 1
KQ_DECAY_RATIO = 0.9
HORIZON_TOLERANCE = 1e-9
TERMINAL_TOLERANCE = 1e-12


def path_generator(master_seed: int, path_index: int, stream: int = NOISE_STREAM) -> np.random.Generator:
    """(master_seed, path_index, stream) に対応するカウンタ型乱数生成器"""
    if path_index < 0:
        raise ValueError(f"path_index は非負である必要があります: {path_index}")
    seed = np.random.SeedSequence(master_seed, spawn_key=(path_index, stream))
    return np.random.Generator(np.random.Philox(seed))


def thetas_from(spec: NoiseSpec, eigenvalues: np.ndarray) -> np.ndarray:
    """
    固有値列に対応する ϑ_k を返す。

    Raises:
        ValueError: 明示リストがモード数より短い場合
    """
    m = len(eigenvalues)
    if spec.thetas is not None:
        if len(spec.thetas) < m:
            raise ValueError(f"ϑ_k の明示リスト（{len(spec.thetas)} 個）が m={m} より短いです")
        return np.asarray(spec.thetas[:m], dtype=float)
    return spec.sigma2 * np.asarray(eigenvalues, dtype=float) ** (-spec.q)


def thetas_for(spec: NoiseSpec, basis: BasisSpec) -> np.ndarray:
    return thetas_from(spec, basis.eigenvalues)


def validate_kq(spec: NoiseSpec, basis: BasisSpec, probe_depth: int = 1000) -> KQReport:
    """
    K(Q) = Σ (μ_k − 1)^{(d−1)/2} ϑ_k の部分和と二進ブロック和の減衰を調べる。

    ブロック j は 1 始まりの番号 n ∈ [2^j, 2^{j+1}) の項の和。完全な最後の2ブロックの比が
    0.9 未満（または全項が 0）なら収束とみなす。生成族ではゲート、明示リストでは参考値。
    探索は basis と同じ領域の固有値を probe_depth 個まで列挙する（m を超えてよい）。
    """
    if probe_depth < 4:
        raise ValueError(f"probe_depth は 4 以上である必要があります: {probe_depth}")
    depth = probe_depth if spec.is_generator else min(probe_depth, len(spec.thetas))
    if depth < 1:
        raise ValueError("ϑ_k の明示リストが空です")
    _, eigenvalues = enumerate_modes(basis.domain, depth)
    thetas = thetas_from(spec, eigenvalues)

    exponent = (basis.domain.dim - 1) / 2.0
    growth = (eigenvalues - 1.0) ** exponent if exponent > 0 else np.ones_like(eigenvalues)
    terms = growth * thetas

    blocks = []
    j = 0
    while 2 ** (j + 1) - 1 <= depth:
        blocks.append(float(np.sum(terms[2 ** j - 1:2 ** (j + 1) - 1])))
        j += 1

    ratio = None
    if len(blocks) < 2:
        converged = True
        logger.warning(f"K(Q) の判定に十分なブロックがありません（depth={depth}）")
    elif blocks[-2] == 0.0:
        converged = blocks[-1] == 0.0
    else:
        ratio = blocks[-1] / blocks[-2]
        converged = ratio < KQ_DECAY_RATIO

    report = KQReport(
        partial_sum=float(np.sum(terms)),
        probe_depth=depth,
        block_sums=tuple(blocks),
        tail_ratio=ratio,
        converged=converged,
        gating=spec.is_generator,
    )
    if not report.passed:
        logger.info(f"K(Q) の二進ブロック和が減衰しません: ratio={ratio}")
    elif not converged:
        logger.warning(f"K(Q) の減衰が確認できません（明示リストのため参考値）: ratio={ratio}")
    return report


# ---------------------------------------------------------------------------
# Wiener パス
# ---------------------------------------------------------------------------

def sample_path(spec: NoiseSpec, basis: BasisSpec, steps: int, dt: float, path_index: int) -> WienerPath:
    """
    ΔW^n_k = √(ϑ_k dt) ξ^n_k を生成する。

    モード k の正規乱数はストリーム内で連続した区間を占めるので、
    同じ (master_seed, path_index, steps) なら m を変えても先頭モードの増分は一致する。
    """
    if steps < 1:
        raise ValueError(f"steps は 1 以上である必要があります: {steps}")
    if not dt > 0:
        raise ValueError(f"dt は正である必要があります: {dt}")
    thetas = thetas_for(spec, basis)
    rng = path_generator(spec.master_seed, path_index, NOISE_STREAM)
    normals = rng.standard_normal((basis.m, steps)).T
    increments = normals * np.sqrt(thetas * dt)
    return WienerPath(increments=increments, dt=float(dt), master_seed=spec.master_seed, path_index=path_index)


def coarsen_path(path: WienerPath, factor: int) -> WienerPath:
    """連続する factor 個の増分を合算して刻み幅 factor·dt のパスを作る"""
    if factor < 1 or path.steps % factor != 0:
        raise ValueError(f"steps={path.steps} は factor={factor} で割り切れる必要があります")
    coarse = path.increments.reshape(path.steps // factor, factor, path.m).sum(axis=1)
    return WienerPath(
        increments=coarse,
        dt=path.dt * factor,
        master_seed=path.master_seed,
        path_index=path.path_index,
    )


def path_cumsum(path: WienerPath) -> np.ndarray:
    """w_m(t_n) の係数 [(steps+1) × m]、w(0) = 0"""
    return np.vstack([np.zeros((1, path.m)), np.cumsum(path.increments, axis=0)])


def _check_pairing(path: WienerPath, v: TestFunction) -> None:
    if v.mode >= path.m:
        raise ValueError(f"テスト関数のモード {v.mode} がパスのモード数 {path.m} を超えています")
    if abs(float(v.g(v.T))) > TERMINAL_TOLERANCE:
        raise ValueError("g(T) ≠ 0 のテスト関数は白色ノイズ対に使えません")
    if abs(v.T - path.horizon) > HORIZON_TOLERANCE * max(1.0, path.horizon):
        raise ValueError(f"テスト関数の終端 T={v.T} がパスの時間幅 {path.horizon} と一致しません")


def white_noise_pairing(path: WienerPath, v: TestFunction) -> float:
    """
    ⟨∂w/∂t, v⟩ = −∫_0^T (w_k(t), g′(t)) dt（台形則）。
    """
    _check_pairing(path, v)
    times = np.arange(path.steps + 1) * path.dt
    w = path_cumsum(path)[:, v.mode]
    return float(-trapezoid(w * np.asarray(v.dg(times), dtype=float), times))


def ito_pairing(path: WienerPath, v: TestFunction) -> float:
    """左端点の伊藤和 Σ_n g(t_n) ΔW^n_k（部分積分と O(dt) で一致する）"""
    _check_pairing(path, v)
    times = np.arange(path.steps) * path.dt
    return float(np.sum(np.asarray(v.g(times), dtype=float) * path.increments[:, v.mode]))


def wiener_char_functional(v: TestFunction, spec: NoiseSpec, basis: BasisSpec) -> complex:
    """
    Ŵ(−∂v/∂t) = exp(−½ ϑ_k ∫_0^T g(t)² dt)。

    Raises:
        TypeError: 分離型でないテスト関数
    """
    if not isinstance(v, TestFunction):
        raise TypeError("分離型 g(t) e_k(x) 以外のテスト関数には対応していません")
    if v.mode >= basis.m:
        raise ValueError(f"テスト関数のモード {v.mode} が m={basis.m} を超えています")
    theta = float(thetas_for(spec, basis)[v.mode])
    integral, _ = quad(lambda t: float(v.g(t)) ** 2, 0.0, v.T)
    return complex(math.exp(-0.5 * theta * integral))


# ---------------------------------------------------------------------------
# 初期条件
# ---------------------------------------------------------------------------

def _padded(values: Sequence[float], m: int) -> np.ndarray:
    out = np.zeros(m)
    n = min(m, len(values))
    out[:n] = np.asarray(values[:n], dtype=float)
    return out


def sample_initial(
    ic: InitialConditionSpec, basis: BasisSpec, master_seed: int, path_index: int
) -> SpectralField:
    """φ₀ を (master_seed, path_index) の初期条件ストリームから生成する"""
    mean = _padded(ic.mean, basis.m)
    if ic.kind == "deterministic":
        return SpectralField(coeffs=mean, basis=basis)
    std = np.sqrt(_padded(ic.variance, basis.m))
    rng = path_generator(master_seed, path_index, INITIAL_STREAM)
    return SpectralField(coeffs=mean + std * rng.standard_normal(basis.m), basis=basis)


def initial_char_functional(ic: InitialConditionSpec, xi: SpectralField) -> complex:
    """
    Ξ̂(ξ) = E exp(i⟨φ₀, ξ⟩)。決定論的なら exp(i⟨mean, ξ⟩)、
    ガウスなら exp(i⟨mean, ξ⟩ − ½ Σ var_k ξ_k²)。
    """
    m = xi.basis.m
    mean = _padded(ic.mean, m)
    phase = float(mean @ xi.coeffs)
    if ic.kind == "deterministic":
        return complex(np.exp(1j * phase))
    variance = _padded(ic.variance, m)
    return complex(np.exp(1j * phase - 0.5 * float(variance @ xi.coeffs ** 2)))
