"""
スペクトル基底と求積グリッド。

−Δ + I（斉次ノイマン境界）の固有関数 e_k は各軸の余弦の積なので、
係数 ↔ セル中心グリッドの変換は scipy.fft の DCT/DST（type 2/3）で行える。
パディング係数 2 のグリッドでは、三次項の射影と φ⁴ の求積が丸め誤差を除いて厳密になる。

配列版の関数（*_array）は末尾の次元をモード軸・グリッド軸とし、先頭にバッチ次元を持てる。
"""

import math
from typing import Optional, Sequence

import numpy as np
from scipy.fft import dct, dst
from scipy.spatial.distance import pdist

from .models import BasisSpec, BasisTooLarge, Domain, GridField, SpectralField, Trajectory
from .utils import get_logger

logger = get_logger(__name__)

DEFAULT_MAX_GRID_POINTS = 1 << 22
HOLDER_MAX_SAMPLES = 512
EIGENVALUE_DECIMALS = 10


# ---------------------------------------------------------------------------
# 基底の構築
# ---------------------------------------------------------------------------

def enumerate_modes(domain: Domain, m: int) -> tuple[np.ndarray, np.ndarray]:
    """
    μ_k の昇順（同値は多重指数の辞書順）に先頭 m 個のモードを列挙する。

    Returns:
        (modes [m × dim] の int 配列, eigenvalues [m])
    """
    if m < 1:
        raise ValueError(f"モード数 m は 1 以上である必要があります: {m}")

    lengths = np.asarray(domain.lengths)
    radius2 = (np.pi / lengths.max()) ** 2
    while True:
        kmax = np.floor(np.sqrt(radius2) * lengths / np.pi).astype(int)
        axes = [np.arange(k + 1) for k in kmax]
        candidates = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
        lam = np.sum((candidates * np.pi / lengths) ** 2, axis=1)
        inside = lam <= radius2 * (1.0 + 1e-12)
        if int(inside.sum()) >= m:
            break
        radius2 *= 2.0

    candidates = candidates[inside]
    eigenvalues = 1.0 + np.sum((candidates * np.pi / lengths) ** 2, axis=1)
    keys = tuple(candidates[:, i] for i in reversed(range(domain.dim)))
    order = np.lexsort(keys + (np.round(eigenvalues, EIGENVALUE_DECIMALS),))[:m]
    return candidates[order].astype(int), eigenvalues[order]


def build_basis(
    domain: Domain,
    m: int,
    padding: float = 2.0,
    max_grid_points: int = DEFAULT_MAX_GRID_POINTS,
) -> BasisSpec:
    """
    先頭 m 個の固有対とセル中心求積グリッドを構築する。

    Args:
        domain: 領域
        m: モード数
        padding: 軸ごとのグリッド点数 N_i = ceil(padding · (max k_i + 1))
        max_grid_points: グリッド総点数の上限

    Returns:
        BasisSpec

    Raises:
        ValueError: m < 1 または padding < 1
        BasisTooLarge: グリッドが上限を超える場合
    """
    if padding < 1:
        raise ValueError(f"padding は 1 以上である必要があります: {padding}")
    modes, eigenvalues = enumerate_modes(domain, m)
    kmax = modes.max(axis=0)
    grid_shape = tuple(int(math.ceil(padding * (k + 1))) for k in kmax)
    total = int(np.prod(grid_shape))
    if total > max_grid_points:
        raise BasisTooLarge(
            f"求積グリッド {grid_shape}（{total} 点）が上限 {max_grid_points} を超えています"
        )
    nodes = tuple(
        (np.arange(n) + 0.5) * L / n for n, L in zip(grid_shape, domain.lengths)
    )
    logger.debug(f"基底を構築しました: m={m}, grid={grid_shape}, μ_max={eigenvalues[-1]:.4g}")
    return BasisSpec(
        domain=domain,
        modes=modes,
        eigenvalues=eigenvalues,
        grid_shape=grid_shape,
        nodes=nodes,
        padding=float(padding),
    )


def eigenvalue(basis: BasisSpec, index: int) -> float:
    """
    Raises:
        IndexError: index が 0..m−1 の範囲外
    """
    if not 0 <= index < basis.m:
        raise IndexError(f"モード位置 {index} は 0..{basis.m - 1} の範囲外です")
    return float(basis.eigenvalues[index])


# ---------------------------------------------------------------------------
# 1 軸変換（末尾 d 軸に作用）
# ---------------------------------------------------------------------------

def _axis_slice(ndim: int, axis: int, sl: slice) -> tuple:
    index = [slice(None)] * ndim
    index[axis] = sl
    return tuple(index)


def _axis_shape(ndim: int, axis: int, n: int) -> tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def _synthesize(dense: np.ndarray, kinds: Sequence[str]) -> np.ndarray:
    """
    各軸について Σ_k a_k cos(πk(2j+1)/2N) または Σ_{k≥1} a_k sin(πk(2j+1)/2N) を計算する。
    """
    out = np.asarray(dense, dtype=float)
    d = len(kinds)
    for i, kind in enumerate(kinds):
        axis = out.ndim - d + i
        n = out.shape[axis]
        if kind == "cos":
            scale = np.full(n, 0.5)
            scale[0] = 1.0
            out = dct(out * scale.reshape(_axis_shape(out.ndim, axis, n)), type=3, axis=axis)
        else:
            shifted = np.zeros_like(out)
            shifted[_axis_slice(out.ndim, axis, slice(0, n - 1))] = 0.5 * out[
                _axis_slice(out.ndim, axis, slice(1, n))
            ]
            out = dst(shifted, type=3, axis=axis)
    return out


def _analyze(values: np.ndarray, kinds: Sequence[str]) -> np.ndarray:
    """_synthesize の転置: 各軸について Σ_j v_j cos(...) または Σ_j v_j sin(...) を計算する"""
    out = np.asarray(values, dtype=float)
    d = len(kinds)
    for i, kind in enumerate(kinds):
        axis = out.ndim - d + i
        n = out.shape[axis]
        if kind == "cos":
            out = 0.5 * dct(out, type=2, axis=axis)
        else:
            sine = 0.5 * dst(out, type=2, axis=axis)
            shifted = np.zeros_like(out)
            shifted[_axis_slice(out.ndim, axis, slice(1, n))] = sine[
                _axis_slice(out.ndim, axis, slice(0, n - 1))
            ]
            out = shifted
    return out


def _scatter(basis: BasisSpec, amplitudes: np.ndarray) -> np.ndarray:
    dense = np.zeros(amplitudes.shape[:-1] + basis.grid_shape)
    dense[(Ellipsis,) + basis.dense_index] = amplitudes
    return dense


def _check_grid(basis: BasisSpec, values: np.ndarray) -> None:
    if values.shape[values.ndim - basis.dim:] != basis.grid_shape:
        raise ValueError(
            f"グリッド形状 {values.shape[-basis.dim:]} が {basis.grid_shape} と一致しません"
        )


# ---------------------------------------------------------------------------
# 係数 ↔ グリッド
# ---------------------------------------------------------------------------

def evaluate_array(basis: BasisSpec, coeffs: np.ndarray) -> np.ndarray:
    """係数 [..., m] をグリッド値 [..., *grid] に変換する"""
    coeffs = np.asarray(coeffs, dtype=float)
    dense = _scatter(basis, coeffs * basis.mode_weight)
    return _synthesize(dense, ("cos",) * basis.dim)


def project_array(basis: BasisSpec, values: np.ndarray) -> np.ndarray:
    """グリッド値 [..., *grid] の離散 L² 射影係数 (v, e_k)_h を返す"""
    values = np.asarray(values, dtype=float)
    _check_grid(basis, values)
    analysis = _analyze(values, ("cos",) * basis.dim)
    return basis.cell_volume * basis.mode_weight * analysis[(Ellipsis,) + basis.dense_index]


def gradient_array(basis: BasisSpec, coeffs: np.ndarray) -> list[np.ndarray]:
    """∇φ_m の各成分をグリッド上で返す"""
    coeffs = np.asarray(coeffs, dtype=float)
    components = []
    for i in range(basis.dim):
        amplitudes = -coeffs * basis.mode_weight * basis.wavenumbers[:, i]
        kinds = tuple("sin" if j == i else "cos" for j in range(basis.dim))
        components.append(_synthesize(_scatter(basis, amplitudes), kinds))
    return components


def divergence_projection_array(basis: BasisSpec, fields: Sequence[np.ndarray]) -> np.ndarray:
    """
    Σ_i (f_i, ∂_i e_k)_h を返す。

    f が φu のとき −(div(φu), e_k) の保存形に相当し、k=0 成分は厳密に 0 になる。
    """
    if len(fields) != basis.dim:
        raise ValueError(f"成分数 {len(fields)} が dim={basis.dim} と一致しません")
    total = None
    for i, f in enumerate(fields):
        f = np.asarray(f, dtype=float)
        _check_grid(basis, f)
        kinds = tuple("sin" if j == i else "cos" for j in range(basis.dim))
        analysis = _analyze(f, kinds)[(Ellipsis,) + basis.dense_index]
        term = -basis.cell_volume * basis.mode_weight * basis.wavenumbers[:, i] * analysis
        total = term if total is None else total + term
    return total


def integrate(basis: BasisSpec, values: np.ndarray) -> np.ndarray:
    """中点則による ∫_D v dx（末尾 d 軸について和をとる）"""
    values = np.asarray(values, dtype=float)
    _check_grid(basis, values)
    axes = tuple(range(values.ndim - basis.dim, values.ndim))
    return basis.cell_volume * np.sum(values, axis=axes)


def basis_grid_values(basis: BasisSpec) -> np.ndarray:
    """全固有関数のグリッド値 [m, *grid]"""
    return evaluate_array(basis, np.eye(basis.m))


# ---------------------------------------------------------------------------
# SpectralField / GridField 版の公開操作
# ---------------------------------------------------------------------------

def evaluate(field: SpectralField) -> GridField:
    """
    φ_m をグリッド上で評価する。

    例: dim=1, L=1, m=2, c=(0,1) → 値は √2 cos(π x_j)
    """
    return GridField(values=evaluate_array(field.basis, field.coeffs), basis=field.basis)


def project(values: GridField, m: Optional[int] = None) -> SpectralField:
    """
    離散 L² 射影 π_m。m を与えると先頭 m 個以外の係数を 0 にした同じ基底上の場を返す。

    Raises:
        ValueError: m が basis.m を超える場合
    """
    basis = values.basis
    coeffs = project_array(basis, values.values)
    if m is not None:
        if not 0 <= m <= basis.m:
            raise ValueError(f"射影先のモード数 {m} が basis.m={basis.m} を超えています")
        coeffs[m:] = 0.0
    return SpectralField(coeffs=coeffs, basis=basis)


def truncate(field: SpectralField, r: int) -> SpectralField:
    """π_r: k ≥ r の係数を 0 にする"""
    if not 0 <= r <= field.basis.m:
        raise ValueError(f"r={r} は 0..{field.basis.m} の範囲である必要があります")
    coeffs = field.coeffs.copy()
    coeffs[r:] = 0.0
    return field.with_coeffs(coeffs)


def gradient_evaluate(field: SpectralField) -> list[GridField]:
    """∇φ_m の各成分（グリッド値）"""
    return [GridField(values=g, basis=field.basis) for g in gradient_array(field.basis, field.coeffs)]


def laplacian(field: SpectralField) -> SpectralField:
    """Δφ_m = Σ (1 − μ_k) c_k e_k"""
    return field.with_coeffs((1.0 - field.basis.eigenvalues) * field.coeffs)


def apply_operator_a(field: SpectralField) -> SpectralField:
    """A φ_m = (−Δ + I) φ_m = Σ μ_k c_k e_k"""
    return field.with_coeffs(field.basis.eigenvalues * field.coeffs)


def basis_values_at(basis: BasisSpec, points: np.ndarray) -> np.ndarray:
    """任意点 [P × dim] における e_k の値 [P × m]"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != basis.dim:
        raise ValueError(f"点の次元 {points.shape[1]} が dim={basis.dim} と一致しません")
    phases = points[:, None, :] * basis.wavenumbers[None, :, :]
    return np.prod(np.cos(phases), axis=2) * basis.mode_weight


def evaluate_points(field: SpectralField, points: np.ndarray) -> np.ndarray:
    """直接和による任意点での評価（参照経路）"""
    return basis_values_at(field.basis, points) @ field.coeffs


def grid_points(basis: BasisSpec) -> np.ndarray:
    """グリッド節点を [N_total × dim] で返す（C 順）"""
    mesh = np.meshgrid(*basis.nodes, indexing="ij")
    return np.stack([x.ravel() for x in mesh], axis=1)


def evaluate_direct(field: SpectralField) -> GridField:
    """グリッド上の直接和評価（高速変換の検証用参照経路）"""
    values = evaluate_points(field, grid_points(field.basis)).reshape(field.basis.grid_shape)
    return GridField(values=values, basis=field.basis)


# ---------------------------------------------------------------------------
# ノルム
# ---------------------------------------------------------------------------

def _check_order(s: float) -> None:
    if not -2.0 <= s <= 2.0:
        raise ValueError(f"ソボレフ指数 s は [−2, 2] の範囲である必要があります: {s}")


def sobolev_norm_array(basis: BasisSpec, coeffs: np.ndarray, s: float) -> np.ndarray:
    _check_order(s)
    return np.sqrt(np.sum(basis.eigenvalues ** s * np.asarray(coeffs) ** 2, axis=-1))


def sobolev_norm(field: SpectralField, s: float) -> float:
    """
    ‖φ‖_s = √(Σ μ_k^s c_k²)。s=0 は H、s=1 は U、s=−1 は U′、s=−2 は V′。

    Raises:
        ValueError: s ∉ [−2, 2]
    """
    return float(sobolev_norm_array(field.basis, field.coeffs, s))


def sobolev_inner(a: SpectralField, b: SpectralField, s: float = 0.0) -> float:
    _check_order(s)
    if a.basis.m != b.basis.m:
        raise ValueError("異なる基底上の場の内積は定義されません")
    return float(np.sum(a.basis.eigenvalues ** s * a.coeffs * b.coeffs))


def l4_norm(field: SpectralField) -> float:
    """求積による ‖φ‖_{L⁴}"""
    values = evaluate_array(field.basis, field.coeffs)
    return float(integrate(field.basis, values ** 4) ** 0.25)


def sup_norm_grid(field: SpectralField) -> float:
    return float(np.max(np.abs(evaluate_array(field.basis, field.coeffs))))


def sup_norm_growth_constant(basis: BasisSpec) -> float:
    """
    max_{k≥1} sup|e_k| / (μ_k − 1)^{(d−1)/4} のグリッド上の実測値。
    """
    if basis.m < 2:
        return 0.0
    values = basis_grid_values(basis)[1:]
    axes = tuple(range(1, values.ndim))
    sup = np.max(np.abs(values), axis=axes)
    growth = (basis.eigenvalues[1:] - 1.0) ** ((basis.dim - 1) / 4.0)
    return float(np.max(sup / growth))


def holder_seminorm(
    trajectory: Trajectory,
    beta: float,
    s: float,
    max_samples: int = HOLDER_MAX_SAMPLES,
) -> float:
    """
    [φ]_{C^β(H^s)} = sup_{t≠t'} ‖φ(t) − φ(t')‖_s / |t − t'|^β を記録時刻上で計算する。

    サンプル数が max_samples を超える場合は等間隔に間引く（終端は常に含める）。

    Raises:
        ValueError: 記録が 2 点未満、または β ∉ (0, 1)
    """
    _check_order(s)
    if not 0.0 < beta < 1.0:
        raise ValueError(f"β は (0, 1) の範囲である必要があります: {beta}")
    n = len(trajectory.times)
    if n < 2:
        raise ValueError("ヘルダー半ノルムには 2 点以上の記録が必要です")

    stride = max(1, math.ceil(n / max_samples))
    index = np.arange(0, n, stride)
    if index[-1] != n - 1:
        index = np.append(index, n - 1)

    scaled = trajectory.coeffs[index] * np.sqrt(trajectory.basis.eigenvalues ** s)
    distances = pdist(scaled)
    gaps = pdist(trajectory.times[index][:, None])
    return float(np.max(distances / gaps ** beta))
