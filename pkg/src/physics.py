"""
物理項: 非局所カーネル J、畳み込み J∗φ、a(x) = (J∗1)(x)、二重井戸ポテンシャル、
化学ポテンシャル μ = aφ − J∗φ + F′(φ)、速度場 u。

畳み込みは差分グリッド上の表 J(x_i − x_j) との離散畳み込みで、
direct（scipy.signal.convolve）と fft_padded（scipy.signal.fftconvolve）の2経路を持つ。
"""

from typing import Optional

import numpy as np
from scipy.signal import convolve as signal_convolve
from scipy.signal import fftconvolve

from .models import (
    AssumptionViolation,
    BasisSpec,
    GridField,
    KernelSpec,
    KernelTables,
    SpectralField,
    VelocityField,
    VelocitySpec,
)
from .spectral_core import evaluate_array, project_array
from .utils import get_logger

logger = get_logger(__name__)

NORM_REFINEMENT = 4
SYMMETRY_TOLERANCE = 1e-12
C0_RELATIVE_TOLERANCE = 1e-10
VELOCITY_TOLERANCE = 1e-8


# ---------------------------------------------------------------------------
# カーネル
# ---------------------------------------------------------------------------

def kernel_values(spec: KernelSpec, offsets: tuple[np.ndarray, ...]) -> np.ndarray:
    """
    解析族の J をメッシュ offsets 上で評価する。

    Raises:
        ValueError: table 族（解析式を持たない）の場合
    """
    if spec.family == "gaussian":
        r2 = sum(x ** 2 for x in offsets)
        return spec.amplitude * np.exp(-r2 / (2.0 * spec.width ** 2))
    if spec.family == "constant":
        return np.full(np.broadcast(*offsets).shape, float(spec.level))
    raise ValueError(f"{spec.family} 族は解析的に評価できません")


def kernel_gradient(spec: KernelSpec, offsets: tuple[np.ndarray, ...]) -> tuple[np.ndarray, ...]:
    """解析族の ∇J"""
    if spec.family == "gaussian":
        values = kernel_values(spec, offsets)
        return tuple(-x / spec.width ** 2 * values for x in offsets)
    if spec.family == "constant":
        shape = np.broadcast(*offsets).shape
        return tuple(np.zeros(shape) for _ in offsets)
    raise ValueError(f"{spec.family} 族は解析的に評価できません")


def difference_offsets(basis: BasisSpec) -> tuple[np.ndarray, ...]:
    """差分 n·h_i（n = −(N_i−1)..(N_i−1)）の 1 次元配列"""
    return tuple(
        np.arange(-(n - 1), n) * h for n, h in zip(basis.grid_shape, basis.spacing)
    )


def _refined_l1_norms(spec: KernelSpec, basis: BasisSpec) -> tuple[float, float]:
    """[−L, L]^d 上の細分中点則による ‖J‖_{L¹}, ‖∇J‖_{L¹}"""
    axes = []
    for n, L in zip(basis.grid_shape, basis.domain.lengths):
        cells = 2 * n * NORM_REFINEMENT
        width = 2.0 * L / cells
        axes.append(-L + (np.arange(cells) + 0.5) * width)
    mesh = np.meshgrid(*axes, indexing="ij")
    volume = float(np.prod([2.0 * L / len(x) for x, L in zip(axes, basis.domain.lengths)]))
    values = kernel_values(spec, tuple(mesh))
    grads = kernel_gradient(spec, tuple(mesh))
    grad_mag = np.sqrt(sum(g ** 2 for g in grads))
    return float(np.sum(np.abs(values)) * volume), float(np.sum(grad_mag) * volume)


def _symmetrize_table(spec: KernelSpec, basis: BasisSpec) -> np.ndarray:
    expected = tuple(2 * n - 1 for n in basis.grid_shape)
    table = np.asarray(spec.table, dtype=float)
    if table.shape != expected:
        raise ValueError(
            f"カーネル表の形状 {table.shape} が差分グリッド {expected} と一致しません"
        )
    if not np.all(np.isfinite(table)):
        raise ValueError("カーネル表に非有限値が含まれています")
    mirrored = np.flip(table)
    asymmetry = float(np.max(np.abs(table - mirrored)))
    if asymmetry > SYMMETRY_TOLERANCE * max(1.0, float(np.max(np.abs(table)))):
        logger.warning(f"カーネル表が偶関数ではないため対称化します（非対称度 {asymmetry:.3e}）")
    return 0.5 * (table + mirrored)


def kernel_table(spec: KernelSpec, basis: BasisSpec) -> KernelTables:
    """
    差分グリッド上の J と ∇J を表にし、L¹ ノルムを推定する。

    Raises:
        ValueError: 表の形状・値が不正な場合
    """
    offsets = difference_offsets(basis)
    mesh = tuple(np.meshgrid(*offsets, indexing="ij"))
    if spec.family == "table":
        values = _symmetrize_table(spec, basis)
        gradient = tuple(
            np.gradient(values, h, axis=i) if values.shape[i] > 1 else np.zeros_like(values)
            for i, h in enumerate(basis.spacing)
        )
        l1 = float(np.sum(np.abs(values)) * basis.cell_volume)
        grad_l1 = float(np.sum(np.sqrt(sum(g ** 2 for g in gradient))) * basis.cell_volume)
    else:
        values = kernel_values(spec, mesh)
        gradient = kernel_gradient(spec, mesh)
        l1, grad_l1 = _refined_l1_norms(spec, basis)

    logger.debug(f"カーネル表を作成しました: family={spec.family}, ‖J‖₁={l1:.6g}, ‖∇J‖₁={grad_l1:.6g}")
    return KernelTables(basis=basis, values=values, gradient=gradient, l1_norm=l1, grad_l1_norm=grad_l1)


# ---------------------------------------------------------------------------
# 畳み込み
# ---------------------------------------------------------------------------

def convolve_array(tables: KernelTables, values: np.ndarray, backend: str = "fft_padded") -> np.ndarray:
    """
    (J∗φ)(x_i) = h^d Σ_j J(x_i − x_j) φ(x_j) を末尾 d 軸について計算する。

    Raises:
        ValueError: 形状不一致または未知のバックエンド
    """
    basis = tables.basis
    d = basis.dim
    values = np.asarray(values, dtype=float)
    if values.shape[values.ndim - d:] != basis.grid_shape:
        raise ValueError(f"グリッド形状 {values.shape[-d:]} が {basis.grid_shape} と一致しません")
    expected = tuple(2 * n - 1 for n in basis.grid_shape)
    if tables.values.shape != expected:
        raise ValueError(f"カーネル表の形状 {tables.values.shape} が {expected} と一致しません")

    window = tuple(slice(n - 1, 2 * n - 1) for n in basis.grid_shape)
    batch_shape = values.shape[:values.ndim - d]

    if backend == "fft_padded":
        kernel = tables.values.reshape((1,) * len(batch_shape) + expected)
        axes = tuple(range(len(batch_shape), values.ndim))
        full = fftconvolve(values, kernel, mode="full", axes=axes)
        return basis.cell_volume * full[(Ellipsis,) + window]
    if backend == "direct":
        flat = values.reshape((-1,) + basis.grid_shape)
        out = np.empty_like(flat)
        for b in range(flat.shape[0]):
            full = signal_convolve(flat[b], tables.values, mode="full", method="direct")
            out[b] = basis.cell_volume * full[window]
        return out.reshape(values.shape)
    raise ValueError(f"未対応の畳み込みバックエンドです: {backend}")


def convolve(tables: KernelTables, phi: GridField, backend: str = "fft_padded") -> GridField:
    """J∗φ（グリッド値）"""
    return GridField(values=convolve_array(tables, phi.values, backend), basis=phi.basis)


def coefficient_a(tables: KernelTables, basis: BasisSpec, backend: str = "fft_padded") -> GridField:
    """
    a(x) = (J∗1)(x)。

    Raises:
        AssumptionViolation: min a < 0
    """
    values = convolve_array(tables, np.ones(basis.grid_shape), backend)
    min_a = float(values.min())
    if min_a < -C0_RELATIVE_TOLERANCE * max(1.0, float(np.max(np.abs(values)))):
        raise AssumptionViolation(
            "a_nonnegative",
            f"a(x) = (J∗1)(x) が負になっています: min a = {min_a:.6g}",
            {"min_a": min_a},
        )
    return GridField(values=values, basis=basis)


# ---------------------------------------------------------------------------
# ポテンシャル
# ---------------------------------------------------------------------------

def potential_eval(s, order: int):
    """
    F(s) = s⁴/4 − s²/2 とその導関数。order ∈ {0, 1, 2}。

    例: order=1, s=1 → 0;  order=2, s=0 → −1
    """
    s = np.asarray(s, dtype=float)
    if order == 0:
        result = 0.25 * s ** 4 - 0.5 * s ** 2
    elif order == 1:
        result = s ** 3 - s
    elif order == 2:
        result = 3.0 * s ** 2 - 1.0
    else:
        raise ValueError(f"order は 0, 1, 2 のいずれかである必要があります: {order}")
    return float(result) if result.ndim == 0 else result


def validate_c0(a: GridField) -> float:
    """
    c0 = min_x (a(x) + F″(s)) の s についての下限 = min a − 1 を返す。

    Raises:
        AssumptionViolation: c0 ≤ 0
    """
    min_a = float(np.min(a.values))
    c0 = min_a - 1.0
    if c0 <= C0_RELATIVE_TOLERANCE * max(1.0, abs(min_a)):
        raise AssumptionViolation(
            "c0_positive",
            f"c0 nonpositive: min a − 1 = {c0:.6g}（a(x) + F″(s) ≥ c0 > 0 が成り立ちません）",
            {"c0": c0, "min_a": min_a},
        )
    return c0


def chemical_potential_grid(
    phi_values: np.ndarray,
    a_values: np.ndarray,
    tables: KernelTables,
    backend: str = "fft_padded",
    linearized: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """グリッド上の (μ, J∗φ)。linearized なら φ³ を落とす"""
    conv = convolve_array(tables, phi_values, backend)
    cubic = 0.0 if linearized else phi_values ** 3
    mu = a_values * phi_values - conv + cubic - phi_values
    return mu, conv


def chemical_potential(
    phi: SpectralField,
    tables: KernelTables,
    a: GridField,
    backend: str = "fft_padded",
    linearized: bool = False,
) -> tuple[GridField, SpectralField]:
    """
    μ = aφ − J∗φ + F′(φ) のグリッド値と、その射影 μ_m = π_m μ を返す。
    """
    basis = phi.basis
    phi_values = evaluate_array(basis, phi.coeffs)
    mu, _ = chemical_potential_grid(phi_values, a.values, tables, backend, linearized)
    return GridField(values=mu, basis=basis), SpectralField(coeffs=project_array(basis, mu), basis=basis)


# ---------------------------------------------------------------------------
# 速度場
# ---------------------------------------------------------------------------

def stream_vortex_components(
    spec: VelocitySpec, lengths: tuple[float, ...], x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    流れ関数 ψ = A sin²(πx/L₁) sin²(πy/L₂) から u = (∂ψ/∂y, −∂ψ/∂x) を計算する。
    """
    L1, L2 = lengths
    A = spec.amplitude
    u1 = A * (np.pi / L2) * np.sin(np.pi * x / L1) ** 2 * np.sin(2.0 * np.pi * y / L2)
    u2 = -A * (np.pi / L1) * np.sin(2.0 * np.pi * x / L1) * np.sin(np.pi * y / L2) ** 2
    return u1, u2


def stream_vortex_divergence(
    spec: VelocitySpec, lengths: tuple[float, ...], x: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """∂₁u₁ + ∂₂u₂ を解析的に評価する（グリッドの解像度に依存しない）"""
    L1, L2 = lengths
    A = spec.amplitude
    du1_dx = A * (np.pi / L2) * (np.pi / L1) * np.sin(2.0 * np.pi * x / L1) * np.sin(2.0 * np.pi * y / L2)
    du2_dy = -A * (np.pi / L1) * np.sin(2.0 * np.pi * x / L1) * (np.pi / L2) * np.sin(2.0 * np.pi * y / L2)
    return du1_dx + du2_dy


def _boundary_trace(spec: VelocitySpec, basis: BasisSpec) -> float:
    """各面上での |u| の最大値"""
    lengths = basis.domain.lengths
    x_nodes, y_nodes = basis.nodes
    trace = 0.0
    for x_face in (0.0, lengths[0]):
        u1, u2 = stream_vortex_components(spec, lengths, np.full_like(y_nodes, x_face), y_nodes)
        trace = max(trace, float(np.max(np.hypot(u1, u2))))
    for y_face in (0.0, lengths[1]):
        u1, u2 = stream_vortex_components(spec, lengths, x_nodes, np.full_like(x_nodes, y_face))
        trace = max(trace, float(np.max(np.hypot(u1, u2))))
    return trace


def velocity_eval(spec: VelocitySpec, basis: BasisSpec) -> VelocityField:
    """
    速度場をグリッド上で評価し、発散と境界トレースを検査する。

    Raises:
        ValueError: stream_vortex を dim ≠ 2 で指定した場合
        AssumptionViolation: 発散または境界トレースが 1e-8 · ‖u‖∞ を超える場合
    """
    if spec.family == "zero":
        components = tuple(np.zeros(basis.grid_shape) for _ in range(basis.dim))
        return VelocityField(components=components, sup_norm=0.0, max_divergence=0.0, boundary_trace=0.0)

    if basis.dim != 2:
        raise ValueError(f"stream_vortex は dim=2 でのみ利用できます（dim={basis.dim}）")

    x, y = np.meshgrid(*basis.nodes, indexing="ij")
    u1, u2 = stream_vortex_components(spec, basis.domain.lengths, x, y)
    sup_norm = float(np.max(np.hypot(u1, u2)))
    divergence = stream_vortex_divergence(spec, basis.domain.lengths, x, y)
    max_div = float(np.max(np.abs(divergence)))
    trace = _boundary_trace(spec, basis)

    tolerance = VELOCITY_TOLERANCE * max(sup_norm, 1e-300)
    if max_div > tolerance:
        raise AssumptionViolation(
            "velocity_divergence",
            f"速度場の発散が許容値を超えています: max|div u| = {max_div:.3e}",
            {"max_divergence": max_div, "sup_norm": sup_norm},
        )
    if trace > tolerance:
        raise AssumptionViolation(
            "velocity_boundary",
            f"速度場の境界トレースが 0 ではありません: max|u|_∂D = {trace:.3e}",
            {"boundary_trace": trace, "sup_norm": sup_norm},
        )
    logger.debug(f"速度場: ‖u‖∞={sup_norm:.6g}, max|div u|={max_div:.3e}, 境界={trace:.3e}")
    return VelocityField(
        components=(u1, u2), sup_norm=sup_norm, max_divergence=max_div, boundary_trace=trace
    )


def gronwall_rate(grad_kernel_l1: float, velocity_sup: float, c0: float) -> float:
    """
    K = (2‖∇J‖²_{L¹} + ‖u‖²_∞) / c0。

    Raises:
        ValueError: c0 ≤ 0
    """
    if not c0 > 0:
        raise ValueError(f"c0 は正である必要があります: {c0}")
    return (2.0 * grad_kernel_l1 ** 2 + velocity_sup ** 2) / c0


def young_bound(tables: KernelTables, phi_values: np.ndarray, backend: str = "fft_padded") -> tuple[float, float]:
    """(‖J∗φ‖_h, ‖J‖_{L¹}‖φ‖_h) を返す"""
    basis = tables.basis
    conv = convolve_array(tables, phi_values, backend)
    lhs = float(np.sqrt(basis.cell_volume * np.sum(conv ** 2)))
    rhs = tables.l1_norm * float(np.sqrt(basis.cell_volume * np.sum(np.asarray(phi_values) ** 2)))
    return lhs, rhs


def kernel_summary(tables: KernelTables, a: Optional[GridField] = None) -> dict:
    summary = {"l1_norm": tables.l1_norm, "grad_l1_norm": tables.grad_l1_norm}
    if a is not None:
        summary.update({"min_a": float(a.values.min()), "max_a": float(a.values.max())})
    return summary
