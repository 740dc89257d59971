"""
共通データクラス定義

スペクトル・ガラーキン近似（−Δ+I のノイマン固有基底）上の状態・ノイズ・
カーネル・軌道・検証レポートを表す値オブジェクトと、ハーネス全体で使う例外階層。
配列を保持する型は frozen かつ eq=False（numpy 配列の比較は意味を持たないため）。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Optional

import numpy as np


# ---------------------------------------------------------------------------
# 例外
# ---------------------------------------------------------------------------

class HarnessError(Exception):
    """ハーネス共通の基底例外"""


class AssumptionViolation(HarnessError):
    """仮定 (i)–(viii) のいずれかのゲートが不成立"""

    def __init__(self, gate: str, message: str, measured: Optional[dict] = None):
        super().__init__(message)
        self.gate = gate
        self.measured = dict(measured or {})


class ConfigError(HarnessError, ValueError):
    """設定ファイルのパース・スキーマエラー"""


class BasisTooLarge(HarnessError, ValueError):
    """求積グリッドがメモリ上限を超える"""


class LineageMismatch(HarnessError):
    """パス・軌道・設定ハッシュの系譜が一致しない"""


class BlowUpDetected(HarnessError):
    """1ステップ更新で sup ノルム上限を超えた（または非有限値）"""

    def __init__(self, message: str, sup_norm: float):
        super().__init__(message)
        self.sup_norm = sup_norm


# ---------------------------------------------------------------------------
# spectral_core
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """軸平行な直方体領域 D = Π[0, L_i]"""
    dim: int
    lengths: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim は 1, 2, 3 のいずれかである必要があります: {self.dim}")
        if len(self.lengths) != self.dim:
            raise ValueError(f"lengths の要素数 {len(self.lengths)} が dim={self.dim} と一致しません")
        if any(not (x > 0 and math.isfinite(x)) for x in self.lengths):
            raise ValueError(f"lengths はすべて正の有限値である必要があります: {self.lengths}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """
    固有対 (e_k, μ_k) とセル中心求積グリッド。

    e_k(x) = Π_i η(k_i) cos(k_i π x_i / L_i),  η(0)=√(1/L_i), η(k>0)=√(2/L_i)
    μ_k   = 1 + Σ_i (k_i π / L_i)²
    """
    domain: Domain
    modes: np.ndarray          # (m, dim) 多重指数
    eigenvalues: np.ndarray    # (m,)
    grid_shape: tuple[int, ...]
    nodes: tuple[np.ndarray, ...]
    padding: float = 2.0

    @property
    def m(self) -> int:
        return int(self.modes.shape[0])

    @property
    def dim(self) -> int:
        return self.domain.dim

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.domain.lengths, self.grid_shape))

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def norm_factors(self) -> np.ndarray:
        """モード×軸ごとの正規化係数 η(k_i)"""
        lengths = np.asarray(self.domain.lengths)
        return np.where(self.modes == 0, np.sqrt(1.0 / lengths), np.sqrt(2.0 / lengths))

    @cached_property
    def mode_weight(self) -> np.ndarray:
        return np.prod(self.norm_factors, axis=1)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """(m, dim) の k_i π / L_i"""
        return self.modes * np.pi / np.asarray(self.domain.lengths)

    @cached_property
    def dense_index(self) -> tuple[np.ndarray, ...]:
        return tuple(self.modes[:, i] for i in range(self.dim))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """固有基底上の係数ベクトル φ_m = Σ c_k e_k"""
    coeffs: np.ndarray
    basis: BasisSpec

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.shape != (self.basis.m,):
            raise ValueError(f"係数の長さ {coeffs.shape} が basis.m={self.basis.m} と一致しません")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("係数に非有限値が含まれています")

    def with_coeffs(self, coeffs: np.ndarray) -> "SpectralField":
        return SpectralField(coeffs=coeffs, basis=self.basis)


@dataclass(frozen=True, eq=False)
class GridField:
    """求積グリッド上の点値（擬スペクトル評価バッファ）"""
    values: np.ndarray
    basis: BasisSpec

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != self.basis.grid_shape:
            raise ValueError(f"グリッド形状 {values.shape} が {self.basis.grid_shape} と一致しません")
        if not np.all(np.isfinite(values)):
            raise ValueError("グリッド値に非有限値が含まれています")


# ---------------------------------------------------------------------------
# physics
# ---------------------------------------------------------------------------

KERNEL_FAMILIES = ("gaussian", "constant", "table")
VELOCITY_FAMILIES = ("zero", "stream_vortex")


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """
    非局所カーネル J。

    gaussian: J(x) = amplitude · exp(−|x|² / (2 width²))
    constant: J(x) = level
    table:    差分グリッド (2N_i − 1 点/軸) 上のサンプル値
    """
    family: str = "constant"
    amplitude: float = 1.0
    width: float = 0.1
    level: float = 0.0
    table: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"未対応のカーネル族です: {self.family}")
        if self.family == "gaussian" and not self.width > 0:
            raise ValueError(f"gaussian の width は正である必要があります: {self.width}")
        if self.family == "table":
            if self.table is None:
                raise ValueError("table 族にはサンプル配列が必要です")
            object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

    def scaled(self, factor: float) -> "KernelSpec":
        """J ↦ λJ"""
        table = None if self.table is None else self.table * factor
        return KernelSpec(
            family=self.family,
            amplitude=self.amplitude * factor,
            width=self.width,
            level=self.level * factor,
            table=table,
        )


@dataclass(frozen=True, eq=False)
class KernelTables:
    """差分グリッド上の J, ∇J と L¹ ノルムの求積推定"""
    basis: BasisSpec
    values: np.ndarray
    gradient: tuple[np.ndarray, ...]
    l1_norm: float
    grad_l1_norm: float


@dataclass(frozen=True)
class PotentialParams:
    """F(s) = s⁴/4 − s²/2 は固定。c0 は validate_c0 が計算する正値マージン（SimulationContext が保持する）"""
    c0: float


@dataclass(frozen=True)
class VelocitySpec:
    """速度場 u の解析族"""
    family: str = "zero"
    amplitude: float = 0.0

    def __post_init__(self) -> None:
        if self.family not in VELOCITY_FAMILIES:
            raise ValueError(f"未対応の速度場です: {self.family}")


@dataclass(frozen=True, eq=False)
class VelocityField:
    """グリッド上の u と検証値"""
    components: tuple[np.ndarray, ...]
    sup_norm: float
    max_divergence: float
    boundary_trace: float


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """
    Q の固有値 ϑ_k。明示リスト thetas か生成族 ϑ_k = σ² μ_k^{−q} のいずれか。
    """
    thetas: Optional[tuple[float, ...]] = None
    sigma2: float = 0.0
    q: float = 2.0
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.thetas is not None:
            thetas = tuple(float(x) for x in self.thetas)
            if any(not (x >= 0 and math.isfinite(x)) for x in thetas):
                raise ValueError("ϑ_k はすべて非負の有限値である必要があります")
            object.__setattr__(self, "thetas", thetas)
        elif not self.sigma2 >= 0:
            raise ValueError(f"sigma2 は非負である必要があります: {self.sigma2}")
        elif not self.q >= 0:
            # q < 0 では ϑ_k が k とともに増える
            raise ValueError(f"q は非負である必要があります: {self.q}")

    @property
    def is_generator(self) -> bool:
        return self.thetas is None

    def scaled(self, factor: float) -> "NoiseSpec":
        if self.thetas is not None:
            return NoiseSpec(thetas=tuple(x * factor for x in self.thetas), master_seed=self.master_seed)
        return NoiseSpec(sigma2=self.sigma2 * factor, q=self.q, master_seed=self.master_seed)


@dataclass(frozen=True)
class KQReport:
    """K(Q) 部分和と二進ブロック減衰ヒューリスティック"""
    partial_sum: float
    probe_depth: int
    block_sums: tuple[float, ...]
    tail_ratio: Optional[float]
    converged: bool
    gating: bool

    @property
    def passed(self) -> bool:
        return self.converged or not self.gating


@dataclass(frozen=True, eq=False)
class WienerPath:
    """ΔW^n_k = √ϑ_k √dt ξ の増分行列 [steps × m]"""
    increments: np.ndarray
    dt: float
    master_seed: int
    path_index: int

    @property
    def steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def m(self) -> int:
        return int(self.increments.shape[1])

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def lineage(self) -> tuple[int, int]:
        return (self.master_seed, self.path_index)


@dataclass(frozen=True, eq=False)
class InitialConditionSpec:
    """
    φ₀ の法則: 決定論的係数、または各モード独立なガウス係数。
    w とは別の乱数ストリームで生成するため独立性は構成的に成り立つ。
    """
    kind: str = "deterministic"
    mean: tuple[float, ...] = ()
    variance: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("deterministic", "gaussian"):
            raise ValueError(f"未対応の初期条件です: {self.kind}")
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        object.__setattr__(self, "variance", tuple(float(x) for x in self.variance))
        if any(v < 0 for v in self.variance):
            raise ValueError("分散は非負である必要があります")


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

STEPPERS = ("em", "imex")
CONVOLUTION_BACKENDS = ("direct", "fft_padded")


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """ガラーキン確率常微分方程式系の実行設定"""
    basis: BasisSpec
    kernel: KernelSpec
    velocity: VelocitySpec
    noise: NoiseSpec
    T: float
    dt: float
    stepper: str = "imex"
    stab: Optional[float] = None
    blowup_threshold: float = 1.0e3
    record_stride: int = 1
    backend: str = "fft_padded"
    linearized: bool = False
    probe_depth: int = 1000

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt は正である必要があります: {self.dt}")
        if not self.T >= self.dt:
            raise ValueError(f"T={self.T} は dt={self.dt} 以上である必要があります")
        if not self.blowup_threshold > 0:
            raise ValueError("blowup_threshold は正である必要があります")
        if self.stab is not None and self.stab < 0:
            raise ValueError("stab は非負である必要があります")
        if self.stepper not in STEPPERS:
            raise ValueError(f"未対応のステッパーです: {self.stepper}")
        if self.backend not in CONVOLUTION_BACKENDS:
            raise ValueError(f"未対応の畳み込みバックエンドです: {self.backend}")
        if self.record_stride < 1:
            raise ValueError("record_stride は 1 以上である必要があります")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """記録時刻ごとの係数行列と、それを生んだ Wiener パス"""
    times: np.ndarray
    coeffs: np.ndarray                 # (n_records, m)
    basis: BasisSpec
    path: Optional[WienerPath] = None
    status: str = "completed"
    blowup_step: Optional[int] = None
    config_hash: str = ""

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.ndim != 2 or coeffs.shape != (times.shape[0], self.basis.m):
            raise ValueError(f"係数行列の形状 {coeffs.shape} が時刻数・モード数と一致しません")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times は狭義単調増加である必要があります")
        if self.status == "completed" and not np.all(np.isfinite(coeffs)):
            raise ValueError("completed の軌道に非有限値が含まれています")

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    def state(self, index: int) -> SpectralField:
        return SpectralField(coeffs=self.coeffs[index], basis=self.basis)

    @property
    def states(self) -> list[SpectralField]:
        return [self.state(i) for i in range(len(self.times))]


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """分離型の時空間テスト関数 v(t,x) = g(t) e_k(x), g(T) = 0"""
    __test__ = False  # pytest に収集させない

    mode: int
    g: Callable[[Any], Any]
    dg: Callable[[Any], Any]
    d2g: Callable[[Any], Any]
    T: float
    label: str = ""

    def __post_init__(self) -> None:
        if self.mode < 0:
            raise ValueError(f"mode は非負である必要があります: {self.mode}")
        if abs(float(self.g(self.T))) > 1e-12:
            raise ValueError(f"g(T) = {float(self.g(self.T)):.3e} ≠ 0 のため 𝒱 に属しません")


@dataclass(frozen=True, eq=False)
class EnergyLedger:
    """
    Itô 収支表。residual[n] = F(t_n) − F(0) − Σ_{j<n}(drift + martingale + correction)
    """
    functional: str
    times: np.ndarray
    values: np.ndarray
    drift_work: np.ndarray
    martingale: np.ndarray
    correction: np.ndarray
    residual: np.ndarray

    def recomputed_residual(self) -> np.ndarray:
        increments = self.drift_work + self.martingale + self.correction
        cumulative = np.concatenate([[0.0], np.cumsum(increments)])
        return self.values - self.values[0] - cumulative

    def closure_defect(self) -> float:
        return float(np.max(np.abs(self.recomputed_residual() - self.residual)))

    def to_dict(self) -> dict:
        return {
            "functional": self.functional,
            "steps": int(len(self.times) - 1),
            "final_residual": float(self.residual[-1]),
            "max_abs_residual": float(np.max(np.abs(self.residual))),
            "drift_work_total": float(np.sum(self.drift_work)),
            "martingale_total": float(np.sum(self.martingale)),
            "correction_total": float(np.sum(self.correction)),
            "closure_defect": self.closure_defect(),
        }


@dataclass
class MomentEntry:
    """モード数 m ごとのモーメント推定"""
    m: int
    paths: int
    means: dict[str, float]
    half_widths: dict[str, float]
    blowups: list[int] = field(default_factory=list)


@dataclass
class MomentReport:
    """m の二進はしごにまたがる a-priori 評価の代理指標"""
    entries: list[MomentEntry]
    verdicts: dict[str, bool]
    valid: bool
    p_prime: float
    q_prime: float
    dt: float
    T: float

    @property
    def passed(self) -> bool:
        return self.valid and all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "passed": self.passed,
            "verdicts": dict(self.verdicts),
            "p_prime": self.p_prime,
            "q_prime": self.q_prime,
            "dt": self.dt,
            "T": self.T,
            "entries": [
                {
                    "m": e.m,
                    "paths": e.paths,
                    "means": dict(e.means),
                    "half_widths": dict(e.half_widths),
                    "blowups": list(e.blowups),
                }
                for e in self.entries
            ],
        }


@dataclass
class WeakCheckEntry:
    xi_index: int
    test_label: str
    lhs: complex
    rhs: complex
    discrepancy: float
    band: float

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.band


@dataclass
class WeakCheckReport:
    """特性汎関数の恒等式 E[exp(i⟨φ(0),ξ⟩ + iC(φ,v))] = Ξ̂(ξ) Ŵ(−∂v/∂t) の検査結果"""
    entries: list[WeakCheckEntry]
    paths: int
    dt: float
    blowups: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.blowups and all(e.passed for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "paths": self.paths,
            "dt": self.dt,
            "blowups": list(self.blowups),
            "entries": [
                {
                    "xi_index": e.xi_index,
                    "test_function": e.test_label,
                    "lhs": [e.lhs.real, e.lhs.imag],
                    "rhs": [e.rhs.real, e.rhs.imag],
                    "discrepancy": e.discrepancy,
                    "band": e.band,
                    "passed": e.passed,
                }
                for e in self.entries
            ],
        }


@dataclass
class StrongResidualReport:
    """C(φ,v) と白色ノイズ対 ⟨∂w/∂t, v⟩ の残差"""
    residuals: dict[str, float]
    ic_mismatch: float
    negative_control: bool = False

    def to_dict(self) -> dict:
        return {
            "residuals": dict(self.residuals),
            "ic_mismatch": self.ic_mismatch,
            "negative_control": self.negative_control,
        }


@dataclass
class GronwallReport:
    """B^{−1/2} ノルムでの差 G(t) とグロンウォール上界の検査"""
    times: np.ndarray
    G: np.ndarray
    K: float
    violations: list[int]
    final_bound: float
    mean_zero_defect: float

    @property
    def passed(self) -> bool:
        return not self.violations and float(self.G[-1]) <= self.final_bound

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "K": self.K,
            "G_initial": float(self.G[0]),
            "G_final": float(self.G[-1]),
            "final_bound": self.final_bound,
            "violations": list(self.violations),
            "mean_zero_defect": self.mean_zero_defect,
        }


@dataclass
class GateResult:
    """仮定ゲート1件の判定"""
    name: str
    passed: bool
    measured: dict[str, Any] = field(default_factory=dict)
    reason: str = ""


@dataclass
class ValidationReport:
    gates: list[GateResult]

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "gates": [
                {"name": g.name, "passed": g.passed, "measured": dict(g.measured), "reason": g.reason}
                for g in self.gates
            ],
        }
