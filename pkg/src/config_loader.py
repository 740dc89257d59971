"""
実行設定（JSON, schema_version 1）の読み込み。

  - 未知のキーはどの階層でも ConfigError
  - 省略された値は既定値で補い、そのキーを defaults_applied に記録する
  - 設定ハッシュは解決後の設定を正規化 JSON にした SHA-256

既定値は机上設定（d=1, L=1, m=8, T=0.5, dt=1e-4, J≡2.5, ϑ_k = 0.01·μ_k^{−2}）。
"""

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .data_io import load_kernel_table
from .models import (
    ConfigError,
    Domain,
    InitialConditionSpec,
    KernelSpec,
    NoiseSpec,
    SolverConfig,
    SpectralField,
    TestFunction,
    VelocitySpec,
)
from .spectral_core import build_basis
from .utils import canonical_hash, get_logger
from .verify import default_battery

logger = get_logger(__name__)

SCHEMA_VERSION = 1

_NUMBER = (int, float)
_NULLABLE_NUMBER = (int, float, type(None))

# キー → (許容型, 既定値)
SCHEMA: dict[str, dict[str, tuple[tuple, Any]]] = {
    "domain": {
        "dim": ((int,), 1),
        "lengths": ((list,), [1.0]),
    },
    "basis": {
        "modes": ((int,), 8),
        "padding": (_NUMBER, 2),
        "max_grid_points": ((int,), 1 << 22),
    },
    "kernel": {
        "family": ((str,), "constant"),
        "level": (_NUMBER, 2.5),
        "amplitude": (_NUMBER, 1.0),
        "width": (_NUMBER, 0.1),
        "table_file": ((str, type(None)), None),
    },
    "velocity": {
        "family": ((str,), "zero"),
        "amplitude": (_NUMBER, 0.0),
    },
    "noise": {
        "thetas": ((list, type(None)), None),
        "sigma2": (_NUMBER, 0.01),
        "q": (_NUMBER, 2.0),
        "probe_depth": ((int,), 1000),
    },
    "time": {
        "horizon": (_NUMBER, 0.5),
        "dt": (_NUMBER, 1e-4),
        "stepper": ((str,), "imex"),
        "stab": (_NULLABLE_NUMBER, None),
        "record_stride": ((int,), 1),
        "blowup_threshold": (_NUMBER, 1.0e3),
    },
    "initial_condition": {
        "kind": ((str,), "deterministic"),
        "mean": ((list,), [0.0, 0.1]),
        "variance": ((list,), []),
    },
    "verification": {
        "paths": ((int,), 200),
        "shard_size": ((int,), 256),
        "mode_ladder": ((list,), [4, 8, 16, 32]),
        "battery_modes": ((list,), [1, 2, 3]),
        "battery_profiles": ((list,), ["linear", "quadratic", "cosine"]),
        "xi": ((list,), [[0.0, 1.0]]),
        "weak_bias_constant": (_NULLABLE_NUMBER, None),
        "halvings": ((int,), 3),
        "energy_halving_factor": (_NUMBER, 1.8),
        "strong_min_order": (_NUMBER, 0.5),
        "negative_control_factor": (_NUMBER, 10.0),
        "gronwall_slack": (_NUMBER, 0.1),
        "perturbation": (_NUMBER, 1e-3),
        "seeds": ((int,), 10),
        "epsilon": (_NUMBER, 0.1),
        "holder_beta": (_NUMBER, 0.4),
        "p_prime": (_NUMBER, 3.5),
        "clt_z": (_NUMBER, 1.96),
        "initial_energy_samples": ((int,), 256),
    },
    "output": {
        "directory": ((str,), "outputs"),
        "gnuplot": ((bool,), False),
    },
}

TOP_LEVEL: dict[str, tuple[tuple, Any]] = {
    "schema_version": ((int,), SCHEMA_VERSION),
    "master_seed": ((int,), 20240101),
    "convolution_backend": ((str,), "fft_padded"),
    "linearized": ((bool,), False),
}


@dataclass
class RunConfig:
    """解決済みの実行設定"""
    data: dict
    source: str = ""
    defaults_applied: list[str] = field(default_factory=list)
    kernel_table: Optional[np.ndarray] = None

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.data)

    @property
    def master_seed(self) -> int:
        return int(self.data["master_seed"])

    def section(self, name: str) -> dict:
        return self.data[name]


def _type_ok(value: Any, types: tuple) -> bool:
    # bool は int のサブクラスなので数値としては受け付けない
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def _check_value(path: str, value: Any, types: tuple) -> None:
    if not _type_ok(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path} の型が不正です（期待: {names}, 実際: {type(value).__name__}）")


def resolve_config(raw: dict, source: str = "") -> RunConfig:
    """
    生の設定辞書を検証し、既定値で補った RunConfig を返す。

    Raises:
        ConfigError: 未知のキー、型違い、未対応の schema_version
    """
    if not isinstance(raw, dict):
        raise ConfigError("設定のトップレベルはオブジェクトである必要があります")

    known = set(SCHEMA) | set(TOP_LEVEL)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"未知のキーがあります: {', '.join(unknown)}")

    data: dict = {}
    defaults: list[str] = []
    for key, (types, default) in TOP_LEVEL.items():
        if key in raw:
            _check_value(key, raw[key], types)
            data[key] = raw[key]
        else:
            data[key] = copy.deepcopy(default)
            defaults.append(key)
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"未対応の schema_version です: {data['schema_version']}")

    for section, spec in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section} はオブジェクトである必要があります")
        unknown = sorted(set(given) - set(spec))
        if unknown:
            raise ConfigError(f"{section} に未知のキーがあります: {', '.join(unknown)}")
        resolved = {}
        for key, (types, default) in spec.items():
            if key in given:
                _check_value(f"{section}.{key}", given[key], types)
                resolved[key] = given[key]
            else:
                resolved[key] = copy.deepcopy(default)
                defaults.append(f"{section}.{key}")
        data[section] = resolved

    # dim だけ指定されたときは単位長さで補う
    domain = data["domain"]
    if "domain.lengths" in defaults and domain["dim"] != 1:
        domain["lengths"] = [1.0] * domain["dim"]

    return RunConfig(data=data, source=source, defaults_applied=defaults)


def load_run_config(filepath: str) -> RunConfig:
    """
    JSON 設定ファイルを読み込む。

    Args:
        filepath: 設定ファイルのパス

    Returns:
        RunConfig

    Raises:
        FileNotFoundError: ファイルが存在しない場合
        ConfigError: JSON として不正、またはスキーマ違反
    """
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"設定ファイルが見つかりません: {filepath}")
    with open(filepath, "r", encoding="utf-8") as f:
        content = f.read().strip()
    if not content:
        raise ConfigError(f"設定ファイルが空です: {filepath}")
    try:
        raw = json.loads(content)
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON のパースに失敗しました: {filepath}: {e}") from e

    config = resolve_config(raw, source=filepath)
    table_file = config.section("kernel")["table_file"]
    if table_file:
        if not os.path.isabs(table_file):
            table_file = os.path.join(os.path.dirname(os.path.abspath(filepath)), table_file)
        try:
            config.kernel_table = load_kernel_table(table_file, config.section("domain")["dim"])
        except (OSError, ValueError) as e:
            raise ConfigError(f"カーネル表を読み込めません: {e}") from e
    logger.info(f"設定を読み込みました: {filepath}（既定値 {len(config.defaults_applied)} 件, hash={config.config_hash[:12]}）")
    return config


# ---------------------------------------------------------------------------
# ドメイン型への変換
# ---------------------------------------------------------------------------

def to_domain(config: RunConfig) -> Domain:
    section = config.section("domain")
    try:
        return Domain(dim=section["dim"], lengths=tuple(section["lengths"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"domain が不正です: {e}") from e


def to_kernel(config: RunConfig) -> KernelSpec:
    section = config.section("kernel")
    try:
        return KernelSpec(
            family=section["family"],
            amplitude=float(section["amplitude"]),
            width=float(section["width"]),
            level=float(section["level"]),
            table=config.kernel_table,
        )
    except ValueError as e:
        raise ConfigError(f"kernel が不正です: {e}") from e


def to_noise(config: RunConfig) -> NoiseSpec:
    section = config.section("noise")
    try:
        return NoiseSpec(
            thetas=None if section["thetas"] is None else tuple(section["thetas"]),
            sigma2=float(section["sigma2"]),
            q=float(section["q"]),
            master_seed=config.master_seed,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"noise が不正です: {e}") from e


def to_initial_condition(config: RunConfig) -> InitialConditionSpec:
    section = config.section("initial_condition")
    try:
        return InitialConditionSpec(
            kind=section["kind"], mean=tuple(section["mean"]), variance=tuple(section["variance"])
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"initial_condition が不正です: {e}") from e


def to_solver_config(config: RunConfig) -> SolverConfig:
    """
    Raises:
        ConfigError: 値が不正な場合
        BasisTooLarge: 求積グリッドがメモリ上限を超える場合
    """
    basis_section = config.section("basis")
    time_section = config.section("time")
    domain = to_domain(config)
    try:
        velocity = VelocitySpec(
            family=config.section("velocity")["family"],
            amplitude=float(config.section("velocity")["amplitude"]),
        )
    except ValueError as e:
        raise ConfigError(f"velocity が不正です: {e}") from e
    try:
        basis = build_basis(
            domain,
            basis_section["modes"],
            basis_section["padding"],
            basis_section["max_grid_points"],
        )
    except ValueError as e:
        if type(e) is not ValueError:
            raise
        raise ConfigError(f"basis が不正です: {e}") from e
    try:
        return SolverConfig(
            basis=basis,
            kernel=to_kernel(config),
            velocity=velocity,
            noise=to_noise(config),
            T=float(time_section["horizon"]),
            dt=float(time_section["dt"]),
            stepper=time_section["stepper"],
            stab=None if time_section["stab"] is None else float(time_section["stab"]),
            blowup_threshold=float(time_section["blowup_threshold"]),
            record_stride=time_section["record_stride"],
            backend=config.data["convolution_backend"],
            linearized=config.data["linearized"],
            probe_depth=config.section("noise")["probe_depth"],
        )
    except ValueError as e:
        raise ConfigError(f"time/numerics の設定が不正です: {e}") from e


def to_battery(config: RunConfig) -> list[TestFunction]:
    section = config.section("verification")
    try:
        return default_battery(
            float(config.section("time")["horizon"]),
            tuple(int(k) for k in section["battery_modes"]),
            tuple(section["battery_profiles"]),
        )
    except ValueError as e:
        raise ConfigError(f"テスト関数の設定が不正です: {e}") from e


def to_xi_list(config: RunConfig, solver_config: SolverConfig) -> list[SpectralField]:
    basis = solver_config.basis
    xi_fields = []
    for i, row in enumerate(config.section("verification")["xi"]):
        if not isinstance(row, list) or len(row) > basis.m:
            raise ConfigError(f"verification.xi[{i}] はモード数 {basis.m} 以下の数値リストである必要があります")
        coeffs = np.zeros(basis.m)
        coeffs[: len(row)] = np.asarray(row, dtype=float)
        xi_fields.append(SpectralField(coeffs=coeffs, basis=basis))
    return xi_fields
