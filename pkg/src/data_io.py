"""
ファイル入出力: Wiener パス・軌道の CSV / npz、カーネル表、シャード完了台帳、JSON レポート。

CSV は先頭に "# key: value" 形式のヘッダ行（シード系譜・dt・設定ハッシュ・状態）を持つ。
"""

import csv
import json
import os
from typing import Any, Optional

import numpy as np

from .models import BasisSpec, Trajectory, WienerPath
from .utils import get_logger

logger = get_logger(__name__)

COMPLETED_SHARDS_FILE = "completed_shards.json"


def _ensure_parent(filepath: str) -> None:
    parent = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(parent, exist_ok=True)


def _write_header(f, header: dict[str, Any]) -> None:
    for key, value in header.items():
        f.write(f"# {key}: {value}\n")


def _read_header_and_rows(filepath: str) -> tuple[dict[str, str], list[dict[str, str]]]:
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"ファイルが見つかりません: {filepath}")
    header: dict[str, str] = {}
    body: list[str] = []
    with open(filepath, "r", encoding="utf-8-sig", newline="") as f:
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    rows = list(csv.DictReader(body))
    return header, rows


# ---------------------------------------------------------------------------
# Wiener パス
# ---------------------------------------------------------------------------

def write_path_csv(path: WienerPath, filepath: str, config_hash: str = "") -> None:
    """列: step, mode, increment"""
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        _write_header(f, {
            "master_seed": path.master_seed,
            "path_index": path.path_index,
            "dt": repr(path.dt),
            "steps": path.steps,
            "modes": path.m,
            "config_hash": config_hash,
        })
        writer = csv.writer(f)
        writer.writerow(["step", "mode", "increment"])
        for n in range(path.steps):
            for k in range(path.m):
                writer.writerow([n, k, repr(float(path.increments[n, k]))])
    logger.info(f"Wiener パスを書き出しました: {filepath}")


def read_path_csv(filepath: str) -> WienerPath:
    """
    Raises:
        FileNotFoundError: ファイルが存在しない場合
        ValueError: ヘッダまたは行が不正な場合
    """
    header, rows = _read_header_and_rows(filepath)
    try:
        steps, modes = int(header["steps"]), int(header["modes"])
        increments = np.zeros((steps, modes))
        for row in rows:
            increments[int(row["step"]), int(row["mode"])] = float(row["increment"])
        return WienerPath(
            increments=increments,
            dt=float(header["dt"]),
            master_seed=int(header["master_seed"]),
            path_index=int(header["path_index"]),
        )
    except (KeyError, IndexError) as e:
        raise ValueError(f"パス CSV の形式が不正です: {filepath}: {e}") from e


def write_path_npz(path: WienerPath, filepath: str, config_hash: str = "") -> None:
    _ensure_parent(filepath)
    np.savez(
        filepath,
        increments=path.increments,
        dt=path.dt,
        master_seed=path.master_seed,
        path_index=path.path_index,
        config_hash=config_hash,
    )


def read_path_npz(filepath: str) -> WienerPath:
    with np.load(filepath) as data:
        return WienerPath(
            increments=data["increments"].copy(),
            dt=float(data["dt"]),
            master_seed=int(data["master_seed"]),
            path_index=int(data["path_index"]),
        )


# ---------------------------------------------------------------------------
# 軌道
# ---------------------------------------------------------------------------

def _trajectory_header(traj: Trajectory) -> dict[str, Any]:
    path = traj.path
    return {
        "config_hash": traj.config_hash,
        "master_seed": "" if path is None else path.master_seed,
        "path_index": "" if path is None else path.path_index,
        "dt": "" if path is None else repr(path.dt),
        "modes": traj.basis.m,
        "status": traj.status,
        "blowup_step": "" if traj.blowup_step is None else traj.blowup_step,
    }


def write_trajectory_csv(traj: Trajectory, filepath: str) -> None:
    """列: t, mode, coefficient"""
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        _write_header(f, _trajectory_header(traj))
        writer = csv.writer(f)
        writer.writerow(["t", "mode", "coefficient"])
        for n, t in enumerate(traj.times):
            for k in range(traj.basis.m):
                writer.writerow([repr(float(t)), k, repr(float(traj.coeffs[n, k]))])
    logger.info(f"軌道を書き出しました: {filepath}（{len(traj.times)} 時刻, status={traj.status}）")


def read_trajectory_csv(filepath: str, basis: BasisSpec) -> tuple[Trajectory, dict[str, str]]:
    """
    Returns:
        (Trajectory（パスは含まない）, ヘッダ辞書)

    Raises:
        ValueError: モード数が基底と一致しない場合
    """
    header, rows = _read_header_and_rows(filepath)
    if int(header.get("modes", basis.m)) != basis.m:
        raise ValueError(f"軌道のモード数 {header['modes']} が基底の m={basis.m} と一致しません")
    times: list[float] = []
    index: dict[float, int] = {}
    for row in rows:
        t = float(row["t"])
        if t not in index:
            index[t] = len(times)
            times.append(t)
    coeffs = np.zeros((len(times), basis.m))
    for row in rows:
        coeffs[index[float(row["t"])], int(row["mode"])] = float(row["coefficient"])
    blowup = header.get("blowup_step", "")
    traj = Trajectory(
        times=np.asarray(times),
        coeffs=coeffs,
        basis=basis,
        status=header.get("status", "completed"),
        blowup_step=int(blowup) if blowup else None,
        config_hash=header.get("config_hash", ""),
    )
    return traj, header


def write_trajectory_npz(traj: Trajectory, filepath: str) -> None:
    _ensure_parent(filepath)
    header = _trajectory_header(traj)
    np.savez(
        filepath,
        times=traj.times,
        coeffs=traj.coeffs,
        header=json.dumps({k: str(v) for k, v in header.items()}),
    )


def read_trajectory_npz(filepath: str, basis: BasisSpec) -> tuple[Trajectory, dict[str, str]]:
    with np.load(filepath) as data:
        header = json.loads(str(data["header"]))
        blowup = header.get("blowup_step", "")
        traj = Trajectory(
            times=data["times"].copy(),
            coeffs=data["coeffs"].copy(),
            basis=basis,
            status=header.get("status", "completed"),
            blowup_step=int(blowup) if blowup else None,
            config_hash=header.get("config_hash", ""),
        )
    return traj, header


# ---------------------------------------------------------------------------
# カーネル表
# ---------------------------------------------------------------------------

def write_kernel_table(filepath: str, offsets: tuple[np.ndarray, ...], values: np.ndarray) -> None:
    """列: x1[, x2, x3], value（C 順）"""
    _ensure_parent(filepath)
    dim = len(offsets)
    mesh = np.meshgrid(*offsets, indexing="ij")
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        _write_header(f, {"dims": dim, "shape": " ".join(str(n) for n in values.shape)})
        writer = csv.writer(f)
        writer.writerow([f"x{i + 1}" for i in range(dim)] + ["value"])
        for idx in np.ndindex(values.shape):
            writer.writerow([repr(float(mesh[i][idx])) for i in range(dim)] + [repr(float(values[idx]))])


def load_kernel_table(filepath: str, dim: Optional[int] = None) -> np.ndarray:
    """
    差分グリッド上のカーネル表を読み込む。

    Raises:
        FileNotFoundError: ファイルが存在しない場合
        ValueError: 次元・形状・オフセットが不正な場合
    """
    header, rows = _read_header_and_rows(filepath)
    try:
        dims = int(header["dims"])
        shape = tuple(int(n) for n in header["shape"].split())
    except (KeyError, ValueError) as e:
        raise ValueError(f"カーネル表のヘッダが不正です（dims, shape が必要）: {filepath}") from e
    if dim is not None and dims != dim:
        raise ValueError(f"カーネル表の次元 {dims} が領域の次元 {dim} と一致しません")
    if len(shape) != dims or any(n % 2 == 0 for n in shape):
        raise ValueError(f"カーネル表の形状 {shape} は各軸奇数（2N−1）である必要があります")
    if len(rows) != int(np.prod(shape)):
        raise ValueError(f"カーネル表の行数 {len(rows)} が形状 {shape} と一致しません")

    coords = np.array([[float(row[f"x{i + 1}"]) for i in range(dims)] for row in rows])
    values = np.array([float(row["value"]) for row in rows]).reshape(shape)
    coords = coords.reshape(shape + (dims,))
    for i, n in enumerate(shape):
        index = [0] * dims
        index[i] = slice(None)
        axis = coords[tuple(index) + (i,)]
        if not np.allclose(axis, -axis[::-1], atol=1e-12) or not np.all(np.diff(axis) > 0):
            raise ValueError(f"カーネル表の軸 {i + 1} のオフセットが 0 を中心に対称な昇順ではありません")
    return values


# ---------------------------------------------------------------------------
# シャード台帳・JSON
# ---------------------------------------------------------------------------

def load_completed_shards(filepath: str) -> set[int]:
    """
    完了済みシャード番号を読み込む。ファイルが存在しない場合は空セットを返す。
    """
    if not os.path.exists(filepath):
        return set()
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            data = json.load(f)
        return {int(x) for x in data.get("shards", [])}
    except Exception as e:
        logger.warning(f"シャード台帳の読み込みに失敗: {e}")
        return set()


def load_shard_ranges(filepath: str) -> dict[int, tuple[int, int]]:
    """完了済みシャードごとのパス番号範囲 [start, stop) を読み込む"""
    if not os.path.exists(filepath):
        return {}
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            data = json.load(f)
        return {int(k): (int(v[0]), int(v[1])) for k, v in data.get("ranges", {}).items()}
    except Exception as e:
        logger.warning(f"シャード台帳の読み込みに失敗: {e}")
        return {}


def save_completed_shards(
    shards: set[int],
    filepath: str,
    config_hash: str = "",
    ranges: Optional[dict[int, tuple[int, int]]] = None,
) -> None:
    """既存の台帳とマージして保存する。同じ番号の範囲は新しい方で上書きする"""
    existing = load_completed_shards(filepath)
    merged = sorted(existing | set(shards))
    merged_ranges = load_shard_ranges(filepath)
    merged_ranges.update(ranges or {})
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(
            {
                "config_hash": config_hash,
                "shards": merged,
                "ranges": {str(k): list(v) for k, v in sorted(merged_ranges.items())},
            },
            f,
            ensure_ascii=False,
            indent=2,
        )
    logger.info(f"シャード台帳を保存しました: {len(merged)} 件")


def write_json(data: dict, filepath: str) -> None:
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, default=_json_default)


def read_json(filepath: str) -> dict:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, complex):
        return [value.real, value.imag]
    raise TypeError(f"JSON に変換できない型です: {type(value).__name__}")
