"""
レポートの整形出力（人間向け整列テキスト）と gnuplot 互換の系列ファイル。

レポート辞書をいったんブロック列（header / context / divider / fields / table）に変換し、
それをテキストに描画する。
"""

import math
import os
from typing import Any, Sequence

import numpy as np

from .utils import get_logger

logger = get_logger(__name__)

MAX_CELL_WIDTH = 40
MAX_TABLE_ROWS = 200


def _truncate(text: str, max_len: int = MAX_CELL_WIDTH) -> str:
    if len(text) <= max_len:
        return text
    return text[:max_len - 1] + "…"


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "PASS" if value else "FAIL"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return f"{v:.6g}"
    if isinstance(value, complex):
        return f"{value.real:.6g}{value.imag:+.6g}i"
    if isinstance(value, (list, tuple)):
        if len(value) == 2 and all(isinstance(x, float) for x in value):
            return f"({value[0]:.6g}, {value[1]:.6g})"
        return "[" + ", ".join(_format_value(x) for x in value) + "]"
    if value is None:
        return "-"
    return str(value)


def _is_table(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(isinstance(row, dict) for row in value)


def _flatten(row: dict, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in row.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def build_report_blocks(title: str, report: dict, meta: dict) -> list[dict]:
    """
    レポート辞書をブロック列に変換する。

    Args:
        title: 見出し
        report: 検証結果（入れ子の dict / list[dict] を含んでよい）
        meta: 設定ハッシュ・シード・既定値一覧など
    """
    blocks: list[dict] = [
        {"type": "header", "text": title},
        {"type": "context", "lines": [f"{k}: {_format_value(v)}" for k, v in meta.items()]},
        {"type": "divider"},
    ]

    scalars = {k: v for k, v in report.items() if not isinstance(v, dict) and not _is_table(v)}
    if scalars:
        blocks.append({"type": "fields", "title": "", "fields": scalars})

    for key, value in report.items():
        if isinstance(value, dict):
            blocks.append({"type": "fields", "title": key, "fields": _flatten(value)})
        elif _is_table(value):
            blocks.append({"type": "table", "title": key, "rows": [_flatten(r) for r in value]})
    return blocks


def _render_fields(block: dict) -> list[str]:
    fields = block["fields"]
    if not fields:
        return []
    width = max(len(k) for k in fields)
    lines = [f"[{block['title']}]"] if block["title"] else []
    for key, value in fields.items():
        lines.append(f"  {key.ljust(width)}  {_format_value(value)}")
    return lines


def _render_table(block: dict) -> list[str]:
    rows = block["rows"][:MAX_TABLE_ROWS]
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    cells = [[_truncate(_format_value(row.get(c))) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = [f"[{block['title']}]"]
    lines.append("  " + "  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    lines.append("  " + "  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  " + "  ".join(v.ljust(w) for v, w in zip(r, widths)))
    if len(block["rows"]) > MAX_TABLE_ROWS:
        lines.append(f"  …（残り {len(block['rows']) - MAX_TABLE_ROWS} 行は JSON を参照）")
    return lines


def render_text(blocks: Sequence[dict]) -> str:
    """ブロック列を整列テキストに描画する"""
    lines: list[str] = []
    for block in blocks:
        kind = block["type"]
        if kind == "header":
            lines.append("=" * 60)
            lines.append(block["text"])
            lines.append("=" * 60)
        elif kind == "context":
            lines.extend(block["lines"])
        elif kind == "divider":
            lines.append("-" * 60)
        elif kind == "fields":
            lines.extend(_render_fields(block))
        elif kind == "table":
            lines.extend(_render_table(block))
        else:
            raise ValueError(f"未知のブロック種別です: {kind}")
    return "\n".join(lines) + "\n"


def write_text_report(title: str, report: dict, meta: dict, filepath: str) -> str:
    """整列テキストのレポートを書き出し、その内容を返す"""
    text = render_text(build_report_blocks(title, report, meta))
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        f.write(text)
    logger.info(f"レポートを書き出しました: {filepath}")
    return text


def write_gnuplot_series(filepath: str, columns: dict[str, Sequence[float]], header: dict) -> None:
    """
    空白区切りの列データ（gnuplot の `plot 'file' using 1:2` でそのまま読める形式）。

    Raises:
        ValueError: 列の長さが揃っていない場合
    """
    arrays = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    lengths = {len(a) for a in arrays.values()}
    if len(lengths) > 1:
        raise ValueError(f"列の長さが揃っていません: {sorted(lengths)}")
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        for key, value in header.items():
            f.write(f"# {key}: {value}\n")
        f.write("# " + " ".join(arrays) + "\n")
        for row in zip(*arrays.values()):
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")
