"""
共通ユーティリティ: ロギング・チャンク分割・ハッシュ
"""

import hashlib
import json
import logging
import os
from typing import Any

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def _level(level_name: str) -> int:
    level = getattr(logging, level_name.strip().upper(), logging.INFO)
    return level if isinstance(level, int) else logging.INFO


def get_logger(name: str) -> logging.Logger:
    """標準フォーマットのロガーを返す（レベルは SNCH_LOG_LEVEL で上書き可能）"""
    logging.basicConfig(
        level=_level(os.environ.get("SNCH_LOG_LEVEL", "INFO")),
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    return logging.getLogger(name)


def apply_log_level(level_name: str) -> None:
    """
    ルートロガーのレベルを設定し直す。

    get_logger はインポート時に basicConfig を済ませるため、.env を読んだ後に呼ぶ。
    """
    logging.getLogger().setLevel(_level(level_name))


def chunk_list(lst: list, size: int) -> list[list]:
    """リストを指定サイズのチャンクに分割する"""
    if size < 1:
        raise ValueError(f"チャンクサイズは 1 以上である必要があります: {size}")
    return [lst[i:i + size] for i in range(0, len(lst), size)]


def canonical_hash(payload: Any) -> str:
    """キー順を固定した JSON の SHA-256"""
    text = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
