"""
結果の書き出し
CSV（ヘッダ 1 行、float は repr）と JSON 文書、manifest.json を出力先ディレクトリに置く。
同じ設定・同じシードなら CSV はバイト単位で一致する（wall_clock は manifest にだけ入る）。
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any

from app.models.experiment import ResultBundle, Table

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):
        return _cell(value.item())
    return str(value)


def write_table(table: Table, directory: Path) -> Path:
    path = directory / f"{table.name}.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            if len(row) != len(table.columns):
                raise ValueError(f"{table.name}: row has {len(row)} cells, expected {len(table.columns)}")
            writer.writerow([_cell(v) for v in row])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_safe(value: Any) -> Any:
    # inf / nan は JSON にないので文字列で書く
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item"):
        return _json_safe(value.item())
    return value


def emit_tables(bundle: ResultBundle, directory: str | Path | None = None) -> Path:
    """bundle を書き出して manifest.json のパスを返す。"""
    out = Path(directory if directory is not None else bundle.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    files: dict[str, str] = {}
    for table in bundle.tables:
        path = write_table(table, out)
        files[path.name] = _sha256(path)
    for name, text in bundle.documents.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        files[path.name] = _sha256(path)

    manifest = {
        "experiment": bundle.experiment,
        "version": bundle.version,
        "seed": bundle.seed,
        "config": bundle.config.model_dump(mode="json"),
        "files": files,
        "flags": bundle.flags,
        "summary": _json_safe(bundle.summary),
        "n_paths_total": bundle.n_paths_total,
        "wall_clock_seconds": bundle.wall_clock,
    }
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("results written: dir=%s files=%d flags=%d", out, len(files), len(bundle.flags))
    return manifest_path
