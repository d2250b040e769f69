"""Reference-sample ingestion and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["InputError", "config_hash", "load_reference_csv", "write_manifest"]

SCHEMA_VERSION = 1


class InputError(ValueError):
    """Malformed input file; the message names the offending lines."""


def load_reference_csv(path, column=0, positive: bool = True) -> np.ndarray:
    """One numeric column of a CSV file, in file order.

    ``column`` is a header name or a 0-based index. A first row whose entry in
    that column is not numeric is treated as a header. With ``positive`` every
    value must be strictly positive, as the gamma tilt takes ``log x``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or all(not any(cell.strip() for cell in r) for r in rows):
        raise InputError(f"{path}: file is empty")
    start = 0
    idx = column if isinstance(column, int) else None
    first = _cell(rows[0], 0 if idx is None else idx)
    if first and not _is_number(first):
        header = [h.strip() for h in rows[0]]
        if idx is None:
            if column not in header:
                raise InputError(f"{path}: no column named {column!r} (header: {', '.join(header)})")
            idx = header.index(column)
        start = 1
    elif idx is None:
        raise InputError(f"{path}: column {column!r} requested but the file has no header")
    values, bad, nonpos = [], [], []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not any(cell.strip() for cell in row):
            continue
        cell = _cell(row, idx)
        if not _is_number(cell) or not math.isfinite(float(cell)):
            bad.append(lineno)
            continue
        v = float(cell)
        if positive and v <= 0:
            nonpos.append(lineno)
        values.append(v)
    if bad:
        raise InputError(f"{path}: missing or non-numeric value on line(s) {_lines(bad)}")
    if nonpos:
        raise InputError(f"{path}: nonpositive value on line(s) {_lines(nonpos)}; the gamma tilt needs x > 0")
    if not values:
        raise InputError(f"{path}: no data rows")
    return np.array(values, dtype=float)


def _cell(row, idx) -> str:
    return row[idx].strip() if idx < len(row) else ""


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _lines(nums: list[int], limit: int = 20) -> str:
    shown = ", ".join(map(str, nums[:limit]))
    return shown + (f" and {len(nums) - limit} more" if len(nums) > limit else "")


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seed: int | None,
    artifacts: list[str],
    started: float,
    notes: list[str] | None = None,
) -> Path:
    """``manifest.json`` beside the artifacts; only ``wall_clock_seconds`` varies between reruns."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "artifacts": sorted(artifacts),
        "version": __version__,
        "notes": notes or [],
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path
