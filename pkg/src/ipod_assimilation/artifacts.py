"""Output writers shared by the experiment modules (CSV tables, JSON summaries)."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ArtifactError

logger = logging.getLogger("ipod-assim.artifacts")


def ensure_parent_dir(out_path: str | Path) -> None:
    """Create parent directory for an output file (best-effort)."""
    try:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    except Exception:
        logger.debug("Could not ensure parent directory for %s", out_path)


def _cell(value: Any) -> Any:
    # repr round-trips float64 exactly
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    if value is None:
        return ""
    return value


def write_rows_csv(rows: Iterable[Mapping[str, Any]], fieldnames: list[str], out_path: str | Path, *, label: str = "CSV") -> int:
    ensure_parent_dir(out_path)
    n = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
            n += 1
    logger.info("Wrote %s: %s (%d rows)", label, out_path, n)
    return n


def read_rows_csv(path: str | Path) -> list[dict[str, str]]:
    src = Path(path)
    if not src.is_file():
        raise ArtifactError(f"missing artifact: {src}", provenance="artifacts")
    with open(src, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json_summary(summary: Mapping[str, Any], out_path: str | Path) -> None:
    ensure_parent_dir(out_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=4, sort_keys=True)
        fh.write("\n")
    logger.info("Wrote JSON summary: %s", out_path)


def read_json_summary(path: str | Path) -> dict[str, Any]:
    src = Path(path)
    if not src.is_file():
        raise ArtifactError(f"missing artifact: {src}", provenance="artifacts")
    try:
        with open(src, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{src} is not valid JSON: {e}", provenance="artifacts")
    if not isinstance(data, dict):
        raise ArtifactError(f"{src} does not hold a JSON object", provenance="artifacts")
    return data
