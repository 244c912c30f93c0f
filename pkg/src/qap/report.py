"""Byte-stable JSON and CSV emission for run summaries."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import InputError

FLOAT_FMT = "%.12e"


def canonical_float(x: float) -> float:
    """Round to the precision that survives a %.12e round trip."""
    x = float(x)
    return x if not math.isfinite(x) else float(FLOAT_FMT % x)


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return '"nan"'
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return FLOAT_FMT % v
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps(obj: Any, indent: int = 0) -> str:
    """Deterministic JSON: sorted keys, %.12e floats, two-space indent."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent + 1) for v in obj) + "\n" + end + "]"
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()  # numpy scalar
    return _fmt_scalar(obj)


_SPECIAL = {"nan": math.nan, "inf": math.inf, "-inf": -math.inf}


def _revive(v):
    if isinstance(v, str) and v in _SPECIAL:
        return _SPECIAL[v]
    if isinstance(v, dict):
        return {k: _revive(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_revive(x) for x in v]
    return v


def _clean(v):
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        v = v.item()
    if isinstance(v, bool) or v is None or isinstance(v, (int, str)):
        return v
    if isinstance(v, float):
        return canonical_float(v)
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    raise TypeError(f"cannot store {type(v).__name__} in a summary")


@dataclass
class RunSummary:
    """Outcome of one scenario run.

    ``wall_clock`` is informational and excluded from serialization and
    equality, so identical inputs give identical bytes.
    """

    scenario: str
    config_hash: str
    headline: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    exit_code: int = 0
    error: str | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.headline = _clean(self.headline)
        self.warnings = [str(w) for w in self.warnings]
        self.artifacts = {str(k): str(v) for k, v in self.artifacts.items()}

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "headline": self.headline,
            "warnings": list(self.warnings),
            "artifacts": dict(self.artifacts),
            "exit_code": self.exit_code,
            "error": self.error,
        }


def emit_json(summary: RunSummary) -> str:
    return dumps(summary.to_dict()) + "\n"


def parse_json(text: str) -> RunSummary:
    data = _revive(json.loads(text))
    return RunSummary(**data)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def _csv_cell(v) -> str:
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        v = v.item()
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return FLOAT_FMT % v if math.isfinite(v) else str(v)
    return str(v)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ArtifactWriter:
    """Writes files under one directory and records their checksums."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise InputError(f"cannot create output directory {self.directory}: {err}") from err
        self.files: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        path = self.directory / name
        try:
            path.write_bytes(data)
        except OSError as err:
            raise InputError(f"cannot write {path}: {err}") from err
        self.files[name] = sha256_bytes(data)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        return self.write_text(name, csv_text(header, rows))

    def write_summary(self, summary: RunSummary, name: str = "summary.json") -> Path:
        path = self.directory / name
        try:
            path.write_bytes(emit_json(summary).encode("utf-8"))
        except OSError as err:
            raise InputError(f"cannot write {path}: {err}") from err
        return path
