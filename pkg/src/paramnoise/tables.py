"""Versioned CSV tables, atomic file writes, and the run manifest."""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARTIFACT_VERSION = "0.1.0"


class SchemaError(ValueError):
    """A CSV file does not carry a schema this reader understands."""


# every table starts with a ``schema`` column holding "<name>/<version>"
SCHEMAS: dict[str, tuple[str, ...]] = {
    "metrics/1": (
        "schema", "run_id", "variant", "seed", "step", "return_mean", "return_std", "return_stderr",
        "td_loss", "exploration", "clean_return", "attack_success", "transfer_rate",
    ),
    "attack/1": (
        "schema", "run_id", "seed", "env", "agent", "source", "mode", "lam", "condition", "episode",
        "return", "clean_mean", "random_mean", "adversarial_mean", "degradation", "random_degradation",
        "attack_success", "transfer_rate", "agreement",
    ),
    "final/1": (
        "schema", "run_id", "seed", "env", "agent", "variant", "lam", "episodes", "final_return",
        "final_clean_return", "oracle_return", "attack_success", "triggered_at",
    ),
    "transfer/1": ("schema", "env", "seed", "agent", "lam", "states", "rate", "agreement"),
    "agreement/1": ("schema", "run_id", "seed", "observed_steps", "agreement"),
    "compare/1": ("schema", "claim", "group", "seeds", "passed", "verdict", "detail"),
}


def fmt(value) -> str:
    """Canonical cell text: repr for floats (round-trips exactly), blank for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(path: str | Path, schema: str, rows: list[dict]) -> None:
    """Write ``rows`` under ``schema``; missing keys become blank cells."""
    if schema not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema!r}")
    columns = SCHEMAS[schema]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        extra = set(row) - set(columns)
        if extra:
            raise SchemaError(f"{schema}: unexpected columns {sorted(extra)}")
        writer.writerow([schema if c == "schema" else fmt(row.get(c)) for c in columns])
    atomic_write_text(path, buf.getvalue())


def read_table(path: str | Path, expect: str | None = None) -> tuple[str, list[dict[str, str]]]:
    """Read a table, rejecting unknown schema versions and mismatched headers."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
        fh.seek(0)
        header = next(csv.reader(fh), None)
    if not header or header[0] != "schema":
        raise SchemaError(f"{path}: missing schema column")
    schemas = {r["schema"] for r in rows}
    if len(schemas) > 1:
        raise SchemaError(f"{path}: mixed schemas {sorted(schemas)}")
    schema = schemas.pop() if schemas else _schema_for_header(header, path)
    if schema not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema version {schema!r}")
    if tuple(header) != SCHEMAS[schema]:
        raise SchemaError(f"{path}: header does not match {schema}")
    if expect is not None and schema != expect:
        raise SchemaError(f"{path}: expected {expect}, found {schema}")
    return schema, rows


def _schema_for_header(header, path) -> str:
    for name, cols in SCHEMAS.items():
        if tuple(header) == cols:
            return name
    raise SchemaError(f"{path}: header matches no known schema")


def as_float(cell: str) -> float | None:
    return None if cell == "" else float(cell)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    checkpoints: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    status: str = "running"
    artifact_version: str = ARTIFACT_VERSION
    message: str = ""

    def write(self, path: str | Path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser["manifest"] = {
            "artifact_version": self.artifact_version,
            "command": self.command,
            "config_hash": self.config_hash,
            "status": self.status,
            "wall_clock_seconds": f"{self.wall_clock_seconds:.3f}",
            "message": self.message.replace("\n", " "),
        }
        parser["checkpoints"] = {f"path{i}": p for i, p in enumerate(self.checkpoints)}
        parser["outputs"] = {f"path{i}": p for i, p in enumerate(self.outputs)}
        buf = io.StringIO()
        parser.write(buf)
        atomic_write_text(path, buf.getvalue())

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        parser = configparser.ConfigParser(interpolation=None)
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        m = parser["manifest"]
        return cls(
            command=m["command"],
            config_hash=m["config_hash"],
            checkpoints=list(parser["checkpoints"].values()) if parser.has_section("checkpoints") else [],
            outputs=list(parser["outputs"].values()) if parser.has_section("outputs") else [],
            wall_clock_seconds=float(m["wall_clock_seconds"]),
            status=m["status"],
            artifact_version=m["artifact_version"],
            message=m.get("message", ""),
        )
