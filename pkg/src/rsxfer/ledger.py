"""Experiment configs, canonical config hashing and the append-only run ledger.

Configs are declarative JSON (key-value plus lists).  Hashes are computed on
a canonicalized form — keys sorted, integral floats collapsed to ints, enums
and paths stringified — so semantically identical configs hash identically
regardless of field order or number formatting.  The ledger is line-delimited
JSON, append-only, guarded by an advisory file lock; one completed entry per
config hash.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from .metrics import MetricReport
from . import __version__ as _framework_version


class ConfigError(ValueError):
    """Raised for malformed experiment configs or suite files."""


def canonicalize(value: Any) -> Any:
    """Normalize a config value tree for stable hashing."""
    if isinstance(value, Mapping):
        return {str(k): canonicalize(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (list, tuple)):
        return [canonicalize(v) for v in value]
    if isinstance(value, Enum):
        return canonicalize(value.value)
    if isinstance(value, bool) or value is None or isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(value) if value.is_integer() else float(repr(value))
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, Path):
        return str(value)
    return str(value)


def config_hash(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(canonicalize(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    """One suite entry: source checkpoint, target dataset, protocol, seeds."""

    experiment_id: str
    source_checkpoint: str
    target_manifest: str
    mode: str  # "fe" | "ft"
    schedule: Mapping[str, Any] | str = "finetune"
    seeds: Mapping[str, int] = field(default_factory=lambda: {"split": 0, "train": 0, "bootstrap": 0})
    pipeline: Mapping[str, Any] | None = None
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("fe", "ft"):
            raise ConfigError(f"{self.experiment_id}: mode must be 'fe' or 'ft', got {self.mode!r}")
        for key in ("split", "train", "bootstrap"):
            if key not in self.seeds:
                raise ConfigError(f"{self.experiment_id}: seeds missing {key!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        required = ("experiment_id", "source_checkpoint", "target_manifest", "mode")
        missing = [k for k in required if k not in data]
        if missing:
            raise ConfigError(f"config missing fields {missing}: {dict(data)}")
        known = {
            "experiment_id", "source_checkpoint", "target_manifest", "mode",
            "schedule", "seeds", "pipeline", "output_dir",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{data['experiment_id']}: unknown config fields {sorted(unknown)}")
        return cls(
            experiment_id=str(data["experiment_id"]),
            source_checkpoint=str(data["source_checkpoint"]),
            target_manifest=str(data["target_manifest"]),
            mode=str(data["mode"]),
            schedule=data.get("schedule", "finetune"),
            seeds=dict(data.get("seeds", {"split": 0, "train": 0, "bootstrap": 0})),
            pipeline=data.get("pipeline"),
            output_dir=data.get("output_dir"),
        )

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "source_checkpoint": self.source_checkpoint,
            "target_manifest": self.target_manifest,
            "mode": self.mode,
            "schedule": self.schedule,
            "seeds": dict(self.seeds),
            "pipeline": dict(self.pipeline) if self.pipeline is not None else None,
            "output_dir": self.output_dir,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_suite(path: str | Path) -> list[ExperimentConfig]:
    """A suite file is a JSON list of configs or {"configs": [...]}."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"suite file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"suite file {path} is not valid JSON: {exc}") from None
    if isinstance(data, Mapping):
        data = data.get("configs")
    if not isinstance(data, list):
        raise ConfigError(f"suite file {path} must hold a list of configs")
    return [ExperimentConfig.from_dict(entry) for entry in data]


@dataclass(frozen=True)
class RunLedgerEntry:
    config_hash: str
    config: Mapping[str, Any]
    status: str  # "completed" | "failed"
    started: str
    finished: str
    lineage: list
    report: Mapping[str, Any] | None
    artifacts: Mapping[str, str] = field(default_factory=dict)
    error: str | None = None
    framework_version: str = _framework_version

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": dict(self.config),
            "status": self.status,
            "started": self.started,
            "finished": self.finished,
            "lineage": list(self.lineage),
            "report": dict(self.report) if self.report is not None else None,
            "artifacts": dict(self.artifacts),
            "error": self.error,
            "framework_version": self.framework_version,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunLedgerEntry":
        return cls(
            config_hash=data["config_hash"],
            config=data.get("config", {}),
            status=data.get("status", "completed"),
            started=data.get("started", ""),
            finished=data.get("finished", ""),
            lineage=list(data.get("lineage", [])),
            report=data.get("report"),
            artifacts=dict(data.get("artifacts", {})),
            error=data.get("error"),
            framework_version=data.get("framework_version", ""),
        )

    def metric_report(self) -> MetricReport | None:
        return MetricReport.from_dict(dict(self.report)) if self.report else None


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


class RunLedger:
    """Append-only JSONL store keyed by config hash."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def append(self, entry: RunLedgerEntry) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(entry.to_dict(), sort_keys=True) + "\n"
        with self.path.open("a", encoding="utf-8") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                fh.write(line)
                fh.flush()
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    def append_run(
        self,
        config: Mapping[str, Any],
        lineage: list,
        report: MetricReport,
        artifacts: Mapping[str, str] | None = None,
        started: str | None = None,
    ) -> RunLedgerEntry:
        entry = RunLedgerEntry(
            config_hash=config_hash(config),
            config=config,
            status="completed",
            started=started or _timestamp(),
            finished=_timestamp(),
            lineage=lineage,
            report=report.to_dict(),
            artifacts=dict(artifacts or {}),
        )
        self.append(entry)
        return entry

    def entries(self) -> list[RunLedgerEntry]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(RunLedgerEntry.from_dict(json.loads(line)))
        return out

    def completed_hashes(self) -> set[str]:
        return {e.config_hash for e in self.entries() if e.status == "completed"}
