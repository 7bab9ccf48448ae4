"""Evaluation reports: JSON and flat CSV emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import CersError


def config_hash(config: dict) -> str:
    """Stable digest of a JSON-serialisable config (sorted keys)."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)  # name -> {value, ci_low, ci_high}
    seed: int = 0
    n_bootstrap: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)
    timestamp: str | None = None

    def add(self, name: str, value: float, ci: tuple | None = None) -> None:
        if name in RESERVED:
            raise ValueError(f"{name!r} is a reserved report key")
        lo, hi = ci if ci is not None else (None, None)
        self.metrics[name] = {"value": value, "ci_low": lo, "ci_high": hi}

    def to_dict(self) -> dict:
        """``{metric: {value, ci_low, ci_high}, seed, n_bootstrap, config_hash}``
        plus ``timestamp`` and, when present, ``extra``."""
        d = {name: dict(m) for name, m in self.metrics.items()}
        d["seed"] = self.seed
        d["n_bootstrap"] = self.n_bootstrap
        d["config_hash"] = self.config_hash
        if self.extra:
            d["extra"] = self.extra
        d["timestamp"] = self.timestamp or datetime.now(timezone.utc).isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        metrics = {k: dict(v) for k, v in d.items() if k not in RESERVED and isinstance(v, dict)}
        return cls(
            metrics,
            int(d.get("seed", 0)),
            int(d.get("n_bootstrap", 0)),
            str(d.get("config_hash", "")),
            dict(d.get("extra", {})),
            d.get("timestamp"),
        )


RESERVED = frozenset({"seed", "n_bootstrap", "config_hash", "timestamp", "extra"})


class ReportWriteError(CersError):
    exit_code = 3


def _write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportWriteError(f"cannot write {path}: {exc}") from exc


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "ci_low", "ci_high"])
    for name, m in report.metrics.items():
        writer.writerow([name, m["value"], "" if m["ci_low"] is None else m["ci_low"], "" if m["ci_high"] is None else m["ci_high"]])
    return buf.getvalue()


def emit_report(report: EvalReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        _write_atomic(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        _write_atomic(path, report_csv(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
