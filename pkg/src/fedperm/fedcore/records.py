from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS_COLUMNS = ("round", "client_ids", "enc_ms", "agg_ms", "dec_ms", "test_acc", "eps_spent", "delta_spent")


@dataclass
class RoundRecord:
    round: int
    client_ids: tuple[int, ...]
    enc_ms: float = 0.0
    agg_ms: float = 0.0
    dec_ms: float = 0.0
    test_acc: float = 0.0
    eps_spent: float = 0.0
    delta_spent: float = 0.0
    enc_count: int = 0
    dec_count: int = 0
    upload_bytes: int = 0


@dataclass
class RunResult:
    algorithm: str
    records: list[RoundRecord]
    final_params: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)
    stopped_early: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def metrics_csv(records: Sequence[RoundRecord], timings: bool = True) -> str:
    """Render records as CSV. Without ``timings`` the time columns stay empty
    so the file is a pure function of (config, seed)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        times = [f"{r.enc_ms:.3f}", f"{r.agg_ms:.3f}", f"{r.dec_ms:.3f}"] if timings else ["", "", ""]
        w.writerow(
            [r.round, " ".join(map(str, r.client_ids)), *times, _fmt(r.test_acc), _fmt(r.eps_spent), _fmt(r.delta_spent)]
        )
    return buf.getvalue()


def write_metrics(path: Path, records: Sequence[RoundRecord], timings: bool = True) -> None:
    Path(path).write_text(metrics_csv(records, timings))


def write_manifest(path: Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
