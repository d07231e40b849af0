"""Durable correction storage: an append-only JSON-lines log with
last-write-wins materialization per (sample, view, annotator)."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class CorrectionRecord:
    sample_id: str
    view: str
    annotator: str
    corrections: tuple[tuple[int, float, float], ...]  # (1-based index, u, v)
    timestamp: float

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.sample_id, self.view, self.annotator)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "view": self.view,
            "annotator": self.annotator,
            "corrections": [[i, u, v] for i, u, v in self.corrections],
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CorrectionRecord":
        return cls(doc["sample_id"], doc["view"], doc["annotator"],
                   tuple((int(i), float(u), float(v))
                         for i, u, v in doc["corrections"]),
                   float(doc["timestamp"]))


class CorrectionStore:
    """Append-only log; appends are serialized, reads see a snapshot.

    Restarting the service and replaying the log reproduces the live state,
    so no accepted correction is ever lost.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._live: dict[tuple[str, str, str], CorrectionRecord] = {}
        if self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = CorrectionRecord.from_dict(json.loads(line))
                        self._live[rec.key] = rec

    def submit(self, sample_id: str, view: str, annotator: str,
               corrections) -> tuple[CorrectionRecord, bool]:
        """Persist a record; a resubmission for the same key supersedes.

        Identical payloads are idempotent: the live state is unchanged and
        nothing new is appended.
        """
        rec = CorrectionRecord(sample_id, view, annotator,
                               tuple((int(i), float(u), float(v))
                                     for i, u, v in corrections),
                               time.time())
        with self._lock:
            prior = self._live.get(rec.key)
            if prior is not None and prior.corrections == rec.corrections:
                return prior, True
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")
                fh.flush()
            superseded = prior is not None
            self._live[rec.key] = rec
        return rec, superseded

    def snapshot(self) -> list[CorrectionRecord]:
        with self._lock:
            return list(self._live.values())

    def __len__(self) -> int:
        with self._lock:
            return len(self._live)
