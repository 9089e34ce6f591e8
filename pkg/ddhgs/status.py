from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

STATUS_NAME = "status.json"


@dataclass
class TrainingProgress:
    state: str              # "training" | "densifying" | "evaluating" | "done"
    iteration: int
    total: int
    gaussians: int
    losses: dict[str, float] | None
    last_densify: dict[str, int] | None
    last_eval: dict[str, dict[str, float]] | None


class StatusTracker:
    def __init__(self, status_path: Path):
        self._path = Path(status_path).expanduser().resolve()
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._progress: TrainingProgress | None = None
        self._started = _now_iso()

    @property
    def path(self) -> Path:
        return self._path

    def set_training(
        self,
        iteration: int,
        total: int,
        gaussians: int,
        losses: dict[str, float] | None = None,
    ) -> None:
        with self._lock:
            existing = self._progress
            self._progress = TrainingProgress(
                state="training",
                iteration=iteration,
                total=total,
                gaussians=gaussians,
                losses=losses if losses is not None else (existing.losses if existing else None),
                last_densify=existing.last_densify if existing else None,
                last_eval=existing.last_eval if existing else None,
            )
        self._write()

    def set_densifying(self, iteration: int, gaussians: int, summary: dict[str, int]) -> None:
        with self._lock:
            if self._progress:
                self._progress.state = "densifying"
                self._progress.iteration = iteration
                self._progress.gaussians = gaussians
                self._progress.last_densify = dict(summary)
        self._write()

    def set_evaluating(self, iteration: int) -> None:
        with self._lock:
            if self._progress:
                self._progress.state = "evaluating"
                self._progress.iteration = iteration
        self._write()

    def set_eval_result(self, means: dict[str, dict[str, float]]) -> None:
        with self._lock:
            if self._progress:
                self._progress.last_eval = means
        self._write()

    def set_done(self, iteration: int, gaussians: int) -> None:
        with self._lock:
            if self._progress:
                self._progress.state = "done"
                self._progress.iteration = iteration
                self._progress.gaussians = gaussians
        self._write()

    def _write(self) -> None:
        with self._lock:
            payload = {
                "pid": os.getpid(),
                "started": self._started,
                "updated_at": _now_iso(),
                "progress": asdict(self._progress) if self._progress else None,
            }
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2, allow_nan=True))
        os.replace(tmp, self._path)


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
