"""Pieces shared by the two training loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eskin.autodiff import AdamState, adam_step

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "metric")


class TrainingError(RuntimeError):
    """Training cannot proceed: empty split or a non-finite loss."""


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    initial_loss: float = float("nan")
    checkpoint: Path | None = None


def write_history(path, history: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})
    return path


def check_finite(loss: float, epoch: int, batch: int):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def apply_update(model, state: AdamState, lr: float, epoch: int, batch: int) -> None:
    params = dict(model.named_parameters())
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    try:
        adam_step(params, grads, state, lr)
    except FloatingPointError as exc:
        raise TrainingError(f"{exc} at epoch {epoch}, batch {batch}") from exc
