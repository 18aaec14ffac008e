"""Evaluation scores and the per-epoch metrics CSV.

The CSV carries one row per (epoch, class) so downstream tooling can plot
per-class curves without re-parsing anything: the header is fixed and the
loss columns repeat the epoch means on every class row.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError

CSV_HEADER = ("epoch", "split", "class_id", "dsc", "dice_loss", "ce_loss",
              "trainable_fraction")


def dsc(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Hard-mask Dice similarity; two empty masks agree perfectly (1.0)."""
    if pred_mask.shape != true_mask.shape:
        raise ContractError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    p = pred_mask.astype(bool)
    t = true_mask.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def mean_class_dsc(per_class: Dict[int, float]) -> float:
    """Unweighted mean over whichever classes are present."""
    if not per_class:
        raise ContractError("no per-class scores to average")
    return float(np.mean(list(per_class.values())))


class MetricsWriter:
    """Append-only CSV writer for the fixed per-epoch schema."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)

    def write_epoch(self, epoch: int, split: str, per_class_dsc: Dict[int, float],
                    dice_loss: float, ce_loss: Optional[float],
                    trainable_fraction: float) -> None:
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh)
            for cid in sorted(per_class_dsc):
                writer.writerow([
                    epoch, split, cid,
                    f"{per_class_dsc[cid]:.6f}",
                    f"{dice_loss:.6f}",
                    "" if ce_loss is None else f"{ce_loss:.6f}",
                    f"{trainable_fraction:.6f}",
                ])


def read_metrics(path) -> list:
    """Rows as dicts with numeric fields parsed; ce_loss may be None."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ContractError(f"unexpected metrics header in {path}")
        for row in reader:
            rows.append({
                "epoch": int(row["epoch"]),
                "split": row["split"],
                "class_id": int(row["class_id"]),
                "dsc": float(row["dsc"]),
                "dice_loss": float(row["dice_loss"]),
                "ce_loss": None if row["ce_loss"] == "" else float(row["ce_loss"]),
                "trainable_fraction": float(row["trainable_fraction"]),
            })
    return rows
