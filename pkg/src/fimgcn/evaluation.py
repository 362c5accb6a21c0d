"""Confusion matrices, balanced accuracy, multi-seed aggregation and attention-map export."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def confusion_matrix(y_true, y_pred, num_classes: int = 2) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def classwise_accuracy(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    totals = cm.sum(axis=1)
    if np.any(totals == 0):
        empty = np.flatnonzero(totals == 0).tolist()
        raise ValueError(f"classes {empty} have no samples")
    return np.diag(cm) / totals


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean of per-class recalls."""
    return float(classwise_accuracy(cm).mean())


def aggregate_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); std is 0 for a single run."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no runs to aggregate")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), std


def format_mean_std(mean: float, std: float) -> str:
    """Percent formatting, e.g. ``78.79 ± 5.76``."""
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def metrics_report(y_true, y_pred, num_classes: int = 2, **fields) -> dict:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    return {
        **fields,
        "confusion": cm.tolist(),
        "classwise_acc": classwise_accuracy(cm).tolist(),
        "balanced_acc": balanced_accuracy(cm),
    }


def aggregate_report(reports: Sequence[dict]) -> dict:
    mean, std = aggregate_seeds([r["balanced_acc"] for r in reports])
    first = reports[0]
    return {
        "fim_item": first.get("fim_item"),
        "action": first.get("action"),
        "runs": list(reports),
        "mean": mean,
        "std": std,
        "n_seeds": len(reports),
    }


@dataclass
class AttentionMap:
    weights: np.ndarray  # [T_out, J], alpha * beta
    sequence_id: str
    joint_names: tuple[str, ...]
    downsample: int = 1

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("attention weights must be nonnegative")

    def joint_totals(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# sequence={self.sequence_id} temporal_downsample={self.downsample}\n")
            writer = csv.writer(fh)
            writer.writerow(["frame", "joint", "weight"])
            for t in range(self.weights.shape[0]):
                for j, name in enumerate(self.joint_names):
                    writer.writerow([t, name, repr(float(self.weights[t, j]))])


def read_attention_csv(path: str | Path) -> tuple[dict, list[tuple[int, str, float]]]:
    meta: dict = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for item in first[1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
        else:
            fh.seek(0)
        for rec in csv.DictReader(fh):
            rows.append((int(rec["frame"]), rec["joint"], float(rec["weight"])))
    return meta, rows


def attention_map(alpha: np.ndarray, beta: np.ndarray, sequence_id: str,
                  joint_names: Sequence[str], downsample: int = 1) -> AttentionMap:
    """Combine spatial [T_out, J] and temporal [T_out] weights for one sequence."""
    return AttentionMap(np.asarray(alpha) * np.asarray(beta)[:, None], sequence_id,
                        tuple(joint_names), downsample)


def export_attention(X: np.ndarray, params, config, partition, joint_names: Sequence[str],
                     sequence_id: str = "sequence") -> AttentionMap:
    """Run one [9, T, J] sample through an attention-enabled model and return its map."""
    from .model import forward

    if not config.use_attention:
        raise ValueError("model was trained without attention; no map to export")
    acts = forward(X[None], params, config, partition)
    downsample = int(np.prod([s for _, _, s in config.block_specs]))
    return attention_map(acts.alpha.value[0], acts.beta.value[0], sequence_id, joint_names, downsample)
