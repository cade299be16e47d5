"""Run metrics: accuracy, expected calibration error, report records."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

REPORT_FIELDS = [
    "scenario", "stream_seed", "accuracy", "uploads", "upload_fraction",
    "queue_drops", "ece", "param_payload_bytes", "steps", "wall_time_s",
]


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {labels.shape}")
    return float(np.mean(predicted == labels))


def ece_from_confidence(confidences: np.ndarray, correct: np.ndarray,
                        bins: int = 15) -> float:
    """Equal-width binning of max-probability confidence.

    ECE = sum_b (n_b / n) * |acc_b - conf_b|. Confidence 1.0 lands in the
    last bin.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidences.shape != correct.shape:
        raise ValueError("confidences and correct must align")
    n = confidences.size
    if n == 0:
        raise ValueError("need at least one prediction")
    idx = np.minimum((confidences * bins).astype(int), bins - 1)
    ece = 0.0
    for b in range(bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        acc_b = correct[mask].mean()
        conf_b = confidences[mask].mean()
        ece += (n_b / n) * abs(acc_b - conf_b)
    return float(ece)


def compute_ece(probs: np.ndarray, labels: np.ndarray, bins: int = 15) -> float:
    """ECE from a (n, C) probability matrix and true labels."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(labels)), pred]
    return ece_from_confidence(conf, pred == labels, bins=bins)


@dataclass
class RunReport:
    scenario: str
    stream_seed: int
    accuracy: float
    uploads: int
    upload_fraction: float
    queue_drops: int
    ece: float
    param_payload_bytes: int
    steps: int
    wall_time_s: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in REPORT_FIELDS}
        out["extra"] = dict(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> list:
        return [getattr(self, k) for k in REPORT_FIELDS]


def write_reports(out_dir, reports: list[RunReport]) -> None:
    """Emit report.json (list of dicts) and runs.csv with a fixed column set."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            writer.writerow(r.csv_row())
