"""Accuracy metrics and the two trivial reference baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 3


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of empty inputs")
    return float(np.mean(predictions == labels))


def confusion_matrix(predictions, labels) -> np.ndarray:
    """3x3 matrix, rows true class, columns predicted class."""
    matrix = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for pred, true in zip(np.asarray(predictions), np.asarray(labels), strict=True):
        matrix[int(true), int(pred)] += 1
    return matrix


def random_baseline(labels, rng: np.random.Generator) -> float:
    """Uniform predictions over the three classes."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("random_baseline of empty labels")
    return accuracy(rng.integers(0, NUM_CLASSES, size=labels.size), labels)


def ticker_following_baseline(history: dict[str, list[int]]) -> float:
    """Previous period's label as the prediction; first observations drop out."""
    hits = 0
    total = 0
    for ticker in sorted(history):
        labels = history[ticker]
        for prev, cur in zip(labels, labels[1:]):
            hits += int(prev == cur)
            total += 1
    if total == 0:
        raise ValueError("ticker_following_baseline: no consecutive observations")
    return hits / total


@dataclass
class EvalReport:
    split: str
    accuracy: float
    precision: list[float]
    recall: list[float]
    confusion: list[list[int]]
    baselines: dict[str, float] = field(default_factory=dict)

    def validate(self) -> "EvalReport":
        matrix = np.asarray(self.confusion)
        supports = matrix.sum(axis=1)
        total = int(matrix.sum())
        if total and abs(self.accuracy - np.trace(matrix) / total) > 1e-9:
            raise ValueError("accuracy does not equal confusion trace / total")
        if (supports < 0).any():
            raise ValueError("negative class support")
        return self

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "accuracy": self.accuracy,
                "precision": self.precision,
                "recall": self.recall,
                "confusion": self.confusion,
                "baselines": self.baselines,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def render_table(self) -> str:
        """Plain-text accuracy table with the baselines alongside."""
        lines = [
            f"split: {self.split}",
            f"{'method':<18}{'accuracy':>10}",
            "-" * 28,
            f"{'model':<18}{self.accuracy:>10.4f}",
        ]
        for name in sorted(self.baselines):
            lines.append(f"{name:<18}{self.baselines[name]:>10.4f}")
        lines.append("")
        lines.append("confusion (rows true, cols predicted):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:>6d}" for v in row))
        return "\n".join(lines) + "\n"


def evaluate_predictions(
    split: str, predictions, labels, baselines: dict[str, float] | None = None
) -> EvalReport:
    matrix = confusion_matrix(predictions, labels)
    precision, recall = [], []
    for c in range(NUM_CLASSES):
        col = matrix[:, c].sum()
        row = matrix[c, :].sum()
        precision.append(float(matrix[c, c] / col) if col else 0.0)
        recall.append(float(matrix[c, c] / row) if row else 0.0)
    return EvalReport(
        split=split,
        accuracy=accuracy(predictions, labels),
        precision=precision,
        recall=recall,
        confusion=matrix.tolist(),
        baselines=baselines or {},
    ).validate()
