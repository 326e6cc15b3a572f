"""Accuracy-matrix bookkeeping and the ACC / BWT summary metrics.

R[i, j] is the test accuracy on domain j after finishing task i (task 0 =
source training), so the matrix is lower-triangular with N+1 rows for N
target domains.

ACC is the mean of the final row. Note the sum has N+1 terms; dividing by
N+1 is the true mean (default), while ``denominator_n=True`` reproduces the
historical 1/N normalization, which exceeds 1 for a perfect model and is
kept only for comparability.
"""

from __future__ import annotations

import numpy as np

from . import model
from .model import Batch, ParamVector


class AccuracyMatrix:
    """Lower-triangular accuracy records R[i, j], 0 <= j <= i <= N."""

    def __init__(self, num_targets: int):
        if num_targets < 0:
            raise ValueError("num_targets must be >= 0")
        self.num_targets = num_targets
        n = num_targets + 1
        self.values = np.full((n, n), np.nan)

    def set(self, i: int, j: int, value: float):
        if not 0 <= j <= i <= self.num_targets:
            raise ValueError(f"entry ({i}, {j}) is outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.values[i, j] = value

    def get(self, i: int, j: int) -> float:
        if not 0 <= j <= i <= self.num_targets:
            raise ValueError(f"entry ({i}, {j}) is outside the lower triangle")
        v = self.values[i, j]
        if np.isnan(v):
            raise ValueError(f"entry ({i}, {j}) has not been filled")
        return float(v)

    def row(self, i: int) -> np.ndarray:
        return self.values[i, : i + 1]

    def rows_list(self) -> list[list[float]]:
        """Ragged lower triangle as plain floats (JSON-friendly)."""
        return [[float(v) for v in self.row(i)] for i in range(self.num_targets + 1)]

    @classmethod
    def from_rows(cls, rows: list[list[float]]) -> "AccuracyMatrix":
        mat = cls(len(rows) - 1)
        for i, row in enumerate(rows):
            if len(row) != i + 1:
                raise ValueError(f"row {i} must have {i + 1} entries")
            for j, v in enumerate(row):
                mat.set(i, j, float(v))
        return mat

    def save_csv(self, path):
        n = self.num_targets + 1
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("task," + ",".join(f"domain_{j}" for j in range(n)) + "\n")
            for i in range(n):
                cells = [f"{self.values[i, j]:.17g}" if j <= i else ""
                         for j in range(n)]
                fh.write(f"{i}," + ",".join(cells) + "\n")

    @classmethod
    def load_csv(cls, path) -> "AccuracyMatrix":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        rows = []
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")[1:]
            rows.append([float(c) for c in cells if c != ""])
        return cls.from_rows(rows)


def evaluate_accuracy(params: ParamVector, test: Batch) -> float:
    """Fraction of argmax-correct predictions (ties -> lowest class index)."""
    if test.labels is None:
        raise ValueError("evaluation requires a labeled batch")
    if len(test) == 0:
        raise ValueError("empty test set")
    _, logits = model.forward(params, test.inputs)
    return float((logits.argmax(axis=1) == test.labels).mean())


def compute_acc(R: AccuracyMatrix, denominator_n: bool = False) -> float:
    """Mean of the final row; ``denominator_n`` divides the (N+1)-term sum
    by N instead of N+1 (legacy normalization, can exceed 1)."""
    final = R.row(R.num_targets)
    if np.any(np.isnan(final)):
        raise ValueError("final row is incomplete")
    total = float(final.sum())
    if denominator_n:
        if R.num_targets == 0:
            raise ValueError("legacy ACC normalization undefined for N = 0")
        return total / R.num_targets
    return total / (R.num_targets + 1)


def compute_bwt(R: AccuracyMatrix) -> float:
    """Mean of R[N, i] - R[i, i] over i = 1..N-1; needs N >= 2."""
    n = R.num_targets
    if n < 2:
        raise ValueError("BWT requires at least two target domains")
    terms = [R.get(n, i) - R.get(i, i) for i in range(1, n)]
    return float(np.mean(terms))
