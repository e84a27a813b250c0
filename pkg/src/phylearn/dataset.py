"""Column-stacked training sets: splitting and CSV persistence.

CSV layout: one example per row, input entries followed by target entries,
under a single header row ``x1,...,xn,y1,...,yk``. Values are written with
``repr`` so that a save/load round trip is exact.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from phylearn.errors import InvalidParameterError, ParseError, ShapeError
from phylearn.numerics import RngStream, as_matrix

__all__ = ["TrainingSet", "load_csv", "save_csv", "split"]


@dataclass(frozen=True)
class TrainingSet:
    """Inputs ``(n0, T)`` and targets ``(k, T)``; column ``t`` is example ``t``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = as_matrix(self.inputs, "inputs")
        y = as_matrix(self.targets, "targets")
        if x.shape[1] != y.shape[1]:
            raise ShapeError(f"{x.shape[1]} input columns but {y.shape[1]} target columns")
        if x.shape[1] < 1:
            raise InvalidParameterError("a training set needs at least one example")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_width(self) -> int:
        return self.inputs.shape[0]

    @property
    def target_width(self) -> int:
        return self.targets.shape[0]

    def subset(self, columns) -> "TrainingSet":
        return TrainingSet(self.inputs[:, columns], self.targets[:, columns])

    def append(self, other: "TrainingSet") -> "TrainingSet":
        return TrainingSet(
            np.hstack([self.inputs, other.inputs]),
            np.hstack([self.targets, other.targets]),
        )


def split(data: TrainingSet, holdout_fraction: float, rng: RngStream) -> tuple[TrainingSet, TrainingSet]:
    """Shuffle columns and carve off ``ceil(T * holdout_fraction)`` of them as holdout."""
    if not 0.0 < holdout_fraction < 1.0:
        raise InvalidParameterError(f"holdout fraction must lie in (0, 1), got {holdout_fraction}")
    t = len(data)
    n_hold = math.ceil(t * holdout_fraction)
    if n_hold >= t:
        raise InvalidParameterError(f"split of {t} examples at {holdout_fraction} leaves no training data")
    order = rng.permutation(t)
    return data.subset(np.sort(order[n_hold:])), data.subset(np.sort(order[:n_hold]))


def save_csv(data: TrainingSet, path) -> None:
    n, k = data.input_width, data.target_width
    header = [f"x{i}" for i in range(1, n + 1)] + [f"y{i}" for i in range(1, k + 1)]
    rows = np.vstack([data.inputs, data.targets]).T
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path) -> TrainingSet:
    with open(os.fspath(path), encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise InvalidParameterError(f"{path}: empty file")
    header = lines[0].split(",")
    n = sum(1 for h in header if h.startswith("x"))
    k = sum(1 for h in header if h.startswith("y"))
    expected = [f"x{i}" for i in range(1, n + 1)] + [f"y{i}" for i in range(1, k + 1)]
    if header != expected or n == 0 or k == 0:
        raise ParseError(f"bad header {lines[0]!r}", 1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != n + k:
            raise ParseError(f"expected {n + k} fields, found {len(fields)}", lineno)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError("non-numeric field", lineno) from None
    if not rows:
        raise InvalidParameterError(f"{path}: no examples")
    arr = np.array(rows).T
    return TrainingSet(arr[:n], arr[n:])
