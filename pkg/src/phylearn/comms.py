"""QPSK over AWGN: optimal and learned detection, SER estimation, region maps.

Received signals live in real 2-space. Batches are column-stacked, shape
``(2, N)``. A *detector* is any callable mapping such a batch to an integer
class array of length ``N``; :func:`ml_detector` and :func:`nn_detector`
build them.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from phylearn.dataset import TrainingSet
from phylearn.errors import InvalidParameterError, ShapeError
from phylearn.nn import Activation, Network, TrainConfig, forward, init_network, train
from phylearn.numerics import RngStream

__all__ = [
    "AwgnChannel",
    "Constellation",
    "RegionGrid",
    "distance_features",
    "generate_detection_dataset",
    "ml_detect",
    "ml_detector",
    "nn_detect",
    "nn_detector",
    "qpsk",
    "rasterize_regions",
    "ser_monte_carlo",
    "train_detector",
    "transmit",
    "write_regions_csv",
    "write_regions_ppm",
    "write_ser_csv",
]

Detector = Callable[[np.ndarray], np.ndarray]

# Monte Carlo work is cut into fixed chunks, each with its own substream, so
# the result does not depend on the worker count.
MC_CHUNK = 65536

PALETTE = ((230, 159, 0), (86, 180, 233), (0, 158, 115), (204, 121, 167))


@dataclass(frozen=True)
class Constellation:
    points: np.ndarray  # (2, M), one point per column
    labels: tuple[str, ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != len(self.labels):
            raise ShapeError(f"{pts.shape} points for {len(self.labels)} labels")
        for i in range(pts.shape[1]):
            for j in range(i):
                if np.array_equal(pts[:, i], pts[:, j]):
                    raise InvalidParameterError(f"points {j} and {i} coincide")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return self.points.shape[1]

    @property
    def dim(self) -> int:
        return self.points.shape[0]


def qpsk() -> Constellation:
    """Four unit-norm points, one per quadrant, with two-bit labels.

    Class order: 0 = upper-right "11", 1 = lower-right "10",
    2 = upper-left "01", 3 = lower-left "00".
    """
    a = 1.0 / math.sqrt(2.0)
    pts = np.array([[a, a, -a, -a], [a, -a, a, -a]])
    return Constellation(pts, ("11", "10", "01", "00"))


@dataclass(frozen=True)
class AwgnChannel:
    noise_variance: float

    def __post_init__(self):
        if not (self.noise_variance >= 0 and math.isfinite(self.noise_variance)):
            raise InvalidParameterError(f"noise variance must be >= 0, got {self.noise_variance}")


def transmit(ch: AwgnChannel, s, rng: RngStream) -> np.ndarray:
    """Add N(0, sigma^2 I) noise to a 2-vector or a ``(2, N)`` batch."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] != 2 or s.ndim > 2:
        raise ShapeError(f"expected a 2-vector or (2, N) batch, got shape {s.shape}")
    return s + rng.normal(s.shape, math.sqrt(ch.noise_variance))


def ml_detect(c: Constellation, r) -> np.ndarray | int:
    """Index of the nearest constellation point; ties go to the lowest index."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    rr = r[:, None] if single else r
    if rr.shape[0] != c.dim:
        raise ShapeError(f"received width {rr.shape[0]} != constellation dim {c.dim}")
    d2 = ((rr[:, None, :] - c.points[:, :, None]) ** 2).sum(axis=0)
    idx = np.argmin(d2, axis=0)
    return int(idx[0]) if single else idx


def distance_features(c: Constellation, r) -> np.ndarray:
    """Euclidean distances from each received column to every constellation point."""
    r = np.asarray(r, dtype=np.float64)
    rr = r[:, None] if r.ndim == 1 else r
    d = np.sqrt(((rr[:, None, :] - c.points[:, :, None]) ** 2).sum(axis=0))
    return d[:, 0] if r.ndim == 1 else d


def nn_detect(net: Network, r, n_classes: int | None = None, features: Constellation | None = None):
    """Argmax of the network output (lowest index wins ties).

    With ``features`` set, the network sees distances to those points instead
    of the raw received vector.
    """
    r = np.asarray(r, dtype=np.float64)
    if n_classes is not None and net.widths[-1] != n_classes:
        raise ShapeError(f"network emits {net.widths[-1]} scores for {n_classes} classes")
    x = distance_features(features, r) if features is not None else r
    out = forward(net, x)
    return int(np.argmax(out)) if out.ndim == 1 else np.argmax(out, axis=0)


def ml_detector(c: Constellation) -> Detector:
    return lambda r: ml_detect(c, r)


def nn_detector(net: Network, features: Constellation | None = None) -> Detector:
    return lambda r: nn_detect(net, r, features=features)


def generate_detection_dataset(
    c: Constellation,
    noise_variance: float,
    per_point: int,
    rng: RngStream,
    features: bool = False,
) -> TrainingSet:
    """``per_point`` noisy copies of every point; targets are one-hot classes.

    Columns are grouped by class, in constellation order.
    """
    if per_point < 1:
        raise InvalidParameterError(f"per_point must be >= 1, got {per_point}")
    ch = AwgnChannel(noise_variance)
    m = len(c)
    classes = np.repeat(np.arange(m), per_point)
    received = transmit(ch, c.points[:, classes], rng)
    inputs = distance_features(c, received) if features else received
    return TrainingSet(inputs, np.eye(m)[:, classes])


def train_detector(
    data: TrainingSet,
    hidden: tuple[int, ...] = (16, 16),
    cfg: TrainConfig | None = None,
) -> tuple[Network, list[float]]:
    """Train a relu MLP with softmax output on a one-hot detection set."""
    cfg = cfg or TrainConfig(loss="cross-entropy", epochs=50, batch_size=128)
    widths = (data.input_width, *hidden, data.target_width)
    acts = [Activation.RELU] * len(hidden) + [Activation.SOFTMAX]
    net = init_network(widths, acts, cfg.seed)
    return train(net, data, cfg)


def _ser_chunk(detector: Detector, c: Constellation, sigma: float, n: int, rng: RngStream) -> int:
    sent = rng.integers(len(c), n)
    received = c.points[:, sent] + rng.normal((c.dim, n), sigma)
    return int(np.count_nonzero(detector(received) != sent))


def ser_monte_carlo(
    detector: Detector,
    c: Constellation,
    noise_variance: float,
    trials: int,
    rng: RngStream,
    workers: int = 1,
) -> tuple[float, float]:
    """Symbol error rate with its binomial standard error.

    Each trial draws a class uniformly, transmits it and detects it. Work is
    split into fixed-size chunks on distinct substreams, so ``workers`` does
    not change the result.
    """
    if trials < 1:
        raise InvalidParameterError(f"trials must be >= 1, got {trials}")
    AwgnChannel(noise_variance)
    sigma = math.sqrt(noise_variance)
    sizes = [min(MC_CHUNK, trials - s) for s in range(0, trials, MC_CHUNK)]
    jobs = [(n, rng.substream(i)) for i, n in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            errors = sum(pool.map(lambda j: _ser_chunk(detector, c, sigma, *j), jobs))
    else:
        errors = sum(_ser_chunk(detector, c, sigma, *j) for j in jobs)
    p = errors / trials
    return p, math.sqrt(p * (1.0 - p) / trials)


@dataclass(frozen=True)
class RegionGrid:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    resolution: tuple[int, int]
    cells: np.ndarray  # (ny, nx), row 0 at y_range[0]
    agreement_inside: float | None = None
    agreement_outside: float | None = None
    square: tuple[float, float] | None = None

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.resolution[0])

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(*self.y_range, self.resolution[1])


def rasterize_regions(
    detector: Detector,
    x_range: tuple[float, float] = (-5.0, 5.0),
    y_range: tuple[float, float] = (-5.0, 5.0),
    resolution: tuple[int, int] = (512, 512),
    reference: Detector | None = None,
    square: tuple[float, float] = (-1.5, 1.5),
) -> RegionGrid:
    """Classify every grid point (endpoints included).

    With a ``reference`` detector, also report the fraction of grid points on
    which both agree, separately for points inside the closed ``square``
    (applied to both axes) and outside it.
    """
    nx, ny = resolution
    if nx < 2 or ny < 2:
        raise InvalidParameterError(f"resolution must be >= 2 per axis, got {resolution}")
    for lo, hi in (x_range, y_range, square):
        if not lo < hi:
            raise InvalidParameterError(f"empty interval ({lo}, {hi})")
    xs = np.linspace(*x_range, nx)
    ys = np.linspace(*y_range, ny)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.vstack([gx.ravel(), gy.ravel()])
    cells = np.asarray(detector(pts)).reshape(ny, nx)
    inside = outside = None
    if reference is not None:
        agree = np.asarray(reference(pts)).reshape(ny, nx) == cells
        lo, hi = square
        mask = (gx >= lo) & (gx <= hi) & (gy >= lo) & (gy <= hi)
        inside = float(agree[mask].mean()) if mask.any() else math.nan
        outside = float(agree[~mask].mean()) if (~mask).any() else math.nan
    return RegionGrid(tuple(x_range), tuple(y_range), (nx, ny), cells, inside, outside, tuple(square))


def write_regions_csv(grid: RegionGrid, path) -> None:
    xs, ys = grid.xs, grid.ys
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,class\n")
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                fh.write(f"{x!r},{y!r},{int(grid.cells[j, i])}\n")


def write_regions_ppm(grid: RegionGrid, path, marks: Constellation | None = None, mark_radius: int = 2) -> None:
    """Plain PPM (P3), top row = largest y. Constellation points are drawn in black."""
    nx, ny = grid.resolution
    rgb = np.array(PALETTE, dtype=np.int64)[grid.cells % len(PALETTE)]
    if marks is not None:
        (x0, x1), (y0, y1) = grid.x_range, grid.y_range
        for px, py in marks.points.T:
            ci = round((px - x0) / (x1 - x0) * (nx - 1))
            cj = round((py - y0) / (y1 - y0) * (ny - 1))
            rgb[max(cj - mark_radius, 0):cj + mark_radius + 1,
                max(ci - mark_radius, 0):ci + mark_radius + 1] = 0
    rgb = rgb[::-1]
    with open(os.fspath(path), "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"P3\n{nx} {ny}\n255\n")
        for row in rgb:
            fh.write(" ".join(f"{r} {g} {b}" for r, g, b in row) + "\n")


def write_ser_csv(rows, path) -> None:
    """Rows of ``(sigma2, trials, ser, std_err)``, optionally prefixed by a detector name."""
    rows = list(rows)
    named = bool(rows) and isinstance(rows[0][0], str)
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(("detector," if named else "") + "sigma2,trials,ser,std_err\n")
        for row in rows:
            head = [row[0]] if named else []
            s2, n, p, se = row[-4:]
            fh.write(",".join(head + [repr(float(s2)), str(int(n)), repr(float(p)), repr(float(se))]) + "\n")
