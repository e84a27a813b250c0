"""Learning surrogates of known algorithms.

Two routes are covered. The first treats an algorithm as a black box: run it
on sampled inputs, fit a network to the input/output pairs and measure the
accuracy and throughput of the result (bisection water-filling is the
worked example). The second unrolls a fixed number of projected-gradient
iterations of a 2x2 BPSK least-squares detector and trains one step size per
layer.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from phylearn.dataset import TrainingSet, split
from phylearn.errors import InvalidParameterError, ShapeError, TrainingDivergedError
from phylearn.nn import (
    Network,
    TrainConfig,
    forward,
    init_network,
    read_flat_file,
    train,
    write_flat_file,
)
from phylearn.numerics import RngStream, as_matrix

__all__ = [
    "SpeedupReport",
    "UnfoldedDetector",
    "WaterfillingProblem",
    "benchmark_speedup",
    "bpsk_error_rate",
    "bpsk_mimo_batch",
    "gaussian_channels",
    "generate_algorithm_dataset",
    "load_unfolded",
    "ml_detect_bpsk",
    "nmse",
    "save_unfolded",
    "train_surrogate",
    "train_unfolded",
    "unfolded_mse",
    "unfolded_forward",
    "waterfill",
    "waterfill_batch",
    "waterfill_sampler",
]

UNFOLDED_TAG = "phylearn-unfolded"


# --------------------------------------------------------------------------
# water-filling


@dataclass(frozen=True)
class WaterfillingProblem:
    gains: np.ndarray
    total_power: float = 1.0

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64).ravel()
        if g.size < 1 or not np.isfinite(g).all() or (g <= 0).any():
            raise InvalidParameterError(f"gains must be finite and positive, got {g}")
        if not (self.total_power > 0 and math.isfinite(self.total_power)):
            raise InvalidParameterError(f"total power must be positive, got {self.total_power}")
        object.__setattr__(self, "gains", g)


def waterfill(p: WaterfillingProblem, tol: float = 1e-10) -> np.ndarray:
    """Power split ``p_k = max(0, mu - 1/g_k)`` with ``sum(p) = P``, by bisection on ``mu``.

    The total allocated power is piecewise linear in ``mu`` with slope between
    1 and K, so stopping once the bracket is narrower than ``tol / K`` puts the
    budget within ``tol``.
    """
    if not tol > 0:
        raise InvalidParameterError(f"tol must be positive, got {tol}")
    floor = 1.0 / p.gains
    lo = float(floor.min())
    hi = lo + p.total_power
    width = tol / floor.size
    while hi - lo > width:
        mu = 0.5 * (lo + hi)
        if np.maximum(mu - floor, 0.0).sum() > p.total_power:
            hi = mu
        else:
            lo = mu
        if hi - lo <= 2.0 * math.ulp(hi):
            break
    return np.maximum(0.5 * (lo + hi) - floor, 0.0)


def waterfill_batch(inputs, total_power: float = 1.0, tol: float = 1e-10) -> np.ndarray:
    """Apply :func:`waterfill` to every column of a ``(K, N)`` gain matrix."""
    g = as_matrix(inputs, "gains")
    out = np.empty_like(g)
    for t in range(g.shape[1]):
        out[:, t] = waterfill(WaterfillingProblem(g[:, t], total_power), tol)
    return out


def waterfill_sampler(k: int = 4, low: float = 0.1, high: float = 2.0):
    """Gains i.i.d. uniform on ``(low, high)``, as ``(k, n)`` columns."""
    return lambda rng, n: rng.uniform(low, high, (k, n))


# --------------------------------------------------------------------------
# black-box surrogates


def generate_algorithm_dataset(
    oracle: Callable[[np.ndarray], np.ndarray],
    sampler: Callable[[RngStream, int], np.ndarray],
    T: int,
    rng: RngStream,
) -> TrainingSet:
    """Draw ``T`` inputs from ``sampler`` and label each by running ``oracle`` on it.

    ``oracle`` receives one input column (1-D) and returns one output vector.
    A failure is re-raised as ``RuntimeError`` naming the sample index.
    """
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    x = np.asarray(sampler(rng, T), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != T:
        raise ShapeError(f"sampler returned shape {x.shape}, expected (n, {T})")
    outputs = []
    for t in range(T):
        try:
            outputs.append(np.asarray(oracle(x[:, t]), dtype=np.float64).ravel())
        except Exception as exc:
            raise RuntimeError(f"oracle failed on sample {t}: {exc}") from exc
    return TrainingSet(x, np.stack(outputs, axis=1))


def nmse(reference, estimate) -> float:
    """``sum ||y - y_hat||^2 / sum ||y||^2``."""
    y = np.asarray(reference, dtype=np.float64)
    d = y - np.asarray(estimate, dtype=np.float64)
    return float(np.sum(d * d) / np.sum(y * y))


def train_surrogate(
    data: TrainingSet,
    widths,
    activations,
    cfg: TrainConfig,
    holdout_fraction: float = 0.2,
) -> tuple[Network, float]:
    """Fit a network on a shuffled 80/20 split and return it with its holdout NMSE."""
    if widths[0] != data.input_width or widths[-1] != data.target_width:
        raise ShapeError(
            f"architecture {tuple(widths)} does not match data widths "
            f"({data.input_width}, {data.target_width})"
        )
    train_set, holdout = split(data, holdout_fraction, RngStream(cfg.seed, 2))
    net = init_network(widths, activations, cfg.seed)
    net, _ = train(net, train_set, cfg)
    return net, nmse(holdout.targets, forward(net, holdout.inputs))


@dataclass(frozen=True)
class SpeedupReport:
    oracle_time: float
    surrogate_time: float
    batch_size: int
    max_deviation: float
    mean_deviation: float

    @property
    def speedup(self) -> float:
        return self.oracle_time / self.surrogate_time


def _best_time(fn, inputs, repeats: int) -> tuple[float, np.ndarray]:
    out = fn(inputs)  # warm-up
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn(inputs)
        best = min(best, time.perf_counter() - start)
    return max(best, 1e-9), np.asarray(out)


def benchmark_speedup(oracle, surrogate: Network, inputs, repeats: int = 3) -> SpeedupReport:
    """Time ``oracle`` and the surrogate on the same ``(n, N)`` batch.

    Both get one untimed warm-up call, then the best of ``repeats`` timed
    calls is kept. ``oracle`` maps the whole batch to a ``(k, N)`` output.
    Deviations are per-column Euclidean distances between the two outputs.
    """
    x = as_matrix(inputs, "inputs")
    if x.shape[1] < 1:
        raise InvalidParameterError("empty batch")
    t_oracle, y_oracle = _best_time(oracle, x, repeats)
    t_sur, y_sur = _best_time(lambda b: forward(surrogate, b), x, repeats)
    dev = np.linalg.norm(y_oracle - y_sur, axis=0)
    return SpeedupReport(t_oracle, t_sur, x.shape[1], float(dev.max()), float(dev.mean()))


# --------------------------------------------------------------------------
# deep unfolding


@dataclass(frozen=True)
class UnfoldedDetector:
    """Unrolled projected gradient for ``min ||H x - r||^2`` over ``x`` in ``[-1, 1]^2``.

    Layer ``k`` computes ``clamp(x - alpha_k * H^T (H x - r), -1, 1)`` starting
    from ``x = 0``. ``channel`` is used when no per-sample channels are given.
    """

    channel: np.ndarray
    step_sizes: np.ndarray

    def __post_init__(self):
        h = as_matrix(self.channel, "channel")
        a = np.asarray(self.step_sizes, dtype=np.float64).ravel()
        if a.size < 1:
            raise InvalidParameterError("an unfolded detector needs at least one layer")
        if not np.isfinite(a).all() or (a <= 0).any():
            raise InvalidParameterError(f"step sizes must be positive, got {a}")
        object.__setattr__(self, "channel", h)
        object.__setattr__(self, "step_sizes", a)

    @classmethod
    def with_fixed_step(cls, channel, layers: int, step: float | None = None) -> "UnfoldedDetector":
        """Constant step; the default ``1 / (sqrt(n_r) + sqrt(n_t))^2`` matches the
        typical largest eigenvalue of ``H^T H`` for unit-variance Gaussian entries."""
        h = np.asarray(channel, dtype=np.float64)
        if layers < 1:
            raise InvalidParameterError(f"layer count must be >= 1, got {layers}")
        if step is None:
            step = 1.0 / (math.sqrt(h.shape[0]) + math.sqrt(h.shape[1])) ** 2
        return cls(h, np.full(layers, float(step)))

    @property
    def layers(self) -> int:
        return self.step_sizes.size


def _channels(d: UnfoldedDetector, r: np.ndarray, channels) -> np.ndarray:
    if channels is None:
        return np.broadcast_to(d.channel, (r.shape[0], *d.channel.shape))
    h = np.asarray(channels, dtype=np.float64)
    if h.ndim == 2:
        h = np.broadcast_to(h, (r.shape[0], *h.shape))
    if h.shape[0] != r.shape[0]:
        raise ShapeError(f"{h.shape[0]} channels for {r.shape[0]} received vectors")
    return h


def _unfold(d: UnfoldedDetector, r: np.ndarray, h: np.ndarray, step_sizes):
    x = np.zeros((r.shape[0], h.shape[2]))
    cache = []
    for a in step_sizes:
        grad = np.einsum("tji,tj->ti", h, np.einsum("tij,tj->ti", h, x) - r)
        u = x - a * grad
        cache.append((grad, u))
        x = np.clip(u, -1.0, 1.0)
    return x, cache


def unfolded_forward(d: UnfoldedDetector, r, channels=None) -> np.ndarray:
    """Run the unrolled iterations.

    ``r`` is one received vector or an ``(N, n_r)`` batch (rows are samples
    here, matching ``channels`` of shape ``(N, n_r, n_t)``).
    """
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    rr = r[None, :] if single else r
    h = _channels(d, rr, channels)
    if rr.shape[1] != h.shape[1]:
        raise ShapeError(f"received width {rr.shape[1]} != channel rows {h.shape[1]}")
    x, _ = _unfold(d, rr, h, d.step_sizes)
    return x[0] if single else x


def _unfolded_loss_grad(d, r, h, x_true, step_sizes):
    x, cache = _unfold(d, r, h, step_sizes)
    n = r.shape[0]
    loss = float(np.sum((x - x_true) ** 2) / n)
    dx = 2.0 * (x - x_true) / n
    hth = np.einsum("tki,tkj->tij", h, h)
    grad = np.zeros(len(step_sizes))
    for k in range(len(step_sizes) - 1, -1, -1):
        g, u = cache[k]
        du = dx * ((u > -1.0) & (u < 1.0))
        grad[k] = -np.sum(du * g)
        dx = du - step_sizes[k] * np.einsum("tij,tj->ti", hth, du)
    return loss, grad


def unfolded_mse(d: UnfoldedDetector, r, x_true, channels=None) -> float:
    r = np.asarray(r, dtype=np.float64)
    return _unfolded_loss_grad(d, r, _channels(d, r, channels), np.asarray(x_true), d.step_sizes)[0]


def gaussian_channels(n_r: int = 2, n_t: int = 2):
    """Sampler of i.i.d. N(0, 1) channel matrices, shape ``(N, n_r, n_t)``."""
    return lambda rng, n: rng.normal((n, n_r, n_t))


def bpsk_mimo_batch(channel_sampler, noise_variance: float, T: int, rng: RngStream, n_t: int = 2):
    """Uniform BPSK symbols through sampled channels plus AWGN.

    Returns ``(channels, symbols, received)`` with rows as samples. If
    ``channel_sampler`` is an array it is used as a fixed channel.
    """
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if noise_variance < 0:
        raise InvalidParameterError(f"noise variance must be >= 0, got {noise_variance}")
    if callable(channel_sampler):
        h = np.asarray(channel_sampler(rng, T), dtype=np.float64)
    else:
        fixed = np.asarray(channel_sampler, dtype=np.float64)
        h = np.broadcast_to(fixed, (T, *fixed.shape))
    n_t = h.shape[2]
    x = np.where(rng.integers(2, (T, n_t)) == 1, 1.0, -1.0)
    r = np.einsum("tij,tj->ti", h, x) + rng.normal((T, h.shape[1]), math.sqrt(noise_variance))
    return h, x, r


def train_unfolded(
    d: UnfoldedDetector,
    channel_sampler,
    noise_variance: float,
    T: int,
    cfg: TrainConfig,
    min_step: float = 1e-6,
) -> tuple[UnfoldedDetector, list[float]]:
    """Optimize the per-layer step sizes on ``T`` generated ``(r, x)`` pairs.

    Full-batch Adam (or SGD) on the mean squared symbol error, backpropagating
    through the unrolled iterations with zero slope at saturated clamps. Step
    sizes are kept at or above ``min_step``. ``cfg.epochs`` is the number of
    gradient steps; data come from ``RngStream(cfg.seed, 3)``.
    """
    if channel_sampler is None:
        channel_sampler = d.channel
    h, x_true, r = bpsk_mimo_batch(channel_sampler, noise_variance, T, RngStream(cfg.seed, 3))
    alpha = d.step_sizes.copy()
    m = np.zeros_like(alpha)
    v = np.zeros_like(alpha)
    history = []
    for step in range(1, cfg.epochs + 1):
        loss, grad = _unfolded_loss_grad(d, r, h, x_true, alpha)
        if not math.isfinite(loss) or not np.isfinite(grad).all():
            raise TrainingDivergedError(step, loss)
        history.append(loss)
        if cfg.optimizer == "adam":
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            update = (m / (1 - cfg.beta1 ** step)) / (np.sqrt(v / (1 - cfg.beta2 ** step)) + cfg.eps)
        else:
            update = grad
        alpha = np.maximum(alpha - cfg.learning_rate * update, min_step)
    trained = UnfoldedDetector(d.channel, alpha)
    if cfg.epochs:
        final = _unfolded_loss_grad(d, r, h, x_true, alpha)[0]
        if not math.isfinite(final):
            raise TrainingDivergedError(cfg.epochs, final)
        history.append(final)
    return trained, history


_BPSK_HYPOTHESES = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


def ml_detect_bpsk(channels, received) -> np.ndarray:
    """Exhaustive search over all sign vectors; rows are samples."""
    h = np.asarray(channels, dtype=np.float64)
    r = np.asarray(received, dtype=np.float64)
    n_t = h.shape[2]
    hyp = _BPSK_HYPOTHESES if n_t == 2 else np.array(
        [[1.0 - 2.0 * ((i >> b) & 1) for b in range(n_t - 1, -1, -1)] for i in range(2 ** n_t)]
    )
    d2 = ((r[:, None, :] - np.einsum("tij,cj->tci", h, hyp)) ** 2).sum(axis=-1)
    return hyp[np.argmin(d2, axis=1)]


def bpsk_error_rate(decisions, symbols) -> float:
    """Fraction of symbols whose sign is wrong (a zero decision counts as an error)."""
    return float(np.mean(np.sign(decisions) != np.asarray(symbols)))


def save_unfolded(d: UnfoldedDetector, path) -> None:
    write_flat_file(
        path,
        UNFOLDED_TAG,
        {"layers": [d.layers], "channel_shape": d.channel.shape},
        np.concatenate([d.channel.ravel(), d.step_sizes]),
    )


def load_unfolded(path) -> UnfoldedDetector:
    header, values = read_flat_file(path, UNFOLDED_TAG)
    layers = int(header["layers"][0])
    rows, cols = (int(v) for v in header["channel_shape"])
    if values.size != rows * cols + layers:
        raise ShapeError(f"expected {rows * cols + layers} values, found {values.size}")
    return UnfoldedDetector(values[:rows * cols].reshape(rows, cols), values[rows * cols:])


def write_report_csv(path, header, rows) -> None:
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
