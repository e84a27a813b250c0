"""Learned inversion of a memoryless nonlinearity versus a Bussgang baseline.

A nonlinearity ``g`` distorts a signal ``y`` element-wise into ``x = g(y)``.
The baseline models ``g(y) = D y + n`` with ``D = E[g(y) y] / E[y^2]`` and
equalizes by ``x / D``; the learned route trains a network on ``(g(y), y)``
pairs to map ``x`` back to ``y``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from phylearn.approx import nmse
from phylearn.dataset import TrainingSet, split
from phylearn.errors import InvalidParameterError, NumericDegeneracyError
from phylearn.nn import Network, TrainConfig, forward, init_network, train
from phylearn.numerics import RngStream

__all__ = [
    "BussgangDecomposition",
    "InversionReport",
    "Nonlinearity",
    "apply_nonlinearity",
    "biased_sampler",
    "bussgang_decompose",
    "evaluate_inverse",
    "gaussian_sampler",
    "generate_inversion_dataset",
    "hard_limiter",
    "refresh_inverse",
    "train_inverse",
    "write_comparison_csv",
]

KINDS = ("identity", "linear", "soft-limiter", "tanh-saturation", "rapp", "uniform-quantizer")


@dataclass(frozen=True)
class Nonlinearity:
    """Element-wise distortion.

    kinds and their parameters:

    * ``identity``
    * ``linear``: ``gain * y``
    * ``soft-limiter``: ``clip(y, -clip, clip)``
    * ``tanh-saturation``: ``tanh(drive * y)``
    * ``rapp``: ``y / (1 + |y / saturation|^(2p))^(1 / 2p)`` with ``p = smoothness``
    * ``uniform-quantizer``: mid-rise, ``2**bits`` levels spanning ``[-range, range]``
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown nonlinearity {self.kind!r}")
        p = dict(self.params)
        required = {
            "linear": ("gain",),
            "soft-limiter": ("clip",),
            "tanh-saturation": ("drive",),
            "rapp": ("smoothness", "saturation"),
            "uniform-quantizer": ("bits", "range"),
        }.get(self.kind, ())
        for name in required:
            if name not in p:
                raise InvalidParameterError(f"{self.kind} needs parameter {name!r}")
        for name in ("clip", "drive", "saturation", "range"):
            if name in p and not p[name] > 0:
                raise InvalidParameterError(f"{name} must be > 0, got {p[name]}")
        if "smoothness" in p and not p["smoothness"] >= 1:
            raise InvalidParameterError(f"smoothness must be >= 1, got {p['smoothness']}")
        if "bits" in p:
            if int(p["bits"]) != p["bits"] or p["bits"] < 1:
                raise InvalidParameterError(f"bits must be a positive integer, got {p['bits']}")
            p["bits"] = int(p["bits"])
        object.__setattr__(self, "params", p)

    def __call__(self, y):
        return apply_nonlinearity(self, y)

    def describe(self) -> str:
        return ";".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))


def hard_limiter() -> Nonlinearity:
    """``sign(y)`` as a one-bit quantizer with levels at -1 and +1."""
    return Nonlinearity("uniform-quantizer", {"bits": 1, "range": 2.0})


def apply_nonlinearity(g: Nonlinearity, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    p = g.params
    if g.kind == "identity":
        return y.copy()
    if g.kind == "linear":
        return p["gain"] * y
    if g.kind == "soft-limiter":
        return np.clip(y, -p["clip"], p["clip"])
    if g.kind == "tanh-saturation":
        return np.tanh(p["drive"] * y)
    if g.kind == "rapp":
        two_p = 2.0 * p["smoothness"]
        return y / (1.0 + np.abs(y / p["saturation"]) ** two_p) ** (1.0 / two_p)
    levels = 2 ** p["bits"]
    step = 2.0 * p["range"] / levels
    idx = np.clip(np.floor(y / step), -levels // 2, levels // 2 - 1)
    return (idx + 0.5) * step


@dataclass(frozen=True)
class BussgangDecomposition:
    gain: float
    residual_variance: float
    input_variance: float
    sample_count: int
    residual_correlation: float = 0.0


def gaussian_sampler(variance: float = 1.0, dim: int = 1):
    """Zero-mean Gaussian signal columns, shape ``(dim, n)``."""
    if not variance > 0:
        raise InvalidParameterError(f"variance must be > 0, got {variance}")
    sd = math.sqrt(variance)
    return lambda rng, n: rng.normal((dim, n), sd)


def biased_sampler(variance: float = 1.0, tail_fraction: float = 0.2, tail_scale: float = 2.0, dim: int = 1):
    """Gaussian mixture that over-represents large amplitudes.

    A ``tail_fraction`` of samples get their standard deviation multiplied by
    ``tail_scale``.
    """
    if not 0.0 <= tail_fraction <= 1.0:
        raise InvalidParameterError(f"tail fraction must lie in [0, 1], got {tail_fraction}")
    sd = math.sqrt(variance)

    def sample(rng, n):
        scale = np.where(rng.uniform(0.0, 1.0, (dim, n)) < tail_fraction, tail_scale * sd, sd)
        return rng.normal((dim, n)) * scale

    return sample


def bussgang_decompose(g: Nonlinearity, input_variance: float, samples: int, rng: RngStream) -> BussgangDecomposition:
    """Estimate the scalar Bussgang gain from ``samples`` draws of N(0, input_variance)."""
    if samples < 2:
        raise InvalidParameterError(f"need at least 2 samples, got {samples}")
    if not input_variance > 0:
        raise InvalidParameterError(f"input variance must be > 0, got {input_variance}")
    y = rng.normal(samples, math.sqrt(input_variance))
    x = apply_nonlinearity(g, y)
    power = float(np.mean(y * y))
    if power <= 0.0:
        raise NumericDegeneracyError("empirical input variance is zero")
    gain = float(np.mean(x * y)) / power
    resid = x - gain * y
    resid_var = float(np.mean(resid * resid))
    denom = math.sqrt(resid_var * power)
    corr = float(np.mean(resid * y)) / denom if denom > 0 else 0.0
    return BussgangDecomposition(gain, resid_var, input_variance, samples, corr)


def generate_inversion_dataset(g: Nonlinearity, sampler, T: int, rng: RngStream) -> TrainingSet:
    """Inputs are distorted signals ``g(y)``, targets the clean ``y``."""
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    y = np.asarray(sampler(rng, T), dtype=np.float64)
    return TrainingSet(apply_nonlinearity(g, y), y)


def train_inverse(
    g: Nonlinearity,
    sampler,
    T: int,
    widths,
    activations,
    cfg: TrainConfig,
    holdout_fraction: float = 0.2,
) -> tuple[Network, float]:
    data = generate_inversion_dataset(g, sampler, T, RngStream(cfg.seed, 5))
    train_set, holdout = split(data, holdout_fraction, RngStream(cfg.seed, 2))
    net = init_network(widths, activations, cfg.seed)
    net, _ = train(net, train_set, cfg)
    return net, nmse(holdout.targets, forward(net, holdout.inputs))


def refresh_inverse(
    net: Network,
    data: TrainingSet,
    g: Nonlinearity,
    sampler,
    new_samples: int,
    cfg: TrainConfig,
    rng: RngStream,
) -> tuple[Network, TrainingSet, list[float]]:
    """Online update: append freshly measured reference pairs and keep training."""
    fresh = generate_inversion_dataset(g, sampler, new_samples, rng)
    data = data.append(fresh)
    net, history = train(net, data, cfg)
    return net, data, history


@dataclass(frozen=True)
class InversionReport:
    learned_nmse: float
    bussgang_nmse: float
    errors: np.ndarray  # per-sample |f(g(y)) - y|, flattened

    @property
    def gain_db(self) -> float:
        """How far the learned NMSE sits below the baseline, in dB."""
        if self.learned_nmse == self.bussgang_nmse:
            return 0.0
        if self.learned_nmse == 0.0:
            return math.inf
        if self.bussgang_nmse == 0.0:
            return -math.inf
        return 10.0 * math.log10(self.bussgang_nmse / self.learned_nmse)

    def error_quantiles(self, qs=(0.5, 0.9, 0.99, 0.999, 1.0)) -> dict[float, float]:
        return {q: float(np.quantile(self.errors, q)) for q in qs}


def evaluate_inverse(
    learned: Network,
    bd: BussgangDecomposition,
    g: Nonlinearity,
    sampler,
    trials: int,
    rng: RngStream,
) -> InversionReport:
    """Compare both equalizers on ``trials`` fresh signals."""
    if trials < 1:
        raise InvalidParameterError(f"trials must be >= 1, got {trials}")
    if bd.gain == 0.0:
        raise NumericDegeneracyError("Bussgang gain is zero; the linear equalizer is undefined")
    y = np.asarray(sampler(rng, trials), dtype=np.float64)
    x = apply_nonlinearity(g, y)
    y_nn = forward(learned, x)
    return InversionReport(nmse(y, y_nn), nmse(y, x / bd.gain), np.abs(y_nn - y).ravel())


def write_comparison_csv(rows, path) -> None:
    """Rows of ``(Nonlinearity, InversionReport)``."""
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind,params,learned_nmse,bussgang_nmse,gain_db\n")
        for g, rep in rows:
            fh.write(
                f"{g.kind},{g.describe()},{rep.learned_nmse!r},{rep.bussgang_nmse!r},{rep.gain_db!r}\n"
            )
