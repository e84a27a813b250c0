import math

import numpy as np
import pytest

from phylearn.errors import InvalidParameterError, NumericDegeneracyError
from phylearn.inversion import (
    BussgangDecomposition,
    Nonlinearity,
    apply_nonlinearity,
    biased_sampler,
    bussgang_decompose,
    evaluate_inverse,
    gaussian_sampler,
    generate_inversion_dataset,
    hard_limiter,
    refresh_inverse,
    train_inverse,
    write_comparison_csv,
)
from phylearn.nn import DenseLayer, Network, TrainConfig, forward, init_network
from phylearn.numerics import RngStream
from phylearn.dataset import split
from phylearn.approx import nmse

IDENTITY = Nonlinearity("identity")
DOUBLE = Nonlinearity("linear", {"gain": 2.0})
TANH = Nonlinearity("tanh-saturation", {"drive": 1.0})
EXACT_IDENTITY_NET = Network((DenseLayer([[1.0]], [0.0]),))


class ZeroRng:
    def normal(self, size, scale=1.0):
        return np.zeros(size)


def test_apply_examples():
    y = np.array([0.5, 2.0, -3.0])
    assert np.array_equal(apply_nonlinearity(IDENTITY, y), y)
    soft = Nonlinearity("soft-limiter", {"clip": 1.0})
    assert np.array_equal(apply_nonlinearity(soft, y), [0.5, 1.0, -1.0])
    assert apply_nonlinearity(TANH, 0.0) == 0.0


def test_rapp_and_quantizer():
    rapp = Nonlinearity("rapp", {"smoothness": 2.0, "saturation": 1.0})
    y = np.array([0.0, 0.1, 100.0, -100.0])
    out = apply_nonlinearity(rapp, y)
    assert out[0] == 0.0 and out[1] == pytest.approx(0.1, rel=1e-3)
    assert out[2] == pytest.approx(1.0, rel=1e-6) and out[3] == pytest.approx(-1.0, rel=1e-6)
    q = Nonlinearity("uniform-quantizer", {"bits": 2, "range": 1.0})
    assert np.array_equal(apply_nonlinearity(q, [-5, -0.7, -0.2, 0.2, 0.7, 5]), [-0.75, -0.75, -0.25, 0.25, 0.75, 0.75])
    assert np.array_equal(apply_nonlinearity(hard_limiter(), [-3.0, -1e-9, 1e-9, 2.0]), [-1.0, -1.0, 1.0, 1.0])


@pytest.mark.parametrize(
    "kind,params",
    [("soft-limiter", {"clip": 0.0}), ("rapp", {"smoothness": 0.5, "saturation": 1.0}),
     ("uniform-quantizer", {"bits": 0, "range": 1.0}), ("tanh-saturation", {}), ("cubic", {})],
)
def test_nonlinearity_validation(kind, params):
    with pytest.raises(InvalidParameterError):
        Nonlinearity(kind, params)


def test_bussgang_linear_cases():
    bd = bussgang_decompose(IDENTITY, 0.7, 1000, RngStream(1))
    assert bd.gain == pytest.approx(1.0, abs=1e-15) and bd.residual_variance < 1e-30
    bd = bussgang_decompose(DOUBLE, 1.0, 1000, RngStream(1))
    assert bd.gain == pytest.approx(2.0, abs=1e-15) and bd.residual_variance < 1e-30


def test_bussgang_hard_limiter():
    bd = bussgang_decompose(hard_limiter(), 1.0, 10**6, RngStream(2))
    target = math.sqrt(2 / math.pi)  # E|y| for a standard normal y
    assert abs(bd.gain - target) < 0.01 * target
    assert abs(bd.residual_correlation) < 0.01


@pytest.mark.parametrize("g", [TANH, Nonlinearity("soft-limiter", {"clip": 0.5}), hard_limiter()])
def test_bussgang_residual_uncorrelated(g):
    bd = bussgang_decompose(g, 1.3, 10**6, RngStream(3))
    assert abs(bd.residual_correlation) < 3 / math.sqrt(10**6)


def test_bussgang_gain_reproducible_across_seeds():
    n = 200000
    a = bussgang_decompose(TANH, 1.0, n, RngStream(4, 0))
    b = bussgang_decompose(TANH, 1.0, n, RngStream(4, 1))
    # standard error of the ratio estimator: sd(y * residual) / (sqrt(n) * E[y^2])
    y = RngStream(4, 2).normal(n)
    resid = np.tanh(y) - a.gain * y
    se = np.std(y * resid) / math.sqrt(n)
    assert abs(a.gain - b.gain) < 3 * math.sqrt(2) * se


def test_bussgang_errors():
    with pytest.raises(InvalidParameterError):
        bussgang_decompose(TANH, 1.0, 1, RngStream(0))
    with pytest.raises(NumericDegeneracyError):
        bussgang_decompose(TANH, 1.0, 10, ZeroRng())


def test_inversion_dataset_contract():
    data = generate_inversion_dataset(IDENTITY, gaussian_sampler(), 100, RngStream(5))
    assert np.array_equal(data.inputs, data.targets)
    soft = Nonlinearity("soft-limiter", {"clip": 1.0})
    bounded = lambda rng, n: rng.uniform(-0.99, 0.99, (1, n))
    data = generate_inversion_dataset(soft, bounded, 100, RngStream(5))
    assert np.array_equal(data.inputs, data.targets)
    data = generate_inversion_dataset(TANH, gaussian_sampler(), 100, RngStream(5))
    assert np.array_equal(data.inputs, apply_nonlinearity(TANH, data.targets))


def test_train_inverse_identity():
    cfg = TrainConfig(learning_rate=1e-2, batch_size=32, epochs=100, seed=6)
    _, err = train_inverse(IDENTITY, gaussian_sampler(), 2000, (1, 1), ["identity"], cfg)
    assert err < 1e-8


def test_train_inverse_zero_epochs():
    cfg = TrainConfig(epochs=0, seed=7)
    net, err = train_inverse(TANH, gaussian_sampler(), 500, (1, 4, 1), ["tanh", "identity"], cfg)
    init = init_network((1, 4, 1), ["tanh", "identity"], 7)
    assert net.parameters().tobytes() == init.parameters().tobytes()
    data = generate_inversion_dataset(TANH, gaussian_sampler(), 500, RngStream(7, 5))
    _, hold = split(data, 0.2, RngStream(7, 2))
    assert err == nmse(hold.targets, forward(init, hold.inputs))


def test_train_inverse_tanh():
    cfg = TrainConfig(learning_rate=3e-3, batch_size=32, epochs=300, seed=1)
    _, err = train_inverse(TANH, gaussian_sampler(), 20000, (1, 32, 32, 1), ["tanh", "tanh", "identity"], cfg)
    assert err < 1e-3


def test_evaluate_identity_both_exact():
    bd = bussgang_decompose(IDENTITY, 1.0, 1000, RngStream(8))
    rep = evaluate_inverse(EXACT_IDENTITY_NET, bd, IDENTITY, gaussian_sampler(), 1000, RngStream(9))
    assert rep.learned_nmse == 0.0 and rep.bussgang_nmse < 1e-30
    assert rep.gain_db == pytest.approx(0.0, abs=1e-9) or rep.bussgang_nmse == 0.0


def test_evaluate_linear_gain_exactly_inverted():
    bd = bussgang_decompose(DOUBLE, 1.0, 1000, RngStream(8))
    rep = evaluate_inverse(EXACT_IDENTITY_NET, bd, DOUBLE, gaussian_sampler(), 1000, RngStream(9))
    assert rep.bussgang_nmse < 1e-28
    assert rep.errors.size == 1000


def test_evaluate_zero_gain():
    bd = BussgangDecomposition(0.0, 1.0, 1.0, 10)
    with pytest.raises(NumericDegeneracyError):
        evaluate_inverse(EXACT_IDENTITY_NET, bd, IDENTITY, gaussian_sampler(), 10, RngStream(0))


def test_error_distribution_reported():
    bd = bussgang_decompose(TANH, 1.0, 10000, RngStream(10))
    rep = evaluate_inverse(EXACT_IDENTITY_NET, bd, TANH, gaussian_sampler(), 5000, RngStream(11))
    q = rep.error_quantiles()
    assert rep.errors.size == 5000
    assert q[0.5] <= q[0.99] <= q[1.0] == rep.errors.max()


def test_biased_sampler_heavier_tails():
    a = gaussian_sampler(1.0)(RngStream(12), 100000)
    b = biased_sampler(1.0, 0.2, 3.0)(RngStream(12), 100000)
    assert np.mean(b ** 2) > 1.5 * np.mean(a ** 2)


def test_refresh_inverse_appends():
    cfg = TrainConfig(batch_size=16, epochs=2, seed=13)
    data = generate_inversion_dataset(TANH, gaussian_sampler(), 100, RngStream(13))
    net = init_network((1, 4, 1), ["tanh", "identity"], 13)
    net2, data2, history = refresh_inverse(net, data, TANH, gaussian_sampler(), 50, cfg, RngStream(14))
    assert len(data2) == 150 and len(history) == 2
    assert np.array_equal(data2.inputs[:, :100], data.inputs)


def test_comparison_csv(tmp_path):
    bd = bussgang_decompose(TANH, 1.0, 10000, RngStream(15))
    rep = evaluate_inverse(EXACT_IDENTITY_NET, bd, TANH, gaussian_sampler(), 100, RngStream(16))
    write_comparison_csv([(TANH, rep)], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "kind,params,learned_nmse,bussgang_nmse,gain_db"
    assert lines[1].startswith("tanh-saturation,drive=1.0,")
