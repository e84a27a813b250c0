import numpy as np
import pytest

from phylearn.nn import cross_entropy_loss, mse_loss


def finite_difference_gradient(net, x, y, loss="mse", step=1e-6):
    """Central differences of the single-example loss, in the flat parameter layout."""
    theta = net.parameters()
    fn = mse_loss if loss == "mse" else cross_entropy_loss
    data = (np.asarray(x)[:, None], np.asarray(y)[:, None])
    grad = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        grad[k] = (fn(net.with_parameters(theta + e), data) - fn(net.with_parameters(theta - e), data)) / (2 * step)
    return grad


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def sweep_waterfill(gains, total_power, step=1e-6):
    """Exhaustive water-level sweep: evaluate the allocated power on a uniform grid of
    levels and keep the level whose total is closest to the budget."""
    floor = 1.0 / np.asarray(gains, dtype=float)
    lo = floor.min()
    best_mu, best_gap = lo, np.inf
    chunk = 200_000
    n = int(np.ceil(total_power / step)) + 1
    for start in range(0, n, chunk):
        mu = lo + step * np.arange(start, min(start + chunk, n))
        total = np.maximum(mu[:, None] - floor[None, :], 0.0).sum(axis=1)
        gap = np.abs(total - total_power)
        i = int(np.argmin(gap))
        if gap[i] < best_gap:
            best_gap, best_mu = gap[i], mu[i]
    return np.maximum(best_mu - floor, 0.0)


@pytest.fixture
def rng():
    from phylearn.numerics import RngStream

    return RngStream(20261015, 0)
