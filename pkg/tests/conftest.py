import numpy as np
import pytest

from faststi.graph import RoadGraph
from faststi.model import ModelConfig, init_params, make_task
from faststi.schedule import default_training_schedule
from faststi.solvers import TimeGrid

MU, SD = 3.0, 0.5


def eps_star(x, abar):
    """Optimal noise prediction when the data are N(MU, SD^2) per coordinate."""
    return np.sqrt(1 - abar) * (x - np.sqrt(abar) * MU) / (abar * SD ** 2 + 1 - abar)


class LevelOracle:
    """Gaussian-data predictor whose time argument *is* the noise level."""

    def __init__(self):
        self.calls = 0

    def __call__(self, x, task, t):
        self.calls += 1
        return eps_star(x, float(t))


class StepOracle:
    """Gaussian-data predictor addressed by (fractional) training step."""

    def __init__(self, training):
        self.training = training
        self.calls = 0

    def __call__(self, x, task, t):
        self.calls += 1
        return eps_star(x, float(self.training.abar_at(t)))


def level_grid(levels):
    """A TimeGrid whose times equal its levels, with sigma-space midpoints."""
    levels = np.asarray(levels, dtype=float)
    sig = np.sqrt((1 - levels) / levels)
    mids = 1.0 / (1.0 + (0.5 * (sig[:-1] + sig[1:])) ** 2)
    return TimeGrid(levels, levels.copy(), mids, mids.copy())


@pytest.fixture
def training():
    return default_training_schedule()


@pytest.fixture
def path_graph():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    return RoadGraph.from_adjacency(a)


@pytest.fixture
def desk_config():
    return ModelConfig.desk()


@pytest.fixture
def desk_params(desk_config):
    return init_params(desk_config, seed=3)


def random_task(rng, graph, L=6, batch=None, target_rate=0.4, missing_rate=0.1):
    shape = (L, graph.n_nodes) if batch is None else (batch, L, graph.n_nodes)
    x = rng.normal(size=shape)
    om = rng.random(shape) > missing_rate
    tm = (rng.random(shape) < target_rate) & om
    return make_task(np.where(om, x, 0.0), om, tm, graph)


def gradient_check(params, config, task, rng, n_entries=32, h=1e-5, alpha_bars=None):
    """Worst relative disagreement between analytic and central-difference gradients.

    Entries are drawn uniformly from the flat parameter vector.
    """
    from faststi.model import loss_and_grad, loss_value

    alpha_bars = default_training_schedule().alpha_bars if alpha_bars is None else alpha_bars
    x0 = np.asarray(task.observed)
    x0 = x0[None] if x0.ndim == 2 else x0
    t = rng.integers(0, len(alpha_bars), x0.shape[0])
    noise = rng.standard_normal(x0.shape)
    _, grads = loss_and_grad(params, config, task, t, noise, x0, alpha_bars)
    flat, gflat = params.to_vector(), grads.to_vector()
    idx = rng.choice(flat.size, n_entries, replace=False)
    worst = 0.0
    for i in idx:
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        num = (loss_value(params.from_vector(up), config, task, t, noise, x0, alpha_bars)
               - loss_value(params.from_vector(down), config, task, t, noise, x0, alpha_bars)) / (2 * h)
        rel = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-7)
        worst = max(worst, rel)
    return worst, len(idx)
