import numpy as np
import pytest

from faststi.data import Normalizer, split_bounds, synth_generate
from faststi.graph import graph_from_distances
from faststi.pipeline import build_eval_split, score, window_starts, windowed_series
from faststi.training import MaskSpec


@pytest.mark.parametrize("n,L,expected", [
    (24, 24, [0]),
    (48, 24, [0, 24]),
    (50, 24, [0, 24, 26]),
    (10, 24, [0]),
    (7, 3, [0, 3, 4]),
])
def test_window_starts(n, L, expected):
    assert window_starts(n, L).tolist() == expected


@pytest.mark.parametrize("n", [24, 37, 61, 96])
def test_windows_cover_every_step(n):
    starts = window_starts(n, 24)
    covered = np.zeros(n, bool)
    for s in starts:
        covered[s:s + 24] = True
    assert covered.all() and starts[-1] + 24 == n


def test_stitch_round_trips(path_graph):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(50, 3))
    mask = np.ones_like(values, bool)
    series = windowed_series(values, mask, np.zeros_like(mask), Normalizer(np.zeros(3), np.ones(3)), path_graph, 24)
    assert series.task.observed.shape == (3, 24, 3)
    np.testing.assert_array_equal(series.stitch(series.task.observed), values)
    stacked = np.stack([series.task.observed, 2 * series.task.observed])
    np.testing.assert_array_equal(series.stitch(stacked)[1], 2 * values)


def test_baseline_is_per_window_linear_interpolation(path_graph):
    values = np.tile(np.arange(24.0)[:, None], (1, 3)) * np.array([1.0, 2.0, -1.0])
    mask = np.ones_like(values, bool)
    target = np.zeros_like(mask)
    target[5:9, 0] = target[0:3, 1] = True
    norm = Normalizer(np.array([1.0, 0.0, 0.0]), np.array([2.0, 1.0, 1.0]))
    base = windowed_series(values, mask, target, norm, path_graph, 24).baseline()
    # interior gaps of a linear signal are recovered exactly, the leading gap takes the first value
    np.testing.assert_allclose(base[:, 0], values[:, 0])
    np.testing.assert_allclose(base[:3, 1], values[3, 1])
    np.testing.assert_allclose(base[3:, 1:], values[3:, 1:])


@pytest.fixture(scope="module")
def dataset():
    return synth_generate(4, 600, seed=3)


def test_build_eval_split_targets(dataset):
    graph = graph_from_distances(dataset.distances)
    norm = Normalizer.fit(dataset.values, dataset.observed_mask)
    spec = MaskSpec("point", seed=9)
    split = build_eval_split(dataset, norm, graph, spec)
    lo, hi = split_bounds(dataset.n_steps)["test"]
    assert split.truth.shape == (hi - lo, 4)
    np.testing.assert_array_equal(split.truth, dataset.values[lo:hi])
    assert 0.2 < split.eval_mask.mean() < 0.3
    assert not (split.eval_mask & ~dataset.observed_mask[lo:hi]).any()
    # windows carry exactly the stitched target mask
    assert np.array_equal(split.series.stitch(split.series.task.target_mask), split.eval_mask)
    again = build_eval_split(dataset, norm, graph, spec)
    assert np.array_equal(again.eval_mask, split.eval_mask)


def test_score_uses_median_and_crps(dataset):
    graph = graph_from_distances(dataset.distances)
    norm = Normalizer.fit(dataset.values, dataset.observed_mask)
    split = build_eval_split(dataset, norm, graph, MaskSpec("block", seed=1), split="val")
    truth = split.truth
    ens = np.stack([truth - 1.0, truth + 0.5, truth + 2.0])
    rep = score(split, ens)
    assert rep.mae == pytest.approx(0.5) and rep.crps is not None
    single = score(split, ens[:1])
    assert single.mae == pytest.approx(1.0) and single.crps is None
