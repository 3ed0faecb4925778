"""Train a small imputer on synthetic sensor data and compare samplers.

Takes a few minutes on a laptop CPU. The same steps are available from the
command line as ``faststi generate-synth``, ``faststi train`` and
``faststi impute``.
"""

# %%
import time

import numpy as np

from faststi.data import synth_generate
from faststi.graph import graph_from_distances
from faststi.model import ModelConfig, NetworkPredictor
from faststi.pipeline import build_eval_split, impute_series, score
from faststi.schedule import SIX_STEP_XIS, build_aligned_schedule, default_training_schedule
from faststi.solvers import SamplerConfig
from faststi.training import MaskSpec, TrainConfig, train_loop

dataset = synth_generate(10, 2000, seed=7)
graph = graph_from_distances(dataset.distances)
print(f"{dataset.n_nodes} sensors, {dataset.n_steps} steps, {int((graph.adjacency > 0).sum())} weighted edges")

# %% [markdown]
# Training hides observed entries in blocks (sensor outages) plus a sprinkling
# of single points, and learns to predict the noise added to those entries.

# %%
masks = MaskSpec("block")
config = TrainConfig(epochs=30, train_stride=4)
t0 = time.time()
result = train_loop(dataset, config, ModelConfig.desk(), masks, graph=graph)
print(f"trained in {time.time() - t0:.0f}s, best validation loss {result.curve[result.best_epoch]['val_loss']:.4f}")

# %% [markdown]
# Evaluation hides a fresh set of blocks in the test split. Linear interpolation
# between the surviving observations is the baseline every sampler has to beat.

# %%
split = build_eval_split(dataset, result.normalizer, graph, MaskSpec("block", seed=123))
baseline = score(split, split.series.baseline()[None]).mae
print(f"linear interpolation MAE {baseline:.4f}")

training = default_training_schedule()
aligned = build_aligned_schedule(SIX_STEP_XIS, training)
predictor = NetworkPredictor(result.params, ModelConfig.desk())
runs = {
    "fastSTI4, 6 aligned steps": SamplerConfig("fastSTI4", 6, aligned),
    "fastSTI4, 50 steps": SamplerConfig("fastSTI4", 50),
    "ddpm, 6 strided steps": SamplerConfig("ddpm", 6),
}
for name, cfg in runs.items():
    t0 = time.time()
    ensemble = impute_series(predictor, split.series, training, cfg, n_samples=16)
    report = score(split, ensemble)
    print(f"{name:<27} MAE {report.mae:.4f} ({report.mae / baseline:.2f}x lin)  CRPS {report.crps:.4f}  "
          f"{time.time() - t0:.1f}s")
