"""Diffusion-based imputation of sensor networks with few-step pseudo-numerical samplers."""

__version__ = "0.1.0"

from .data import Dataset, Normalizer, load_csv_dataset, split_and_window, synth_generate  # noqa: E402
from .graph import RoadGraph, diff_gcn, graph_from_distances  # noqa: E402
from .metrics import EvalReport, crps_average, crps_point, evaluate, mae, mse, rmse  # noqa: E402
from .model import ImputationTask, ModelConfig, NetworkPredictor, init_params, make_task  # noqa: E402
from .schedule import (SIX_STEP_XIS, AlignedSchedule, TrainingSchedule, build_aligned_schedule,  # noqa: E402
                       build_training_schedule, default_training_schedule)
from .solvers import SamplerConfig, sample, sample_ensemble  # noqa: E402
from .training import MaskSpec, TrainConfig, make_targets, train_loop  # noqa: E402

__all__ = [
    "AlignedSchedule", "Dataset", "EvalReport", "ImputationTask", "MaskSpec", "ModelConfig", "NetworkPredictor",
    "Normalizer", "SIX_STEP_XIS", "RoadGraph", "SamplerConfig", "TrainConfig", "TrainingSchedule",
    "build_aligned_schedule", "build_training_schedule", "crps_average", "crps_point", "diff_gcn", "evaluate",
    "graph_from_distances", "init_params", "load_csv_dataset", "mae", "make_targets", "make_task", "mse",
    "default_training_schedule", "rmse", "sample", "sample_ensemble", "split_and_window", "synth_generate",
    "train_loop",
]
