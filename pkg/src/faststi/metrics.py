"""Point-error metrics and the quantile-loss CRPS over sampled imputations."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

CRPS_LEVELS = np.arange(1, 20) * 0.05


class MetricError(ValueError):
    pass


def _masked(truth, imputed, eval_mask):
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    mask = np.asarray(eval_mask, dtype=bool)
    if truth.shape != imputed.shape or truth.shape != mask.shape:
        raise MetricError(f"shape mismatch: {truth.shape}, {imputed.shape}, {mask.shape}")
    if not mask.any():
        raise MetricError("evaluation mask is empty")
    return truth[mask] - imputed[mask]


def mae(truth, imputed, eval_mask) -> float:
    return float(np.mean(np.abs(_masked(truth, imputed, eval_mask))))


def mse(truth, imputed, eval_mask) -> float:
    d = _masked(truth, imputed, eval_mask)
    return float(np.mean(d * d))


def rmse(truth, imputed, eval_mask) -> float:
    return float(np.sqrt(mse(truth, imputed, eval_mask)))


def quantile_loss(q_value, truth, omega):
    """Pinball loss (omega - 1[truth < q]) * (truth - q); works elementwise."""
    q_value = np.asarray(q_value, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return (omega - (truth < q_value)) * (truth - q_value)


def crps_point(samples, truth, levels=CRPS_LEVELS) -> float:
    """Average of 2 * pinball loss over the empirical quantiles at ``levels``.

    Quantiles interpolate linearly between order statistics.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise MetricError("CRPS needs at least two samples")
    q = np.quantile(samples, levels)
    return float(np.mean(2.0 * quantile_loss(q, truth, np.asarray(levels))))


def _crps_field(ensemble, truth, levels=CRPS_LEVELS) -> np.ndarray:
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if ensemble.shape[0] < 2:
        raise MetricError("CRPS needs at least two samples")
    q = np.quantile(ensemble, levels, axis=0)
    lv = np.asarray(levels).reshape(-1, *([1] * (q.ndim - 1)))
    return np.mean(2.0 * quantile_loss(q, truth[None], lv), axis=0)


def crps_average(ensemble, truth, eval_mask) -> float:
    """Unweighted mean of the per-point CRPS over the masked entries."""
    mask = np.asarray(eval_mask, dtype=bool)
    if not mask.any():
        raise MetricError("evaluation mask is empty")
    truth = np.asarray(truth, dtype=np.float64)
    return float(_crps_field(np.asarray(ensemble)[:, mask], truth[mask]).mean())


@dataclass
class EvalReport:
    mae: float
    mse: float
    rmse: float
    n_eval: int
    crps: float | None = None
    # CRPS divided by the mean absolute truth over the mask
    crps_normalized: float | None = None
    per_node: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_per_node_csv(self, path, node_ids=None) -> None:
        cols = list(self.per_node)
        n = len(self.per_node[cols[0]]) if cols else 0
        node_ids = node_ids or [str(i) for i in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", *cols])
            for i in range(n):
                w.writerow([node_ids[i], *[self.per_node[c][i] for c in cols]])


def evaluate(truth, imputed, eval_mask, ensemble=None) -> EvalReport:
    """Metrics over ``eval_mask``; arrays are (..., L, N) with nodes last.

    When ``ensemble`` (samples first) is given, CRPS is included and
    ``imputed`` may be None, in which case the sample median is scored.
    """
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(eval_mask, dtype=bool)
    if imputed is None:
        if ensemble is None:
            raise MetricError("need imputed values or an ensemble")
        imputed = np.median(ensemble, axis=0)
    imputed = np.asarray(imputed, dtype=np.float64)
    report = EvalReport(
        mae=mae(truth, imputed, mask), mse=mse(truth, imputed, mask),
        rmse=rmse(truth, imputed, mask), n_eval=int(mask.sum()),
    )
    if ensemble is not None:
        report.crps = crps_average(ensemble, truth, mask)
        denom = float(np.mean(np.abs(truth[mask])))
        report.crps_normalized = report.crps / denom if denom > 0 else None
    n_nodes = truth.shape[-1]
    flat_t, flat_i, flat_m = (a.reshape(-1, n_nodes) for a in (truth, imputed, mask))
    per = {"n_eval": [], "mae": [], "rmse": []}
    for j in range(n_nodes):
        m = flat_m[:, j]
        per["n_eval"].append(int(m.sum()))
        if m.any():
            d = flat_t[m, j] - flat_i[m, j]
            per["mae"].append(float(np.mean(np.abs(d))))
            per["rmse"].append(float(np.sqrt(np.mean(d * d))))
        else:
            per["mae"].append(None)
            per["rmse"].append(None)
    report.per_node = per
    return report
