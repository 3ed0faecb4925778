"""Conditional feature prior and noise prediction network.

Shapes: a batch of windows is (B, L, N) for scalar fields and (B, L, N, C) for
hidden features. Single windows (L, N) are accepted wherever a batch is and
get a leading axis of one.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .graph import RoadGraph, hop_scales

CHECKPOINT_VERSION = 1
_MAGIC = b"FSTI"


@dataclass
class ModelConfig:
    residual_layers: int = 4
    residual_channels: int = 64
    attention_heads: int = 8
    time_embedding_dim: int = 128
    k_steps: int = 2
    rho: float = 0.1
    # "cond_query": H_cond gives query and value, the noise stream gives the key.
    # "standard": the noise stream queries, H_cond gives key and value.
    attention_assignment: str = "cond_query"

    def __post_init__(self):
        for name in ("residual_layers", "residual_channels", "attention_heads", "time_embedding_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k_steps < 0:
            raise ValueError("k_steps must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.residual_channels % self.attention_heads:
            raise ValueError("residual_channels must be divisible by attention_heads")
        if self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")
        if self.attention_assignment not in ("cond_query", "standard"):
            raise ValueError(f"unknown attention_assignment {self.attention_assignment!r}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration used for tests and CPU experiments."""
        base = dict(residual_layers=2, residual_channels=16, attention_heads=2, time_embedding_dim=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ImputationTask:
    """One window (L, N) or a batch of windows (B, L, N) to impute."""

    observed: np.ndarray
    observed_mask: np.ndarray
    target_mask: np.ndarray
    conditioner: np.ndarray
    graph: RoadGraph = field(repr=False)

    @property
    def conditioning_mask(self) -> np.ndarray:
        return self.observed_mask & ~self.target_mask

    @property
    def eval_mask(self) -> np.ndarray:
        return self.observed_mask & self.target_mask


def make_task(observed, observed_mask, target_mask, graph: RoadGraph, fill_value: float = 0.0) -> ImputationTask:
    """Build a task whose conditioner only sees the non-target observations."""
    observed = np.asarray(observed, dtype=np.float64)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    target_mask = np.asarray(target_mask, dtype=bool)
    if not (observed.shape == observed_mask.shape == target_mask.shape):
        raise ValueError("observed, observed_mask and target_mask must share a shape")
    cond = observed_mask & ~target_mask
    chi = lin_interp(np.where(cond, observed, 0.0), cond, fill_value)
    return ImputationTask(observed, observed_mask, target_mask, chi, graph)


def lin_interp(observed, observed_mask, fill_value: float = 0.0) -> np.ndarray:
    """Per-node linear interpolation along the time axis (second to last).

    Gaps at either end take the nearest observed value; nodes with no
    observation in the window take ``fill_value``.
    """
    x = np.asarray(observed, dtype=np.float64)
    m = np.asarray(observed_mask, dtype=bool)
    out = np.where(m, x, fill_value).astype(np.float64)
    L = x.shape[-2]
    grid = np.arange(L)
    xs = np.moveaxis(x, -2, -1).reshape(-1, L)
    ms = np.moveaxis(m, -2, -1).reshape(-1, L)
    res = np.moveaxis(out, -2, -1).reshape(-1, L).copy()
    for i in np.flatnonzero(ms.any(axis=1) & ~ms.all(axis=1)):
        known = ms[i]
        res[i] = np.interp(grid, grid[known], xs[i, known])
    res = np.moveaxis(res.reshape(*x.shape[:-2], x.shape[-1], L), -1, -2)
    return np.where(m, x, res)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: sin then cos of t times frequencies 1 ... 1e-4.

    Accepts a scalar or an array of times; the embedding axis is appended.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10.0 ** (-4.0 * np.arange(half) / (half - 1))
    arg = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


# -- parameters ------------------------------------------------------------

class ModelParams(OrderedDict):
    """Named weight arrays with a lossless flat-vector view."""

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()]) if self else np.zeros(0)

    def from_vector(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        out, pos = ModelParams(), 0
        for k, v in self.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return out

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())


def _attn_params(p, prefix, c, rng):
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
        p[f"{prefix}.b{name}"] = np.zeros(c)


def _norm_params(p, prefix, c):
    p[f"{prefix}.gamma"] = np.ones(c)
    p[f"{prefix}.beta"] = np.zeros(c)


def _gcn_params(p, prefix, k, c, rng):
    for hop in range(k + 1):
        p[f"{prefix}.fwd{hop}"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
        p[f"{prefix}.rev{hop}"] = rng.normal(0, 1 / math.sqrt(c), (c, c))


def init_params(config: ModelConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    c, e = config.residual_channels, config.time_embedding_dim
    p = ModelParams()
    p["prior.in.w"] = rng.normal(0, 1.0, (1, c))
    p["prior.in.b"] = np.zeros(c)
    for branch in ("tem", "spa"):
        _attn_params(p, f"prior.{branch}", c, rng)
        _norm_params(p, f"prior.{branch}.norm", c)
    _gcn_params(p, "prior.gcn", config.k_steps, c, rng)
    _norm_params(p, "prior.gcn.norm", c)
    p["prior.mlp1.w"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
    p["prior.mlp1.b"] = np.zeros(c)
    p["prior.mlp2.w"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
    p["prior.mlp2.b"] = np.zeros(c)

    p["noise.in.w"] = rng.normal(0, 1 / math.sqrt(2), (2, c))
    p["noise.in.b"] = np.zeros(c)
    p["temb.1.w"] = rng.normal(0, 1 / math.sqrt(e), (e, c))
    p["temb.1.b"] = np.zeros(c)
    p["temb.2.w"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
    p["temb.2.b"] = np.zeros(c)
    for i in range(config.residual_layers):
        b = f"block{i}"
        p[f"{b}.temb.w"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
        p[f"{b}.temb.b"] = np.zeros(c)
        for branch in ("tem", "spa"):
            _attn_params(p, f"{b}.{branch}", c, rng)
            _norm_params(p, f"{b}.{branch}.norm", c)
        _gcn_params(p, f"{b}.gcn", config.k_steps, c, rng)
        _norm_params(p, f"{b}.gcn.norm", c)
        p[f"{b}.mid.w"] = rng.normal(0, 1 / math.sqrt(c), (c, 2 * c))
        p[f"{b}.mid.b"] = np.zeros(2 * c)
        p[f"{b}.out.w"] = rng.normal(0, 1 / math.sqrt(c), (c, 2 * c))
        p[f"{b}.out.b"] = np.zeros(2 * c)
    p["head.1.w"] = rng.normal(0, 1 / math.sqrt(c), (c, c))
    p["head.1.b"] = np.zeros(c)
    p["head.2.w"] = rng.normal(0, 0.1 / math.sqrt(c), (c, 1))
    p["head.2.b"] = np.zeros(1)
    return p


# -- forward pass ----------------------------------------------------------

def _positional(L: int, c: int) -> np.ndarray:
    return time_embedding(np.arange(L), c)[None, :, None, :]


def _attend(w, prefix, query_src, key_src, value_src, axis, heads):
    q = ag.linear(query_src, w[f"{prefix}.wq"], w[f"{prefix}.bq"])
    k = ag.linear(key_src, w[f"{prefix}.wk"], w[f"{prefix}.bk"])
    v = ag.linear(value_src, w[f"{prefix}.wv"], w[f"{prefix}.bv"])
    return ag.linear(ag.attention(q, k, v, axis, heads), w[f"{prefix}.wo"], w[f"{prefix}.bo"])


def _residual_norm(w, prefix, update, base):
    return ag.layer_norm(ag.add(update, base), w[f"{prefix}.norm.gamma"], w[f"{prefix}.norm.beta"])


def _gcn(w, prefix, h, graph: RoadGraph, config: ModelConfig):
    scales = hop_scales(config.k_steps, config.rho)
    out = ag.linear(h, ag.add(w[f"{prefix}.fwd0"], w[f"{prefix}.rev0"]))
    hf = hr = h
    for k in range(1, config.k_steps + 1):
        hf = ag.node_mix(hf, graph.forward_transition)
        hr = ag.node_mix(hr, graph.reverse_transition)
        hop = ag.add(ag.linear(hf, w[f"{prefix}.fwd{k}"]), ag.linear(hr, w[f"{prefix}.rev{k}"]))
        out = ag.add(out, ag.scale(hop, scales[k]))
    return out


def _batched(a) -> np.ndarray:
    a = np.asarray(a)
    return a[None] if a.ndim == 2 else a


def _prior(w, chi, graph, config):
    chi = _batched(chi)
    c, heads = config.residual_channels, config.attention_heads
    h = ag.add(ag.linear(chi[..., None], w["prior.in.w"], w["prior.in.b"]), _positional(chi.shape[1], c))
    tem = _residual_norm(w, "prior.tem", _attend(w, "prior.tem", h, h, h, "time", heads), h)
    spa = _residual_norm(w, "prior.spa", _attend(w, "prior.spa", h, h, h, "node", heads), h)
    dg = _residual_norm(w, "prior.gcn", _gcn(w, "prior.gcn", h, graph, config), h)
    mixed = ag.add(ag.add(tem, spa), dg)
    hidden = ag.silu(ag.linear(mixed, w["prior.mlp1.w"], w["prior.mlp1.b"]))
    return ag.linear(hidden, w["prior.mlp2.w"], w["prior.mlp2.b"])


def _noise_net(w, x_noisy, chi, target_mask, t, cond, graph, config):
    x_noisy, chi, target_mask = _batched(x_noisy), _batched(chi), _batched(target_mask)
    B, L, N = x_noisy.shape
    c, heads = config.residual_channels, config.attention_heads
    tm = target_mask.astype(np.float64)
    inp = np.stack([chi, x_noisy * tm], axis=-1)
    h = ag.add(ag.linear(inp, w["noise.in.w"], w["noise.in.b"]), _positional(L, c))

    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    temb = ag.silu(ag.linear(time_embedding(t, config.time_embedding_dim), w["temb.1.w"], w["temb.1.b"]))
    temb = ag.silu(ag.linear(temb, w["temb.2.w"], w["temb.2.b"]))

    cond_query = config.attention_assignment == "cond_query"
    skips = None
    for i in range(config.residual_layers):
        b = f"block{i}"
        step = ag.reshape(ag.linear(temb, w[f"{b}.temb.w"], w[f"{b}.temb.b"]), (B, 1, 1, c))
        y = ag.add(h, step)
        for branch, axis in (("tem", "time"), ("spa", "node")):
            if cond_query:
                upd = _attend(w, f"{b}.{branch}", cond, y, cond, axis, heads)
            else:
                upd = _attend(w, f"{b}.{branch}", y, cond, cond, axis, heads)
            y = _residual_norm(w, f"{b}.{branch}", upd, y)
        y = _residual_norm(w, f"{b}.gcn", _gcn(w, f"{b}.gcn", y, graph, config), y)
        gate, filt = ag.split_last(ag.linear(y, w[f"{b}.mid.w"], w[f"{b}.mid.b"]), (c, c))
        z = ag.mul(ag.sigmoid(gate), ag.tanh(filt))
        res, skip = ag.split_last(ag.linear(z, w[f"{b}.out.w"], w[f"{b}.out.b"]), (c, c))
        h = ag.scale(ag.add(h, res), 1 / math.sqrt(2))
        skips = skip if skips is None else ag.add(skips, skip)
    s = ag.scale(skips, 1 / math.sqrt(config.residual_layers))
    s = ag.silu(ag.linear(s, w["head.1.w"], w["head.1.b"]))
    out = ag.reshape(ag.linear(s, w["head.2.w"], w["head.2.b"]), (B, L, N))
    return ag.mul(out, tm)


def _wrap(params: ModelParams, requires_grad: bool):
    return {k: ag.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def conditional_prior(chi, graph: RoadGraph, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """H_cond for a window (L, N) -> (L, N, C) or a batch (B, L, N) -> (B, L, N, C)."""
    chi = np.asarray(chi, dtype=np.float64)
    if not np.all(np.isfinite(chi)):
        raise ValueError("conditioner must be finite")
    with ag.no_grad():
        out = _prior(_wrap(params, False), chi, graph, config).data
    return out[0] if chi.ndim == 2 else out


def noise_predict(x_noisy, task: ImputationTask, t, params: ModelParams, config: ModelConfig,
                  prior: np.ndarray | None = None) -> np.ndarray:
    """Predicted noise, zero outside the task's target mask."""
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    if not np.all(np.isfinite(x_noisy)):
        raise ValueError("noisy input must be finite")
    if np.any(np.asarray(t) < -1):
        raise ValueError("time argument must be >= -1")
    with ag.no_grad():
        w = _wrap(params, False)
        if prior is None:
            cond = _prior(w, task.conditioner, task.graph, config)
        else:
            prior = np.asarray(prior)
            cond = ag.Tensor(prior[None] if prior.ndim == 3 else prior)
        out = _noise_net(w, x_noisy, task.conditioner, task.target_mask, t, cond, task.graph, config).data
    return out[0] if x_noisy.ndim == 2 else out


def loss_and_grad(params: ModelParams, config: ModelConfig, task: ImputationTask, t, noise: np.ndarray,
                  x0: np.ndarray, alpha_bars: np.ndarray) -> tuple[float, ModelParams]:
    """Masked denoising loss and its gradient for one batch.

    ``t`` holds integer storage indices, one per window; ``noise`` is the
    standard normal draw used to diffuse ``x0`` on the targets.
    """
    w = _wrap(params, True)
    x0, noise = _batched(x0), _batched(noise)
    t = np.atleast_1d(np.asarray(t))
    ab = np.asarray(alpha_bars)[t.astype(int)][:, None, None]
    tm = _batched(task.target_mask)
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise) * tm
    cond = _prior(w, task.conditioner, task.graph, config)
    pred = _noise_net(w, x_t, task.conditioner, tm, t, cond, task.graph, config)
    loss = ag.masked_mse(pred, noise, tm)
    loss.backward()
    grads = ModelParams((k, w[k].grad if w[k].grad is not None else np.zeros_like(v)) for k, v in params.items())
    return float(loss.data), grads


def loss_value(params: ModelParams, config: ModelConfig, task: ImputationTask, t, noise, x0, alpha_bars) -> float:
    with ag.no_grad():
        w = _wrap(params, False)
        x0, noise = _batched(x0), _batched(noise)
        t = np.atleast_1d(np.asarray(t))
        ab = np.asarray(alpha_bars)[t.astype(int)][:, None, None]
        tm = _batched(task.target_mask)
        x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise) * tm
        cond = _prior(w, task.conditioner, task.graph, config)
        pred = _noise_net(w, x_t, task.conditioner, tm, t, cond, task.graph, config)
        return float(ag.masked_mse(pred, noise, tm).data)


class NetworkPredictor:
    """Noise predictor backed by trained parameters.

    The conditional prior depends only on the task, so it is computed once per
    task object and reused across sampler steps.
    """

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config
        self.calls = 0
        # (task, conditioner, prior), replaced as a whole so threads never see a torn entry
        self._cache = (None, None, None)

    def __call__(self, x_t, task: ImputationTask, t) -> np.ndarray:
        cached_task, cached_chi, prior = self._cache
        if cached_task is not task or cached_chi is not task.conditioner:
            prior = conditional_prior(task.conditioner, task.graph, self.params, self.config)
            self._cache = (task, task.conditioner, prior)
        self.calls += 1
        return noise_predict(x_t, task, t, self.params, self.config, prior=prior)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, uint64 header length, JSON header, float64 payload."""
    payload = params.to_vector().astype("<f8").tobytes()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "parameter_count": params.size,
        "layout": [[k, list(v.shape)] for k, v in params.items()],
        "checksum": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    if "version" not in header:
        raise ValueError(f"{path}: checkpoint header lacks a version")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    payload = raw[12 + n:]
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ValueError(f"{path}: checksum mismatch")
    vec = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if vec.size != header["parameter_count"]:
        raise ValueError(f"{path}: parameter count mismatch")
    params, pos = ModelParams(), 0
    for name, shape in header["layout"]:
        size = int(np.prod(shape))
        params[name] = vec[pos:pos + size].reshape(shape).copy()
        pos += size
    return params, ModelConfig.from_dict(header["config"]), header["extra"]
