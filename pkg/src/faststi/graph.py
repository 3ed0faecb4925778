"""Road graph construction and the diffusion graph convolution (Diff-GCN)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RoadGraph:
    adjacency: np.ndarray = field(repr=False)
    forward_transition: np.ndarray = field(repr=False)
    reverse_transition: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_adjacency(cls, adjacency, literal_reverse: bool = False) -> "RoadGraph":
        adjacency = np.array(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {adjacency.shape}")
        if np.any(adjacency < 0) or not np.all(np.isfinite(adjacency)):
            raise GraphError("adjacency entries must be finite and non-negative")
        fwd, rev = build_transitions(adjacency, literal_reverse=literal_reverse)
        for a in (adjacency, fwd, rev):
            a.setflags(write=False)
        return cls(adjacency, fwd, rev)

    def permuted(self, perm) -> "RoadGraph":
        perm = np.asarray(perm)
        return RoadGraph.from_adjacency(self.adjacency[np.ix_(perm, perm)])


def gaussian_kernel_adjacency(distances, sigma: float | None = None, threshold: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel w_ij = exp(-d_ij^2 / sigma^2).

    Infinite distances mean "no road" and give zero weight. ``sigma`` defaults
    to the standard deviation of the finite off-diagonal distances.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise GraphError(f"distances must be square, got shape {d.shape}")
    if np.any(d < 0):
        raise GraphError("distances must be non-negative")
    if sigma is None:
        off = d[~np.eye(d.shape[0], dtype=bool)]
        off = off[np.isfinite(off)]
        sigma = float(off.std()) if off.size else 1.0
    if not sigma > 0:
        raise GraphError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= threshold < 1.0:
        raise GraphError(f"threshold must lie in [0, 1), got {threshold}")
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(-np.square(d / sigma))
    w[~np.isfinite(d)] = 0.0
    w[w < threshold] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def _row_normalize(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    return a * inv[:, None]


def build_transitions(adjacency, literal_reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Forward D_out^-1 A and reverse D_in^-1 A^T random-walk matrices.

    ``literal_reverse`` drops the transpose in the reverse term; for that
    reading both matrices coincide.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    fwd = _row_normalize(a)
    rev = fwd.copy() if literal_reverse else _row_normalize(a.T)
    return fwd, rev


@dataclass
class DiffGcnParams:
    """theta_fwd[k] and theta_rev[k] are (C_in, C_out) channel maps for hop k."""

    theta_fwd: np.ndarray
    theta_rev: np.ndarray
    rho: float = 0.1

    @property
    def k_steps(self) -> int:
        return self.theta_fwd.shape[0] - 1

    def __post_init__(self):
        self.theta_fwd = np.asarray(self.theta_fwd, dtype=np.float64)
        self.theta_rev = np.asarray(self.theta_rev, dtype=np.float64)
        if self.theta_fwd.ndim != 3 or self.theta_fwd.shape != self.theta_rev.shape:
            raise GraphError("theta_fwd and theta_rev must both have shape (K+1, C_in, C_out)")
        if not 0.0 <= self.rho <= 1.0:
            raise GraphError(f"rho must lie in [0, 1], got {self.rho}")

    @classmethod
    def init(cls, k_steps: int, c_in: int, c_out: int, rho: float = 0.1, rng=None) -> "DiffGcnParams":
        rng = np.random.default_rng(rng)
        scale = 1.0 / np.sqrt(c_in)
        shape = (k_steps + 1, c_in, c_out)
        return cls(rng.normal(0, scale, shape), rng.normal(0, scale, shape), rho)


def hop_scales(k_steps: int, rho: float) -> np.ndarray:
    """1 for the self term, rho for every neighbour hop."""
    s = np.full(k_steps + 1, float(rho))
    s[0] = 1.0
    return s


def diff_gcn(features, graph: RoadGraph, params: DiffGcnParams) -> np.ndarray:
    """sum_k s_k (P^k X theta_fwd[k] + Q^k X theta_rev[k]) over the node axis.

    ``features`` has shape (..., N, C); powers are applied as repeated
    products, never formed explicitly.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-2] != graph.n_nodes:
        raise GraphError(f"node axis has {x.shape[-2]} entries, graph has {graph.n_nodes}")
    if x.shape[-1] != params.theta_fwd.shape[1]:
        raise GraphError(f"feature channels {x.shape[-1]} != theta input channels {params.theta_fwd.shape[1]}")
    scales = hop_scales(params.k_steps, params.rho)
    out = x @ (params.theta_fwd[0] + params.theta_rev[0])
    hf = hr = x
    for k in range(1, params.k_steps + 1):
        hf = graph.forward_transition @ hf
        hr = graph.reverse_transition @ hr
        out = out + scales[k] * (hf @ params.theta_fwd[k] + hr @ params.theta_rev[k])
    return out


# -- CSV -------------------------------------------------------------------

def read_distances_csv(path, node_ids=None) -> np.ndarray:
    """Read ``from,to,distance`` rows or a full matrix with a header of node ids.

    Edge lists produce +inf for absent pairs and 0 on the diagonal.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise GraphError(f"{path}: empty distance file")
    header = [h.strip() for h in rows[0]]
    if header[:3] == ["from", "to", "distance"]:
        edges = [(r[0].strip(), r[1].strip(), float(r[2])) for r in rows[1:]]
        if node_ids is None:
            seen = {}
            for a, b, _ in edges:
                seen.setdefault(a, None)
                seen.setdefault(b, None)
            node_ids = list(seen)
        index = {n: i for i, n in enumerate(node_ids)}
        d = np.full((len(node_ids), len(node_ids)), np.inf)
        np.fill_diagonal(d, 0.0)
        for a, b, dist in edges:
            if a not in index or b not in index:
                raise GraphError(f"{path}: edge {a}->{b} references an unknown node")
            d[index[a], index[b]] = dist
        return d
    d = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    if d.shape != (len(header), len(header)):
        raise GraphError(f"{path}: expected a {len(header)}x{len(header)} matrix, got {d.shape}")
    if node_ids is not None and list(node_ids) != header:
        raise GraphError(f"{path}: matrix header does not match dataset node ids")
    return d


def write_matrix_csv(path, matrix, node_ids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(node_ids)
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def graph_from_distances(distances, sigma=None, threshold=0.1) -> RoadGraph:
    return RoadGraph.from_adjacency(gaussian_kernel_adjacency(distances, sigma, threshold))


def load_graph(path, node_ids=None, sigma=None, threshold=0.1) -> RoadGraph:
    return graph_from_distances(read_distances_csv(Path(path), node_ids), sigma, threshold)
