"""KNN graph over Gaussian centers and a small message-passing refiner.

The refiner maps per-Gaussian features to bounded attribute offsets.  Its
output head starts at zero, so switching it on leaves the scene untouched
until training moves the head away from zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .errors import TooFewPoints
from .gaussians import LOG_SCALE_MAX, LOG_SCALE_MIN, OPACITY_MAX, HybridGaussianSet, clamp_z

LAMBDAS = (0.1, 0.1, 0.05, 0.01, 1.0)  # z, s, r, c, alpha
FEATURE_DIM = 12
OFFSET_SLICES = {"z": slice(0, 1), "s": slice(1, 4), "r": slice(4, 8), "c": slice(8, 11), "alpha": slice(11, 12)}


@dataclass
class GaussianGraph:
    edges: np.ndarray  # (E, 2) directed (source, neighbor), grouped by source
    positions: np.ndarray  # (M, 3) snapshot used to build the edges

    @property
    def n_vertices(self) -> int:
        return len(self.positions)


def _distances(points, i, idx):
    diff = points[idx] - points[i]
    return np.sqrt((diff * diff).sum(axis=1))


def build_knn_graph(positions, K: int = 8, r: float | None = None) -> GaussianGraph:
    """Edges to the ``K`` nearest neighbors kept only when strictly closer than ``r``.

    Ties in distance go to the smaller index.  ``r=None`` uses twice the
    median nearest-neighbor distance.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    M = len(pts)
    if M < 2:
        raise TooFewPoints("a graph needs at least two points")
    if K < 1:
        raise ValueError("K must be at least 1")
    if r is None:
        r = default_radius(pts)
    if not r > 0:
        raise ValueError("radius must be positive")
    k_eff = min(K, M - 1)
    tree = cKDTree(pts)
    dk, _ = tree.query(pts, k=k_eff + 1)
    dk = np.asarray(dk).reshape(M, -1)[:, -1]
    src, dst = [], []
    for i in range(M):
        # every candidate within the K-th distance (padded against rounding), re-ranked exactly
        cand = np.asarray(tree.query_ball_point(pts[i], dk[i] * (1 + 1e-9) + 1e-300), dtype=np.int64)
        cand = cand[cand != i]
        d = _distances(pts, i, cand)
        order = np.lexsort((cand, d))[:k_eff]
        keep = order[d[order] < r]
        src.extend([i] * len(keep))
        dst.extend(cand[keep].tolist())
    edges = np.stack([np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)], axis=1) if src else np.zeros((0, 2), np.int64)
    return GaussianGraph(edges=edges, positions=pts.copy())


def default_radius(points) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(2.0 * np.median(d[:, 1]))


def vertex_features(gset: HybridGaussianSet, opacity=None):
    """12 features per Gaussian: distance surrogate, log-scale, rotation, color, opacity.

    Ray-based Gaussians use ``z``; ordinary ones use the distance of their
    center to the centroid of all centers.  Quaternions are folded onto
    ``w >= 0``.
    """
    pos = gset.positions()
    centroid = pos.mean(axis=0) if len(pos) else np.zeros(3)
    dist = np.concatenate([np.linalg.norm(gset.mu - centroid, axis=1), gset.z])
    q = gset.quat / np.linalg.norm(gset.quat, axis=1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    a = gset.opacity if opacity is None else opacity
    return np.concatenate([dist[:, None], gset.log_scale, q, gset.color, np.asarray(a)[:, None]], axis=1)


class Refiner(nn.Module):
    """One round of mean-aggregated message passing with a zero-initialized tanh head."""

    def __init__(self, feature_dim: int = FEATURE_DIM, hidden: int = 64, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.message = nn.Sequential(nn.Linear(2 * feature_dim + 3, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.update = nn.Sequential(nn.Linear(feature_dim + hidden, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.head = nn.Linear(hidden, FEATURE_DIM)
        with torch.no_grad():
            for layer in (*self.message, *self.update):
                if isinstance(layer, nn.Linear):
                    bound = 1.0 / np.sqrt(layer.in_features)
                    layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen) * 2 * bound - bound)
                    layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen) * 2 * bound - bound)
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.double()

    def forward(self, features, positions, edges):
        v = torch.as_tensor(features, dtype=torch.float64)
        mu = torch.as_tensor(positions, dtype=torch.float64)
        e = torch.as_tensor(np.asarray(edges, dtype=np.int64).reshape(-1, 2))
        n = v.shape[0]
        agg = torch.zeros(n, self.message[-2].out_features, dtype=v.dtype)
        if len(e):
            src, dst = e[:, 0], e[:, 1]
            msg = self.message(torch.cat([v[src], v[dst], mu[src] - mu[dst]], dim=1))
            cnt = torch.zeros(n, dtype=v.dtype).index_add(0, src, torch.ones(len(src), dtype=v.dtype))
            agg = agg.index_add(0, src, msg) / cnt.clamp(min=1.0)[:, None]
        return torch.tanh(self.head(self.update(torch.cat([v, agg], dim=1))))

    def flat_parameters(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def load_flat_parameters(self, flat) -> None:
        nn.utils.vector_to_parameters(torch.as_tensor(np.asarray(flat), dtype=torch.float64), self.parameters())


def refine(graph: GaussianGraph, features, refiner: Refiner) -> np.ndarray:
    """Offsets (M, 12) in [-1, 1] for the vertices of ``graph``."""
    with torch.no_grad():
        return refiner(features, graph.positions, graph.edges).numpy()


def offset_tensors(offsets, lambdas=LAMBDAS):
    """Split (M, 12) offsets into scaled per-attribute updates."""
    lz, ls, lr, lc, la = lambdas
    return {
        "z": lz * offsets[:, OFFSET_SLICES["z"]][:, 0],
        "s": ls * offsets[:, OFFSET_SLICES["s"]],
        "r": lr * offsets[:, OFFSET_SLICES["r"]],
        "c": lc * offsets[:, OFFSET_SLICES["c"]],
        "alpha": la * offsets[:, OFFSET_SLICES["alpha"]][:, 0],
    }


def apply_offsets(gset: HybridGaussianSet, offsets, lambdas=LAMBDAS) -> HybridGaussianSet:
    """``x + lambda_x * delta_x`` for every attribute; ordinary Gaussians keep their centers."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(gset.n_total, FEATURE_DIM)
    out = gset.copy()
    if not np.any(offsets):
        return out
    d = offset_tensors(offsets, lambdas)
    no = gset.n_ordinary
    out.z = clamp_z(gset.z + d["z"][no:], gset.z_near, gset.z_far)
    out.log_scale = np.clip(gset.log_scale + d["s"], LOG_SCALE_MIN, LOG_SCALE_MAX)
    q = gset.quat + d["r"]
    out.quat = q / np.linalg.norm(q, axis=1, keepdims=True)
    out.color = np.clip(gset.color + d["c"], 0.0, 1.0)
    out.opacity = np.clip(gset.opacity + d["alpha"], 0.0, OPACITY_MAX)
    return out
