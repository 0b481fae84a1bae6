"""Per-spot microenvironment graphs and their two-layer graph-conv encoder.

Each spot is the hub of a star graph over its 8 nearest same-sample
neighbors. Edge strength blends morphological and molecular similarity:
the reciprocal mean-squared difference of the morphology vectors and of the
expression vectors, averaged. The encoder aggregates with sum-normalized
weights (self-loop 1) at both layers and returns the hub's 512-d vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, MORPH_DIM

GCN_DIM = 512
DEFAULT_NEIGHBORS = 8
DEFAULT_EPS = 1e-6


@dataclass
class MicroenvGraph:
    center: int
    neighbors: list[int]
    edge_weights: np.ndarray  # raw e_i, aligned with neighbors

    def __post_init__(self):
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)
        if len(self.neighbors) != len(self.edge_weights):
            raise ValueError("neighbor and edge-weight counts differ")
        if len(self.neighbors) == 0:
            raise ValueError("microenvironment graph needs at least one neighbor")
        if self.center in self.neighbors:
            raise ValueError("center cannot be its own neighbor")
        if len(set(self.neighbors)) != len(self.neighbors):
            raise ValueError("duplicate neighbor indices")
        if not np.all(np.isfinite(self.edge_weights)) or self.edge_weights.min() < 0:
            raise ValueError("edge weights must be finite and non-negative")


@dataclass
class GcnParams:
    w1: ad.Parameter  # (1024, 512)
    b1: ad.Parameter
    w2: ad.Parameter  # (512, 512)
    b2: ad.Parameter

    def params(self) -> list[ad.Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_gcn(rng: np.random.Generator, prefix: str = "gcn",
             init_scale: float = 0.02) -> GcnParams:
    return GcnParams(
        w1=ad.Parameter(rng.normal(0, init_scale, (MORPH_DIM, GCN_DIM)), f"{prefix}.w1"),
        b1=ad.Parameter(np.zeros(GCN_DIM), f"{prefix}.b1"),
        w2=ad.Parameter(rng.normal(0, init_scale, (GCN_DIM, GCN_DIM)), f"{prefix}.w2"),
        b2=ad.Parameter(np.zeros(GCN_DIM), f"{prefix}.b2"),
    )


def find_neighbors(ds: Dataset, center: int, k: int = DEFAULT_NEIGHBORS) -> list[int]:
    """Indices of the k nearest same-sample spots by Euclidean distance.

    Ties break by ascending spot index. Fewer than k are returned only when
    the sample itself is smaller.
    """
    sample = ds.sample_ids[center]
    candidates = ds.sample_indices(sample)
    candidates = candidates[candidates != center]
    if candidates.size == 0:
        raise ValueError(
            f"spot {ds.spot_ids[center]!r} is alone in sample {sample!r}; "
            "no microenvironment exists"
        )
    deltas = ds.xy[candidates] - ds.xy[center]
    d2 = (deltas * deltas).sum(axis=1)
    order = np.lexsort((candidates, d2))
    return [int(c) for c in candidates[order[:k]]]


def compute_edge_weights(x_c, x_nbrs, g_c, g_nbrs, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Edge weights e_i = (1/(MSE_morph+eps) + 1/(MSE_expr+eps)) / 2."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x_c = np.asarray(x_c, dtype=np.float64)
    g_c = np.asarray(g_c, dtype=np.float64)
    x_nbrs = np.atleast_2d(np.asarray(x_nbrs, dtype=np.float64))
    g_nbrs = np.atleast_2d(np.asarray(g_nbrs, dtype=np.float64))
    if x_nbrs.shape[1] != x_c.shape[0]:
        raise ValueError(
            f"morphology length mismatch: center {x_c.shape[0]}, neighbors {x_nbrs.shape[1]}"
        )
    if g_nbrs.shape[1] != g_c.shape[0]:
        raise ValueError(
            f"expression length mismatch: center {g_c.shape[0]}, neighbors {g_nbrs.shape[1]}"
        )
    mse_morph = ((x_nbrs - x_c) ** 2).mean(axis=1)
    mse_bio = ((g_nbrs - g_c) ** 2).mean(axis=1)
    r_morph = 1.0 / (mse_morph + eps)
    r_bio = 1.0 / (mse_bio + eps)
    return (r_morph + r_bio) / 2.0


def build_graph(ds: Dataset, center: int, k: int = DEFAULT_NEIGHBORS,
                eps: float = DEFAULT_EPS) -> MicroenvGraph:
    nbrs = find_neighbors(ds, center, k)
    e = compute_edge_weights(ds.morph[center], ds.morph[nbrs],
                             ds.expr[center], ds.expr[nbrs], eps)
    return MicroenvGraph(center, nbrs, e)


def normalized_weights(graph: MicroenvGraph) -> np.ndarray:
    """Weights over {center} + neighbors: self-loop 1, then e_i, sum-normalized."""
    aug = np.concatenate([[1.0], graph.edge_weights])
    return aug / aug.sum()


def gcn_forward(graph: MicroenvGraph, feats: np.ndarray, params: GcnParams) -> ad.Tensor:
    """Encode one microenvironment graph into the hub's 512-d representation.

    Layer 1 transforms the hub's weight-aggregated input and each neighbor's
    own feature; layer 2 re-aggregates the layer-1 representations with the
    same normalized weights. Neighbors are reduced in ascending-index order,
    so the output is invariant to how the neighbor list is permuted.
    """
    order = np.argsort(graph.neighbors, kind="stable")
    nbrs = [graph.neighbors[i] for i in order]
    ehat = normalized_weights(graph)
    ehat = np.concatenate([[ehat[0]], ehat[1:][order]])

    x = np.asarray(feats, dtype=np.float64)
    node_feats = np.concatenate([
        (ehat[:, None] * x[[graph.center] + nbrs]).sum(axis=0, keepdims=True),
        x[nbrs],
    ])  # (1+n, 1024): row 0 is the hub's aggregated input
    t = ad.relu(ad.add(ad.matmul(ad.Tensor(node_feats), params.w1), params.b1))
    pooled = ad.weighted_sum(ad.Tensor(ehat), t)
    return ad.relu(ad.add(ad.matmul(pooled, params.w2), params.b2))


class GraphCache:
    """Precomputed per-spot graph inputs for batched encoding.

    Stores, for every spot, the padded neighbor indices, the normalized
    weights over {center} + neighbors, and the hub's weight-aggregated
    morphology input (constant, so it is computed once).
    """

    def __init__(self, ds: Dataset, k: int = DEFAULT_NEIGHBORS, eps: float = DEFAULT_EPS):
        n = len(ds)
        self.k = k
        self.nbr_idx = np.zeros((n, k), dtype=np.int64)
        self.ehat = np.zeros((n, k + 1))
        self.agg_input = np.zeros((n, MORPH_DIM))
        for i in range(n):
            g = build_graph(ds, i, k, eps)
            order = np.argsort(g.neighbors, kind="stable")
            nbrs = np.asarray(g.neighbors)[order]
            ehat = normalized_weights(g)
            ehat = np.concatenate([[ehat[0]], ehat[1:][order]])
            m = len(nbrs)
            self.nbr_idx[i, :m] = nbrs
            self.nbr_idx[i, m:] = i  # padding; weight 0 keeps it inert
            self.ehat[i, :m + 1] = ehat
            self.agg_input[i] = ehat @ ds.morph[[i, *nbrs]]

    def batch_inputs(self, idx: np.ndarray, morph: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Node features (B, k+1, 1024) and weights (B, k+1) for a spot batch."""
        feats = np.concatenate([
            self.agg_input[idx][:, None, :],
            morph[self.nbr_idx[idx]],
        ], axis=1)
        return feats, self.ehat[idx]


def gcn_forward_batch(node_feats: np.ndarray, ehat: np.ndarray,
                      params: GcnParams) -> ad.Tensor:
    """Batched hub encoding over (B, k+1, 1024) node features."""
    b, nodes, dim = node_feats.shape
    flat = ad.Tensor(node_feats.reshape(b * nodes, dim))
    t = ad.relu(ad.add(ad.matmul(flat, params.w1), params.b1))
    t = ad.reshape(t, (b, nodes, GCN_DIM))
    pooled = ad.weighted_sum(ad.Tensor(ehat), t)
    return ad.relu(ad.add(ad.matmul(pooled, params.w2), params.b2))
