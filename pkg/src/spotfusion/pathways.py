"""Pathway-level encodings of spatial expression.

Two complementary routes: clinical pathways selected from a curated gene-set
database by panel overlap, activated as plain sums of member-gene
expression; and learnable pathways, trainable weight rows whose largest 5%
of entries define a sparse support, softmax-normalized and used as a
weighted expression sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import GenePanel, PathwayDb

DEFAULT_OVERLAP_THRESHOLD = 0.9
DEFAULT_PATHWAY_COUNT = 200
DEFAULT_SELECT_FRAC = 0.05


@dataclass
class ClinicalPathwayMask:
    """Selected pathway names with their panel-present gene indices."""

    names: list[str]
    gene_indices: list[np.ndarray]
    d: int

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("clinical mask needs at least one pathway")
        if len(self.names) != len(self.gene_indices):
            raise ValueError("names and index sets differ in length")
        for name, idx in zip(self.names, self.gene_indices):
            idx = np.asarray(idx)
            if idx.size == 0:
                raise ValueError(f"pathway {name!r} has an empty index set")
            if idx.min() < 0 or idx.max() >= self.d:
                raise ValueError(f"pathway {name!r} has gene index outside panel")

    @property
    def k(self) -> int:
        return len(self.names)

    def matrix(self) -> np.ndarray:
        """Dense (k, d) 0/1 membership matrix."""
        m = np.zeros((self.k, self.d))
        for j, idx in enumerate(self.gene_indices):
            m[j, np.asarray(idx)] = 1.0
        return m


def select_pathways(db: PathwayDb, panel: GenePanel,
                    threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> ClinicalPathwayMask:
    """Keep pathways whose panel overlap |P ∩ panel| / |P| reaches the threshold.

    The comparison is >= so a pathway sitting exactly at the threshold is
    kept. Selected pathways keep database order and store the indices of
    their panel-present genes.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    index = panel.index()
    names, gene_indices = [], []
    for name, genes in db.pathways.items():
        present = sorted(index[g] for g in genes if g in index)
        overlap = len(present) / len(genes)
        if overlap >= threshold:
            names.append(name)
            gene_indices.append(np.asarray(present, dtype=np.int64))
    if not names:
        raise ValueError(
            f"no pathway reaches overlap {threshold}; lower the threshold"
        )
    return ClinicalPathwayMask(names, gene_indices, panel.d)


def clinical_encode(g, mask: ClinicalPathwayMask) -> ad.Tensor:
    """Pathway activations as sums of member-gene expression; linear in g."""
    g = g if isinstance(g, ad.Tensor) else ad.Tensor(g)
    if g.data.shape[-1] != mask.d:
        raise ValueError(
            f"expression width {g.data.shape[-1]} does not match mask panel size {mask.d}"
        )
    membership = ad.Tensor(mask.matrix().T)  # (d, k), constant
    return ad.matmul(g, membership)


@dataclass
class LearnablePathwayLayer:
    """Trainable gene-to-pathway mapping with top-fraction sparse gating."""

    weights: ad.Parameter                 # (a, d)
    frac: float = DEFAULT_SELECT_FRAC
    literal_masked_softmax: bool = False  # softmax over the full masked row

    def __post_init__(self):
        if self.weights.data.ndim != 2 or self.weights.data.shape[0] < 1:
            raise ValueError("pathway weights must be a non-empty (a, d) matrix")
        if not 0 < self.frac <= 1:
            raise ValueError(f"selection fraction must be in (0, 1], got {self.frac}")

    @property
    def a(self) -> int:
        return self.weights.data.shape[0]

    @property
    def d(self) -> int:
        return self.weights.data.shape[1]

    @property
    def k_sel(self) -> int:
        return max(1, int(np.ceil(self.frac * self.d)))

    def selected_indices(self) -> np.ndarray:
        """Per-row indices of the largest weights; ties favor lower indices."""
        if not np.all(np.isfinite(self.weights.data)):
            raise ValueError("non-finite pathway weight")
        order = np.argsort(-self.weights.data, axis=1, kind="stable")
        return order[:, : self.k_sel]


def init_learnable_pathways(rng: np.random.Generator, a: int, d: int,
                            frac: float = DEFAULT_SELECT_FRAC,
                            name: str = "pathway.w",
                            init_scale: float = 0.02,
                            literal_masked_softmax: bool = False) -> LearnablePathwayLayer:
    w = ad.Parameter(rng.normal(0, init_scale, (a, d)), name)
    return LearnablePathwayLayer(w, frac, literal_masked_softmax)


def learnable_encode(g, layer: LearnablePathwayLayer) -> ad.Tensor:
    """Activations of the learnable pathways for expression g (..., d) -> (..., a).

    Per row, the top fraction of weights is selected (mask constant during
    backward), a softmax over the selected entries yields convex gene
    weights, and the activation is the weighted expression sum. The literal
    flag instead applies the softmax to the full zero-masked row, giving
    unselected genes e^0 mass.
    """
    g = g if isinstance(g, ad.Tensor) else ad.Tensor(g)
    if g.data.shape[-1] != layer.d:
        raise ValueError(
            f"expression width {g.data.shape[-1]} does not match layer width {layer.d}"
        )
    idx = layer.selected_indices()
    if not layer.literal_masked_softmax:
        return ad.topk_gated_rows(layer.weights, g, idx)
    mask = np.zeros((layer.a, layer.d))
    mask[np.arange(layer.a)[:, None], idx] = 1.0
    attn = ad.softmax(ad.mul(layer.weights, ad.Tensor(mask)))
    return ad.matmul(g, ad.swap_last_axes(attn))
