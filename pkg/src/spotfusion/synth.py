"""Synthetic spatial dataset with planted class structure.

Each sample is a unit grid partitioned into contiguous class regions
(Voronoi cells of per-sample seed points), so a spot's neighborhood is
informative. Every class gets a distinct morphology prototype plus Gaussian
noise, and a set of marker genes (grouped into a class pathway) whose
Poisson rates are boosted inside the class. The planted truth records
markers and prototypes so recovery can be tested end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, GenePanel, MORPH_DIM, PathwayDb, SpotRecord


@dataclass
class SynthConfig:
    n_classes: int = 3
    n_spots: int = 400
    n_genes: int = 60
    n_pathways: int = 8
    markers_per_class: int = 10
    n_samples: int = 4
    split_counts: tuple[int, int, int] = (2, 1, 1)  # samples per train/val/test
    morph_scale: float = 1.0     # prototype entry scale
    morph_noise: float = 6.0     # per-dimension Gaussian noise around prototypes
    base_rate: float = 1.0       # Poisson rate of background genes
    marker_boost: float = 6.0    # multiplies base_rate for markers in their class
    genes_per_random_pathway: int = 10
    pathway_marker_coverage: float = 1.0  # fraction of markers the class pathway annotates
    min_class_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_spots < 9 * self.n_classes:
            raise ValueError(
                f"need at least {9 * self.n_classes} spots for {self.n_classes} classes"
            )
        if self.n_pathways < self.n_classes:
            raise ValueError("need at least one pathway per class")
        if self.markers_per_class * self.n_classes > self.n_genes:
            raise ValueError("marker genes exceed panel size")
        if sum(self.split_counts) != self.n_samples:
            raise ValueError(
                f"split counts {self.split_counts} do not sum to {self.n_samples} samples"
            )
        if min(self.split_counts) < 0 or self.n_samples < 1:
            raise ValueError("split counts must be non-negative with at least one sample")
        if self.n_spots // self.n_samples < max(9, self.n_classes):
            raise ValueError("too few spots per sample")
        if self.morph_noise < 0 or self.base_rate < 0 or self.marker_boost < 1:
            raise ValueError("noise levels out of range")
        if not 0 < self.pathway_marker_coverage <= 1:
            raise ValueError("pathway_marker_coverage must be in (0, 1]")


@dataclass
class PlantedTruth:
    """What the generator hid in the data, for recovery checks."""

    markers: dict[str, list[str]]           # class name -> marker gene names
    marker_pathways: dict[str, str]         # class name -> pathway name
    prototypes: np.ndarray                  # (C, 1024) morphology prototypes
    region_seeds: dict[str, np.ndarray] = field(default_factory=dict)


def _assign_regions(rng: np.random.Generator, side: int, n_spots: int,
                    n_classes: int, min_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Voronoi class labels over the first n_spots cells of a side x side grid."""
    gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n_spots].astype(float)
    for _ in range(200):
        seeds = rng.uniform(0, side, size=(n_classes, 2))
        d2 = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=n_classes)
        if counts.min() >= min_count:
            return labels, seeds
    raise ValueError(
        "could not partition the grid so every class reaches the minimum count; "
        "config infeasible"
    )


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, PathwayDb, PlantedTruth]:
    """Generate (raw-count dataset, pathway database, planted truth)."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    class_names = [f"C{c}" for c in range(cfg.n_classes)]
    gene_names = [f"G{j:04d}" for j in range(cfg.n_genes)]
    panel = GenePanel(tuple(gene_names))

    # markers occupy the leading columns, class by class
    marker_idx = {
        c: list(range(c * cfg.markers_per_class, (c + 1) * cfg.markers_per_class))
        for c in range(cfg.n_classes)
    }
    prototypes = rng.normal(0.0, cfg.morph_scale, size=(cfg.n_classes, MORPH_DIM))

    pathways: dict[str, set[str]] = {}
    marker_pathways: dict[str, str] = {}
    annotated = max(1, int(np.ceil(cfg.pathway_marker_coverage * cfg.markers_per_class)))
    for c in range(cfg.n_classes):
        name = f"PW_MARKER_{class_names[c]}"
        pathways[name] = {gene_names[j] for j in marker_idx[c][:annotated]}
        marker_pathways[class_names[c]] = name
    for p in range(cfg.n_pathways - cfg.n_classes):
        size = min(cfg.genes_per_random_pathway, cfg.n_genes)
        chosen = rng.choice(cfg.n_genes, size=size, replace=False)
        pathways[f"PW_RAND_{p}"] = {gene_names[j] for j in sorted(chosen)}
    db = PathwayDb(pathways)

    # spread spots as evenly as possible over the samples
    per_sample = [cfg.n_spots // cfg.n_samples] * cfg.n_samples
    for i in range(cfg.n_spots % cfg.n_samples):
        per_sample[i] += 1

    sample_splits: dict[str, str] = {}
    split_seq = (["train"] * cfg.split_counts[0] + ["val"] * cfg.split_counts[1]
                 + ["test"] * cfg.split_counts[2])

    spots: list[SpotRecord] = []
    region_seeds: dict[str, np.ndarray] = {}
    for s, ns in enumerate(per_sample):
        sample_id = f"S{s}"
        sample_splits[sample_id] = split_seq[s]
        side = int(np.ceil(np.sqrt(ns)))
        min_count = max(3, int(np.ceil(cfg.min_class_fraction * ns)))
        labels, seeds = _assign_regions(rng, side, ns, cfg.n_classes, min_count)
        region_seeds[sample_id] = seeds

        noise = rng.normal(0.0, 1.0, size=(ns, MORPH_DIM)) if cfg.morph_noise > 0 else 0.0
        morph = prototypes[labels] + cfg.morph_noise * noise

        lam = np.full((ns, cfg.n_genes), cfg.base_rate)
        for c in range(cfg.n_classes):
            rows = labels == c
            lam[np.ix_(rows, marker_idx[c])] = cfg.base_rate * cfg.marker_boost
        expr = rng.poisson(lam).astype(np.float64)

        gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        coords = np.stack([gx.ravel(), gy.ravel()], axis=1)[:ns]
        for i in range(ns):
            spots.append(SpotRecord(
                spot_id=f"{sample_id}_{i:05d}",
                sample_id=sample_id,
                x=float(coords[i, 0]),
                y=float(coords[i, 1]),
                morph=np.asarray(morph[i]),
                expr=expr[i],
                label=int(labels[i]),
            ))

    ds = Dataset(panel, spots, class_names, sample_splits, normalized=False)
    truth = PlantedTruth(
        markers={class_names[c]: [gene_names[j] for j in marker_idx[c]]
                 for c in range(cfg.n_classes)},
        marker_pathways=marker_pathways,
        prototypes=prototypes,
        region_seeds=region_seeds,
    )
    return ds, db, truth
