"""Dataset ingestion: spot tables, feature/expression matrices, GMT gene sets,
and the total-count + log1p expression preprocessing used before training.

On-disk layout is a JSON manifest pointing at TSV tables:

    manifest.json   {"class_names": [...], "spots_file": ..., "features_file": ...,
                     "expression_file": ..., "sample_splits": {"S0": "train", ...}}
    spots.tsv       spot_id  sample_id  x  y  label  (label may be empty)
    features.tsv    one row per spot, header = feature names (1024 columns)
    expression.tsv  one row per spot, header = gene names (non-negative counts)
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MORPH_DIM = 1024
TARGET_COUNT_SUM = 1e4
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class GenePanel:
    """Ordered, unique gene names measured across all spots."""

    gene_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.gene_names) < 1:
            raise ValueError("gene panel must contain at least one gene")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise ValueError("gene panel contains duplicate names")

    @property
    def d(self) -> int:
        return len(self.gene_names)

    def index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.gene_names)}


@dataclass
class SpotRecord:
    """One spatial measurement unit: morphology paired with expression."""

    spot_id: str
    sample_id: str
    x: float
    y: float
    morph: np.ndarray
    expr: np.ndarray
    label: int | None = None

    def __post_init__(self):
        if len(self.morph) != MORPH_DIM:
            raise ValueError(
                f"spot {self.spot_id}: morphology length {len(self.morph)} != {MORPH_DIM}"
            )
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"spot {self.spot_id}: non-finite coordinates")


class PathwayDb:
    """Named gene sets, preserving file order; every pathway is non-empty."""

    def __init__(self, pathways: dict[str, set[str]]):
        for name, genes in pathways.items():
            if not genes:
                raise ValueError(f"pathway {name!r} is empty")
        self.pathways: dict[str, set[str]] = dict(pathways)

    def __len__(self) -> int:
        return len(self.pathways)

    def __eq__(self, other) -> bool:
        return isinstance(other, PathwayDb) and self.pathways == other.pathways

    def names(self) -> list[str]:
        return list(self.pathways)


class Dataset:
    """Spots plus panel, class names, and per-sample split assignments.

    Stores columnar arrays for vectorized access; ``spots`` materializes the
    per-spot records. Immutable after construction by convention.
    """

    def __init__(self, panel: GenePanel, spots: list[SpotRecord],
                 class_names: list[str], sample_splits: dict[str, str],
                 normalized: bool = False):
        self.panel = panel
        self.class_names = list(class_names)
        self.sample_splits = dict(sample_splits)
        self.normalized = normalized

        n = len(spots)
        self.spot_ids = [s.spot_id for s in spots]
        self.sample_ids = [s.sample_id for s in spots]
        self.xy = np.zeros((n, 2))
        self.morph = np.zeros((n, MORPH_DIM))
        self.expr = np.zeros((n, panel.d))
        self.labels = np.full(n, -1, dtype=np.int64)
        for i, s in enumerate(spots):
            if len(s.expr) != panel.d:
                raise ValueError(
                    f"spot {s.spot_id}: expression length {len(s.expr)} != panel size {panel.d}"
                )
            if s.label is not None:
                if not 0 <= s.label < len(class_names):
                    raise ValueError(
                        f"spot {s.spot_id}: label {s.label} outside class range"
                    )
                self.labels[i] = s.label
            self.xy[i] = (s.x, s.y)
            self.morph[i] = s.morph
            self.expr[i] = s.expr
        for sid in self.sample_ids:
            if sid not in self.sample_splits:
                raise ValueError(f"sample {sid!r} has no split assignment")
        for sid, split in self.sample_splits.items():
            if split not in SPLIT_NAMES:
                raise ValueError(f"sample {sid!r} has unknown split {split!r}")

    def __len__(self) -> int:
        return len(self.spot_ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def spots(self) -> list[SpotRecord]:
        return [self.spot(i) for i in range(len(self))]

    def spot(self, i: int) -> SpotRecord:
        label = int(self.labels[i]) if self.labels[i] >= 0 else None
        return SpotRecord(self.spot_ids[i], self.sample_ids[i],
                          float(self.xy[i, 0]), float(self.xy[i, 1]),
                          self.morph[i], self.expr[i], label)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        mask = [self.sample_splits[sid] == split for sid in self.sample_ids]
        return np.flatnonzero(mask)

    def sample_indices(self, sample_id: str) -> np.ndarray:
        return np.flatnonzero([sid == sample_id for sid in self.sample_ids])


# ---------------------------------------------------------------------------
# GMT gene sets
# ---------------------------------------------------------------------------


def parse_gmt(path) -> PathwayDb:
    """Parse tab-separated gene sets: name, description, gene... per line."""
    pathways: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ValueError(
                    f"{path}: line {lineno}: expected name, description and at "
                    f"least one gene, got {len(fields)} fields"
                )
            name = fields[0]
            if name in pathways:
                raise ValueError(f"{path}: line {lineno}: duplicate pathway {name!r}")
            genes = {g for g in fields[2:] if g}
            if not genes:
                raise ValueError(f"{path}: line {lineno}: pathway {name!r} has no genes")
            pathways[name] = genes
    return PathwayDb(pathways)


def write_gmt(db: PathwayDb, path) -> None:
    """Write gene sets in GMT form; genes sorted for deterministic output."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, genes in db.pathways.items():
            fh.write("\t".join([name, "na"] + sorted(genes)) + "\n")


# ---------------------------------------------------------------------------
# manifest loading
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"class_names", "spots_file", "features_file", "expression_file",
                  "sample_splits"}


def _read_tsv_matrix(path: Path, name: str) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = []
        for rowno, line in enumerate(fh, start=2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != len(header):
                raise ValueError(
                    f"{name}: row {rowno}: {len(fields)} fields, header has {len(header)}"
                )
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ValueError(f"{name}: row {rowno}: malformed number")
    return header, np.asarray(rows, dtype=np.float64)


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset directory given its JSON manifest."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = _MANIFEST_KEYS - manifest.keys()
    if missing:
        raise ValueError(f"{manifest_path}: manifest missing keys {sorted(missing)}")
    base = manifest_path.parent
    class_names = list(manifest["class_names"])
    class_index = {c: i for i, c in enumerate(class_names)}
    sample_splits = dict(manifest["sample_splits"])

    spots_file = base / manifest["spots_file"]
    records = []
    with open(spots_file, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        expected = ["spot_id", "sample_id", "x", "y", "label"]
        if header != expected:
            raise ValueError(f"{spots_file}: header {header} != {expected}")
        for rowno, line in enumerate(fh, start=2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 5:
                raise ValueError(f"{spots_file}: row {rowno}: expected 5 fields")
            spot_id, sample_id, xs, ys, label_name = fields
            try:
                x, y = float(xs), float(ys)
            except ValueError:
                raise ValueError(f"{spots_file}: row {rowno}: malformed coordinate")
            if label_name == "":
                label = None
            elif label_name in class_index:
                label = class_index[label_name]
            else:
                raise ValueError(
                    f"{spots_file}: row {rowno}: unknown class label {label_name!r}"
                )
            records.append((spot_id, sample_id, x, y, label))

    feat_names, feats = _read_tsv_matrix(base / manifest["features_file"],
                                         str(base / manifest["features_file"]))
    gene_names, expr = _read_tsv_matrix(base / manifest["expression_file"],
                                        str(base / manifest["expression_file"]))
    n = len(records)
    if feats.shape != (n, MORPH_DIM):
        raise ValueError(
            f"{manifest['features_file']}: shape {feats.shape}, expected ({n}, {MORPH_DIM})"
        )
    if expr.shape[0] != n:
        raise ValueError(
            f"{manifest['expression_file']}: {expr.shape[0]} rows, expected {n}"
        )

    panel = GenePanel(tuple(gene_names))
    spots = [
        SpotRecord(sid, sample, x, y, feats[i], expr[i], label)
        for i, (sid, sample, x, y, label) in enumerate(records)
    ]
    return Dataset(panel, spots, class_names, sample_splits,
                   normalized=bool(manifest.get("normalized", False)))


def save_dataset(ds: Dataset, out_dir, float_fmt: str = "%.9g") -> Path:
    """Write a dataset directory (manifest + TSV tables); returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "spots.tsv", "w", encoding="utf-8") as fh:
        fh.write("spot_id\tsample_id\tx\ty\tlabel\n")
        for i in range(len(ds)):
            label = ds.class_names[ds.labels[i]] if ds.labels[i] >= 0 else ""
            fh.write(f"{ds.spot_ids[i]}\t{ds.sample_ids[i]}\t"
                     f"{float_fmt % ds.xy[i, 0]}\t{float_fmt % ds.xy[i, 1]}\t{label}\n")

    def write_matrix(path, header, mat, fmt):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(header) + "\n")
            for row in mat:
                fh.write("\t".join(fmt % v for v in row) + "\n")

    write_matrix(out / "features.tsv",
                 [f"m{j:04d}" for j in range(MORPH_DIM)], ds.morph, float_fmt)
    expr_fmt = "%d" if not ds.normalized and np.all(ds.expr == np.rint(ds.expr)) else float_fmt
    write_matrix(out / "expression.tsv", list(ds.panel.gene_names), ds.expr, expr_fmt)

    manifest = {
        "class_names": ds.class_names,
        "spots_file": "spots.tsv",
        "features_file": "features.tsv",
        "expression_file": "expression.tsv",
        "sample_splits": ds.sample_splits,
        "normalized": ds.normalized,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess_expression(ds: Dataset) -> Dataset:
    """Drop all-zero genes, total-count normalize each spot to 1e4, log1p.

    Spots with zero total expression are dropped with a warning. Already
    normalized datasets are returned unchanged, making the operation
    idempotent.
    """
    if ds.normalized:
        return ds
    if ds.expr.size and ds.expr.min() < 0:
        raise ValueError("expression contains negative values")

    totals_per_gene = ds.expr.sum(axis=0)
    keep_genes = totals_per_gene > 0
    if not keep_genes.any():
        raise ValueError("all genes have zero total expression")
    expr = ds.expr[:, keep_genes]
    panel = GenePanel(tuple(np.asarray(ds.panel.gene_names)[keep_genes]))

    totals_per_spot = expr.sum(axis=1)
    keep_spots = totals_per_spot > 0
    dropped = int((~keep_spots).sum())
    if dropped:
        warnings.warn(f"dropping {dropped} spots with zero total expression")

    scaled = expr[keep_spots] * (TARGET_COUNT_SUM / totals_per_spot[keep_spots, None])
    logged = np.log1p(scaled)

    spots = []
    for new_i, i in enumerate(np.flatnonzero(keep_spots)):
        label = int(ds.labels[i]) if ds.labels[i] >= 0 else None
        spots.append(SpotRecord(ds.spot_ids[i], ds.sample_ids[i],
                                float(ds.xy[i, 0]), float(ds.xy[i, 1]),
                                ds.morph[i], logged[new_i], label))
    return Dataset(panel, spots, ds.class_names, ds.sample_splits, normalized=True)


def intersect_panels(datasets: list[Dataset]) -> list[Dataset]:
    """Restrict several datasets to their common genes (order from the first)."""
    if not datasets:
        return []
    common = set(datasets[0].panel.gene_names)
    for ds in datasets[1:]:
        common &= set(ds.panel.gene_names)
    if not common:
        raise ValueError("datasets share no genes")
    ordered = [g for g in datasets[0].panel.gene_names if g in common]
    out = []
    for ds in datasets:
        idx = [ds.panel.index()[g] for g in ordered]
        panel = GenePanel(tuple(ordered))
        spots = []
        for i in range(len(ds)):
            label = int(ds.labels[i]) if ds.labels[i] >= 0 else None
            spots.append(SpotRecord(ds.spot_ids[i], ds.sample_ids[i],
                                    float(ds.xy[i, 0]), float(ds.xy[i, 1]),
                                    ds.morph[i], ds.expr[i, idx], label))
        out.append(Dataset(panel, spots, ds.class_names, ds.sample_splits,
                           normalized=ds.normalized))
    return out
