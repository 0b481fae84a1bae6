"""Confidence-gated differential expression analysis.

High-confidence predictions define the comparison groups; each gene is then
tested one class against the rest with the Wilcoxon rank-sum test (exact
enumeration for pooled sizes up to 20, tie- and continuity-corrected normal
approximation beyond). Outputs are flat TSV tables for prediction maps and
dot plots.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import Dataset
from .metrics import midranks

EXACT_LIMIT = 20  # pooled size at or below which the exact p-value is used
DEFAULT_TAU = 0.95
DEFAULT_TOP_N = 10


def select_high_confidence(prob: np.ndarray, tau: float = DEFAULT_TAU
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Indices of spots whose top softmax probability reaches tau, with their
    predicted class as the grouping label.

    A class that retains no spots is reported with a warning; it simply drops
    out of the downstream comparison.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError(f"probabilities must be 2-d, got shape {prob.shape}")
    conf = prob.max(axis=1)
    keep = np.flatnonzero(conf >= tau)
    pred = prob.argmax(axis=1)[keep]
    for c in range(prob.shape[1]):
        if not np.any(pred == c):
            warnings.warn(f"class {c} has no predictions with confidence >= {tau}; "
                          "excluded from differential expression")
    return keep, pred


def _tie_adjusted_sigma(pooled: np.ndarray, n_a: int, n_b: int) -> float:
    n = n_a + n_b
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum())
    var = (n_a * n_b / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    return math.sqrt(max(var, 0.0))


def _u_statistic(ranks: np.ndarray, n_a: int) -> float:
    return float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)


def wilcoxon_rank_sum(group_a, group_b, method: str = "auto") -> tuple[float, float]:
    """Rank-sum U for group A and the two-sided p-value.

    Midranks handle ties. For pooled sizes up to 20 the p-value enumerates
    every assignment of the pooled values to group A exactly; beyond that a
    normal approximation with tie and continuity corrections is used.
    ``method`` can force either path ("exact" / "normal").
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    n_a, n_b = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    u = _u_statistic(ranks, n_a)
    mu = n_a * n_b / 2.0

    exact = (n_a + n_b <= EXACT_LIMIT) if method == "auto" else (method == "exact")
    if exact and n_a + n_b > 24:
        raise ValueError("exact enumeration is limited to pooled sizes <= 24")
    if exact:
        combs = np.fromiter(
            (i for comb in combinations(range(n_a + n_b), n_a) for i in comb),
            dtype=np.int64,
        ).reshape(-1, n_a)
        u_all = ranks[combs].sum(axis=1) - n_a * (n_a + 1) / 2.0
        p = float((np.abs(u_all - mu) >= abs(u - mu)).mean())
        return u, p

    sigma = _tie_adjusted_sigma(pooled, n_a, n_b)
    if sigma == 0.0:
        return u, 1.0
    z = (abs(u - mu) - 0.5) / sigma
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return u, min(max(p, 0.0), 1.0)


def _vectorized_class_vs_rest(expr: np.ndarray, in_class: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """U, two-sided p and standardized effect for every gene column at once.

    Matches wilcoxon_rank_sum, including the exact path for small groups.
    """
    n, n_genes = expr.shape
    n_a = int(in_class.sum())
    n_b = n - n_a
    mu = n_a * n_b / 2.0
    u_vals = np.empty(n_genes)
    p_vals = np.empty(n_genes)
    z_vals = np.empty(n_genes)
    small = n <= EXACT_LIMIT
    for j in range(n_genes):
        col = expr[:, j]
        if small:
            u, p = wilcoxon_rank_sum(col[in_class], col[~in_class])
            sigma = _tie_adjusted_sigma(col, n_a, n_b)
        else:
            ranks = midranks(col)
            u = float(ranks[in_class].sum() - n_a * (n_a + 1) / 2.0)
            sigma = _tie_adjusted_sigma(col, n_a, n_b)
            if sigma == 0.0:
                p = 1.0
            else:
                zz = (abs(u - mu) - 0.5) / sigma
                p = min(max(math.erfc(max(zz, 0.0) / math.sqrt(2.0)), 0.0), 1.0)
        u_vals[j] = u
        p_vals[j] = p
        z_vals[j] = 0.0 if sigma == 0.0 else (u - mu) / sigma
    return u_vals, p_vals, z_vals


@dataclass
class GeneStat:
    gene: str
    statistic: float
    p_value: float
    effect: float          # standardized (signed) rank-sum statistic
    frac_expressing: float
    mean_expression: float


@dataclass
class DgeResult:
    """Per-class ranked genes: ascending p, then descending effect."""

    per_class: dict[str, list[GeneStat]] = field(default_factory=dict)

    def top(self, class_name: str, n: int) -> list[GeneStat]:
        return self.per_class[class_name][:n]


def benjamini_hochberg(p_values: np.ndarray) -> np.ndarray:
    """Step-up adjusted p-values (monotone, clipped at 1)."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adj = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def rank_genes_groups(ds: Dataset, spot_indices: np.ndarray, groups: np.ndarray,
                      adjust: bool = False) -> DgeResult:
    """One-vs-rest differential expression over the given spots.

    ``groups`` holds a class index per selected spot (usually the predicted
    class of high-confidence spots). Expression must be preprocessed.
    """
    if not ds.normalized:
        raise ValueError("differential expression requires preprocessed expression")
    spot_indices = np.asarray(spot_indices, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    if spot_indices.shape != groups.shape:
        raise ValueError("spot indices and groups differ in length")
    present = np.unique(groups)
    if present.size < 2:
        raise ValueError("differential expression needs at least two groups")

    expr = ds.expr[spot_indices]
    result = DgeResult()
    for c in present:
        in_class = groups == c
        u, p, z = _vectorized_class_vs_rest(expr, in_class)
        if adjust:
            p = benjamini_hochberg(p)
        sub = expr[in_class]
        frac = (sub > 0).mean(axis=0)
        mean_expr = sub.mean(axis=0)
        order = np.lexsort((-z, p))
        stats = [GeneStat(ds.panel.gene_names[j], float(u[j]), float(p[j]),
                          float(z[j]), float(frac[j]), float(mean_expr[j]))
                 for j in order]
        result.per_class[ds.class_names[c]] = stats
    return result


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "%.6g" % v


def write_prediction_map(predictions: list[dict], path) -> None:
    """TSV of spot_id, x, y, truth, predicted, confidence."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\tx\ty\ttruth\tpredicted\tconfidence\n")
        for row in predictions:
            fh.write(f"{row['spot_id']}\t{_fmt(row['x'])}\t{_fmt(row['y'])}\t"
                     f"{row['truth']}\t{row['predicted']}\t{_fmt(row['confidence'])}\n")


def write_dge_dotplot(dge: DgeResult, path, top_n: int = DEFAULT_TOP_N) -> None:
    """TSV of class, gene, p, fraction_expressing, mean_expression."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class\tgene\tp\tfraction_expressing\tmean_expression\n")
        for class_name, stats in dge.per_class.items():
            for gs in stats[:top_n]:
                fh.write(f"{class_name}\t{gs.gene}\t{_fmt(gs.p_value)}\t"
                         f"{_fmt(gs.frac_expressing)}\t{_fmt(gs.mean_expression)}\n")


def emit_reports(predictions: list[dict], dge: DgeResult | None, out_dir,
                 top_n: int = DEFAULT_TOP_N) -> list[Path]:
    """Write prediction_map.tsv and, when available, dge_dotplot.tsv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    pred_path = out / "prediction_map.tsv"
    write_prediction_map(predictions, pred_path)
    written.append(pred_path)
    if dge is not None:
        dge_path = out / "dge_dotplot.tsv"
        write_dge_dotplot(dge, dge_path, top_n)
        written.append(dge_path)
    return written
