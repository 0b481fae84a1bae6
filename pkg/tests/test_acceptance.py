"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic benchmark is
a fixed configuration (3 classes, 2000 spots, 500 genes, 20 planted
pathways) and every run is seeded, so results are reproducible. Training
runs are shared between the learning and ablation criteria through a
module-scoped cache.
"""

import json
import time
from itertools import combinations

import numpy as np
import pytest

from spotfusion import autodiff as ad
from spotfusion.analysis import rank_genes_groups, select_high_confidence, wilcoxon_rank_sum
from spotfusion.cli import main as cli_main
from spotfusion.data import preprocess_expression
from spotfusion.fusion import FUSED_DIM, gate_weights, init_gate, gate_pool
from spotfusion.gradcheck import full_model_check, primitive_checks
from spotfusion.graph import MicroenvGraph, compute_edge_weights, normalized_weights
from spotfusion.metrics import auroc_macro, binary_auroc, compute_metrics, mean_metric
from spotfusion.pathways import (
    ClinicalPathwayMask,
    clinical_encode,
    learnable_encode,
    select_pathways,
)
from spotfusion.data import GenePanel, PathwayDb
from spotfusion.synth import SynthConfig, synth_generate
from spotfusion.training import (
    TrainConfig,
    ablation_config,
    class_weights,
    evaluate,
    train,
    weighted_ce,
)

# the synthetic benchmark: 3 classes, 2000 spots, 500 genes, 20 planted pathways
BENCHMARK = dict(n_classes=3, n_spots=2000, n_genes=500, n_pathways=20,
                 markers_per_class=10, n_samples=4, split_counts=(2, 1, 1),
                 morph_noise=14.0, marker_boost=1.7, base_rate=0.35,
                 pathway_marker_coverage=0.8)
BENCHMARK_EPOCHS = 8
ABLATION_SEEDS = (0, 1, 2, 3, 4)
LEARNING_SEEDS = (0, 1, 2)

ABLATION_GRID = [("full", "graph", "both", True),
                 ("graph_clinic", "graph", "clinic", True),
                 ("seq_only", "seq", "none", False),
                 ("st_only", "none", "none", True)]


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def benchmark_runs():
    """Test metrics for every ablation row and seed, plus full-run timings."""
    results = {label: [] for label, *_ in ABLATION_GRID}
    timings = []
    for seed in ABLATION_SEEDS:
        ds, db, _ = synth_generate(SynthConfig(seed=seed, **BENCHMARK))
        ds = preprocess_expression(ds)
        for label, image_mode, pathway_mode, st_branch in ABLATION_GRID:
            cfg = ablation_config(TrainConfig(epochs=BENCHMARK_EPOCHS, seed=seed),
                                  image_mode, pathway_mode, st_branch)
            start = time.perf_counter()
            model, _ = train(ds, db, cfg)
            elapsed = time.perf_counter() - start
            if label == "full":
                timings.append(elapsed)
            metrics, _, _, _ = evaluate(ds, "test", model, cfg)
            results[label].append(metrics.to_dict())
    return results, timings


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    prim = primitive_checks(seed=0)
    model_err = full_model_check(seed=0)
    elapsed = time.perf_counter() - start
    worst_prim = max(prim.values())
    ok = worst_prim < 1e-5 and model_err < 1e-4 and elapsed < 60.0
    report(1, ok, f"gradient fidelity: primitives max {worst_prim:.2e} < 1e-5, "
                  f"full model {model_err:.2e} < 1e-4, {elapsed:.1f}s < 60s")


def test_criterion_2_auroc_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(20, 201))
        c = int(rng.integers(2, 5))
        truth = rng.integers(0, c, n)
        while len(set(truth.tolist())) < 2:
            truth = rng.integers(0, c, n)
        # coarse probability grid: rows sum to one exactly, ties guaranteed
        prob = np.vstack([rng.multinomial(20, row) / 20.0
                          for row in rng.dirichlet(np.ones(c), size=n)])
        per_class = []
        for cls in range(c):
            pos = prob[truth == cls, cls]
            neg = prob[truth != cls, cls]
            if pos.size == 0:
                continue
            wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
            per_class.append(wins / (pos.size * neg.size))
            if binary_auroc(pos, neg) != per_class[-1]:
                mismatches += 1
        import warnings as _w
        with _w.catch_warnings():
            _w.simplefilter("ignore")
            if auroc_macro(truth, prob) != float(np.mean(per_class)):
                mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    report(2, ok, f"AUROC equals pairwise oracle on 100 instances "
                  f"({mismatches} mismatches), {elapsed:.1f}s < 10s")


def test_criterion_3_wilcoxon_oracle():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    checked = 0
    mismatches = 0
    for n_a in range(1, 8):
        for n_b in range(1, 9 - n_a):
            for _ in range(5):
                a = rng.integers(0, 4, n_a).astype(float)
                b = rng.integers(0, 4, n_b).astype(float)
                u, p = wilcoxon_rank_sum(a, b)
                pooled = np.concatenate([a, b])
                mu = n_a * n_b / 2.0

                def u_count(ga, gb):
                    ga, gb = np.asarray(ga), np.asarray(gb)
                    return ((ga[:, None] > gb[None, :]).sum()
                            + 0.5 * (ga[:, None] == gb[None, :]).sum())

                u_obs = u_count(a, b)
                hits, total = 0, 0
                for comb in combinations(range(n_a + n_b), n_a):
                    mask = np.zeros(n_a + n_b, dtype=bool)
                    mask[list(comb)] = True
                    total += 1
                    if abs(u_count(pooled[mask], pooled[~mask]) - mu) >= abs(u_obs - mu):
                        hits += 1
                checked += 1
                if not (u == u_obs and p == hits / total):
                    mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30.0
    report(3, ok, f"Wilcoxon exact path equals enumeration on {checked} fixtures "
                  f"({mismatches} mismatches), {elapsed:.1f}s < 30s")


def test_criterion_4_formula_fixtures():
    cw = class_weights([0] * 6 + [1] * 4 + [2] * 2, 3)
    ok_cw = np.allclose(cw.w, [0.6667, 1.0, 2.0], atol=1e-4)

    ce = weighted_ce(ad.Tensor([0.0, 0.0]), 0, [1.0, 1.0]).item()
    ok_ce = abs(ce - np.log(2.0)) < 1e-12

    panel = GenePanel(tuple(f"G{i}" for i in range(10)))
    db = PathwayDb({"NINE": {f"G{i}" for i in range(9)} | {"XX"},
                    "EIGHT": {f"G{i}" for i in range(8)} | {"XX", "YY"}})
    mask = select_pathways(db, panel, threshold=0.9)
    ok_sel = mask.names == ["NINE"]

    e = compute_edge_weights([0.0, 0.0], [[2.0, 0.0]], [1.0], [[3.0]], eps=1e-12)
    ok_e = abs(e[0] - 0.375) < 1e-9

    ok = ok_cw and ok_ce and ok_sel and ok_e
    report(4, ok, f"formula fixtures: weights {np.round(cw.w, 4).tolist()}, "
                  f"CE {ce:.4f}=ln2, overlap keeps 9/10 rejects 8/10, edge e={e[0]:.3f}")


def test_criterion_5_synthetic_learning(benchmark_runs):
    results, timings = benchmark_runs
    bal = [results["full"][i]["bal_acc"] for i, _ in enumerate(LEARNING_SEEDS)]
    mean_bal = float(np.mean(bal))
    slowest = max(timings[: len(LEARNING_SEEDS)])
    ok = mean_bal >= 0.90 and slowest < 300.0 and BENCHMARK_EPOCHS <= 60
    report(5, ok, f"synthetic learning: balanced accuracy {mean_bal:.4f} >= 0.90 "
                  f"over {len(LEARNING_SEEDS)} seeds ({BENCHMARK_EPOCHS} epochs), "
                  f"slowest run {slowest:.0f}s < 300s on one core")


def test_criterion_6_ablation_trend(benchmark_runs):
    results, _ = benchmark_runs
    means = {label: float(np.mean([m["mean"] for m in rows]))
             for label, rows in results.items()}
    ok = (means["full"] >= means["graph_clinic"] >= means["seq_only"]
          and means["full"] >= means["st_only"])
    report(6, ok, "ablation trend over 5 seeds: "
                  f"full {means['full']:.4f} >= graph+clinic {means['graph_clinic']:.4f} "
                  f">= image-seq {means['seq_only']:.4f}; "
                  f"full >= ST-only {means['st_only']:.4f}")


def test_criterion_7_dge_recovery():
    cfg = SynthConfig(n_classes=3, n_spots=2000, n_genes=500, n_pathways=20,
                      markers_per_class=10, n_samples=4, split_counts=(2, 1, 1),
                      morph_noise=4.0, marker_boost=5.0, base_rate=0.5,
                      pathway_marker_coverage=0.8, seed=0)
    ds, db, truth = synth_generate(cfg)
    ds = preprocess_expression(ds)
    tcfg = TrainConfig(epochs=15, seed=0)
    model, _ = train(ds, db, tcfg)
    _, _, idx, probs = evaluate(ds, "test", model, tcfg)
    keep, groups = select_high_confidence(probs, tau=0.95)
    dge = rank_genes_groups(ds, idx[keep], groups)
    worst_hits = 10
    worst_p = 0.0
    for cname, markers in truth.markers.items():
        top10 = dge.per_class[cname][:10]
        found = [g for g in top10 if g.gene in markers]
        worst_hits = min(worst_hits, len(found))
        worst_p = max(worst_p, max(g.p_value for g in found))
    ok = worst_hits >= 8 and worst_p < 1e-3
    report(7, ok, f"DGE recovery: >= {worst_hits}/10 planted markers in every "
                  f"class's top-10, all with p <= {worst_p:.2e} < 1e-3")


def test_criterion_8_mean_column_arithmetic():
    value = mean_metric(0.801, 0.829, 0.931, 0.970)
    ok = abs(value - 0.883) < 0.0005
    report(8, ok, f"summary-mean arithmetic: (0.801+0.829+0.931+0.970)/4 = "
                  f"{value:.5f}, within 0.0005 of 0.883")


def test_criterion_9_train_determinism(tmp_path):
    data = tmp_path / "data"
    args = ["--classes", "2", "--spots", "120", "--genes", "16", "--pathways", "4",
            "--markers", "4", "--samples", "3", "--morph-noise", "2.0", "--seed", "7"]
    assert cli_main(["synth", "--out", str(data)] + args) == 0
    outputs = []
    for tag in ("a", "b"):
        ckpt = tmp_path / f"ckpt_{tag}"
        assert cli_main(["train", "--data", str(data / "manifest.json"),
                         "--gmt", str(data / "pathways.gmt"), "--out", str(ckpt),
                         "--epochs", "2", "--seed", "11", "--pathway-count", "8"]) == 0
        ev = tmp_path / f"eval_{tag}"
        assert cli_main(["eval", "--data", str(data / "manifest.json"),
                         "--checkpoint", str(ckpt), "--out", str(ev)]) == 0
        outputs.append((
            (ckpt / "params.bin").read_bytes(),
            (ckpt / "params.json").read_bytes(),
            (ev / "metrics.json").read_bytes(),
        ))
    ok = outputs[0] == outputs[1]
    report(9, ok, "determinism: repeated train + eval produce byte-identical "
                  "checkpoints and metrics JSON")


def test_criterion_10_invariant_battery():
    rng = np.random.default_rng(10)
    cases = 1000
    failures = []

    # softmax: sums to one, shift invariant
    for _ in range(cases):
        x = rng.normal(0, 5, size=rng.integers(2, 10))
        s = ad.softmax(x).data
        if abs(s.sum() - 1.0) >= 1e-12 or np.abs(
                s - ad.softmax(x + rng.normal()).data).max() >= 1e-12:
            failures.append("softmax")
            break

    # layer norm moments; wide high-variance rows keep the eps/var deficit
    # of the output variance well under the 1e-6 tolerance
    for _ in range(cases):
        x = rng.normal(0, 30, size=rng.integers(16, 48))
        y = ad.layer_norm(x).data
        if abs(y.mean()) >= 1e-10 or abs(y.var() - 1.0) >= 1e-6:
            failures.append("layer_norm")
            break

    # dropout eval identity
    for _ in range(cases):
        x = rng.normal(size=rng.integers(1, 40))
        if not np.array_equal(ad.dropout(ad.Tensor(x), 0.5, "eval", 1).data, x):
            failures.append("dropout_eval")
            break

    # graph: normalized weights sum to one; edge weights symmetric
    for _ in range(cases):
        e = rng.uniform(0, 50, size=rng.integers(1, 9))
        g = MicroenvGraph(0, list(range(1, e.size + 1)), e)
        if abs(normalized_weights(g).sum() - 1.0) >= 1e-12:
            failures.append("edge_normalization")
            break
        x1, x2 = rng.normal(size=(2, 6))
        g1, g2 = rng.normal(size=(2, 4))
        if compute_edge_weights(x1, [x2], g1, [g2])[0] != \
           compute_edge_weights(x2, [x1], g2, [g1])[0]:
            failures.append("edge_symmetry")
            break

    # pathways: clinical linearity; learnable convex bounds
    mask = ClinicalPathwayMask(["A", "B"], [np.asarray([0, 2]), np.asarray([1, 3, 4])], 6)
    for _ in range(cases):
        g1, g2 = rng.normal(size=(2, 6))
        a, b = rng.normal(size=2)
        lhs = clinical_encode(a * g1 + b * g2, mask).data
        rhs = a * clinical_encode(g1, mask).data + b * clinical_encode(g2, mask).data
        if not np.allclose(lhs, rhs, atol=1e-10):
            failures.append("clinical_linearity")
            break
    from spotfusion.pathways import LearnablePathwayLayer
    for _ in range(cases):
        w = ad.Parameter(rng.normal(size=(3, 12)), "w")
        layer = LearnablePathwayLayer(w, frac=0.25)
        g = rng.normal(size=12)
        z = learnable_encode(g, layer).data
        idx = layer.selected_indices()
        bad = False
        for i in range(3):
            sel = g[idx[i]]
            if not (sel.min() - 1e-12 <= z[i] <= sel.max() + 1e-12):
                bad = True
        if bad:
            failures.append("learnable_convexity")
            break

    # gates: probability vector and convex hull
    gate = init_gate(rng, 2, "g")
    for _ in range(cases):
        f1 = ad.Tensor(rng.normal(size=(1, FUSED_DIM)))
        f2 = ad.Tensor(rng.normal(size=(1, FUSED_DIM)))
        w = gate_weights([f1, f2], gate).data
        out = gate_pool([f1, f2], gate).data
        lo = np.minimum(f1.data, f2.data) - 1e-12
        hi = np.maximum(f1.data, f2.data) + 1e-12
        if w.min() < 0 or abs(w.sum() - 1.0) >= 1e-12 or \
           not (np.all(out >= lo) and np.all(out <= hi)):
            failures.append("gate")
            break

    # training: weighted support identity; unit weights match plain CE
    for _ in range(cases):
        c = int(rng.integers(1, 6))
        counts = rng.integers(1, 25, c)
        labels = np.repeat(np.arange(c), counts)
        cw = class_weights(labels, c)
        if not np.isclose((cw.counts * cw.w).sum(), labels.size):
            failures.append("class_weights")
            break
        logits = rng.normal(0, 4, max(c, 2))
        label = int(rng.integers(0, max(c, 2)))
        loss = weighted_ce(ad.Tensor(logits), label, np.ones(max(c, 2))).item()
        m = logits.max()
        plain = -(logits[label] - m - np.log(np.exp(logits - m).sum()))
        if abs(loss - plain) >= 1e-10:
            failures.append("weighted_ce")
            break

    # analysis: U range, shift invariance, swap symmetry
    for _ in range(cases):
        a = rng.normal(size=rng.integers(1, 12))
        b = rng.normal(size=rng.integers(1, 12))
        u, p = wilcoxon_rank_sum(a, b)
        u2, p2 = wilcoxon_rank_sum(a + 5.5, b + 5.5)
        _, p_swap = wilcoxon_rank_sum(b, a)
        if not (0.0 <= u <= a.size * b.size and u == u2 and p == p2 and p == p_swap):
            failures.append("wilcoxon")
            break

    # metrics bounded in [0, 1]
    import warnings as _w
    for _ in range(cases):
        n, c = int(rng.integers(6, 40)), int(rng.integers(2, 5))
        truth = rng.integers(0, c, n)
        if len(set(truth.tolist())) < c:
            continue
        prob = rng.dirichlet(np.ones(c), size=n)
        with _w.catch_warnings():
            _w.simplefilter("ignore")
            m = compute_metrics(truth, prob.argmax(axis=1), prob)
        if not all(0.0 <= v <= 1.0 for v in m.to_dict().values()):
            failures.append("metric_bounds")
            break

    ok = not failures
    report(10, ok, f"invariant battery: {cases} randomized cases per property, "
                   f"failures: {failures or 'none'}")
