"""Finite-difference audit: every primitive, then the full model loss.

Primitive checks sweep all parameter entries; the full-model check samples
entries per parameter (the parameter count makes a full sweep infeasible)
with dropout in eval mode so the loss is deterministic. Random draws keep a
margin from ReLU kinks and top-k selection boundaries so the central
difference stays on one side of each non-smooth point.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import preprocess_expression
from .model import ModelParams, model_forward
from .synth import SynthConfig, synth_generate
from .training import FeatureCache, TrainConfig, build_model_spec, class_weights

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


def _away_from_kink(rng, shape, margin=1e-3):
    x = rng.normal(0, 1.0, shape)
    x[np.abs(x) < margin] += 2 * margin
    return x


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per primitive, all entries."""
    rng = np.random.Generator(np.random.PCG64(seed))
    errors: dict[str, float] = {}

    def check(name, fn, params, step=1e-6):
        errors[name] = ad.finite_diff_check(fn, params, step=step)

    a = ad.Parameter(rng.normal(0, 1, (3, 4)), "a")
    b = ad.Parameter(rng.normal(0, 1, (4, 5)), "b")
    t = ad.Tensor(rng.normal(0, 1, (3, 5)))
    check("matmul", lambda ps: ad.mse(ad.matmul(ps[0], ps[1]), t), [a, b])

    a = ad.Parameter(rng.normal(0, 1, (3, 5)), "a")
    bias = ad.Parameter(rng.normal(0, 1, (5,)), "b")
    check("add", lambda ps: ad.mse(ad.add(ps[0], ps[1]), t), [a, bias])
    check("mul", lambda ps: ad.mse(ad.mul(ps[0], ps[1]), t), [a, bias])

    r = ad.Parameter(_away_from_kink(rng, (4, 6)), "r")
    zt = ad.Tensor(np.zeros((4, 6)))
    check("relu", lambda ps: ad.mse(ad.relu(ps[0]), zt), [r])

    ln = ad.Parameter(rng.normal(0, 1, (4, 6)), "ln")
    check("layer_norm", lambda ps: ad.mse(ad.layer_norm(ps[0]), zt), [ln])

    sm = ad.Parameter(rng.normal(0, 1, (4, 6)), "sm")
    check("softmax", lambda ps: ad.mse(ad.softmax(ps[0]), zt), [sm])

    d1 = ad.Parameter(rng.normal(0, 1, (4, 6)), "d1")
    check("dropout", lambda ps: ad.mse(
        ad.dropout(ps[0], 0.4, "train", seed=123), zt), [d1])

    m1 = ad.Parameter(rng.normal(0, 1, (5,)), "m1")
    m2 = ad.Parameter(rng.normal(0, 1, (5,)), "m2")
    check("mse", lambda ps: ad.mse(ps[0], ps[1]), [m1, m2])

    c1 = ad.Parameter(rng.normal(0, 1, (3, 4)), "c1")
    c2 = ad.Parameter(rng.normal(0, 1, (3, 2)), "c2")
    ct = ad.Tensor(rng.normal(0, 1, (3, 6)))
    check("concat", lambda ps: ad.mse(ad.concat(ps, axis=-1), ct), [c1, c2])

    ws = ad.Parameter(rng.normal(0, 1, (3, 4)), "ws")
    items = ad.Parameter(rng.normal(0, 1, (3, 4, 5)), "items")
    wt = ad.Tensor(rng.normal(0, 1, (3, 5)))
    check("weighted_sum",
          lambda ps: ad.mse(ad.weighted_sum(ps[0], ps[1]), wt), [ws, items])

    lg = ad.Parameter(rng.normal(0, 1, (6, 3)), "lg")
    labels = rng.integers(0, 3, 6)
    cw = np.array([0.5, 1.0, 1.5])
    check("weighted_ce",
          lambda ps: ad.weighted_cross_entropy(ps[0], labels, cw), [lg])

    # keep perturbations inside the top-k gap so the selection is stable
    pw = ad.Parameter(rng.normal(0, 1, (4, 12)), "pw")
    genes = ad.Parameter(rng.normal(0, 1, (3, 12)), "genes")
    idx = np.argsort(-pw.data, axis=1, kind="stable")[:, :3]
    gt = ad.Tensor(rng.normal(0, 1, (3, 4)))
    check("topk_gated_rows",
          lambda ps: ad.mse(ad.topk_gated_rows(ps[0], ps[1], idx), gt), [pw, genes])

    return errors


def full_model_check(seed: int = 0, sample_per_param: int = 12,
                     step: float = 1e-6) -> float:
    """Finite-difference check of the complete training loss on 4 spots."""
    cfg = SynthConfig(n_classes=2, n_spots=120, n_genes=24, n_pathways=3,
                      markers_per_class=4, n_samples=3, split_counts=(1, 1, 1),
                      seed=seed)
    ds, db, _ = synth_generate(cfg)
    ds = preprocess_expression(ds)

    tcfg = TrainConfig(seed=seed, learnable_pathways=6, image_mode="graph",
                       pathway_mode="both", st_branch=True)
    spec = build_model_spec(ds, db, tcfg)
    rng = np.random.Generator(np.random.PCG64(ad.derive_seed(seed, "init")))
    model = ModelParams(spec, rng)
    cache = FeatureCache(ds, tcfg, need_graph=True)

    train_idx = ds.split_indices("train")
    micro = train_idx[:4]
    batch = cache.batch(micro)
    cw = class_weights(ds.labels[train_idx], ds.n_classes)

    def loss_fn(params):
        logits = model_forward(model, batch, mode="eval")
        return ad.weighted_cross_entropy(logits, ds.labels[micro], cw.w)

    return ad.finite_diff_check(loss_fn, model.parameters(), step=step,
                                sample=sample_per_param, seed=seed)


def run_gradcheck(verbose: bool = False, seed: int = 0) -> float:
    """Run the whole audit; returns the overall max relative error."""
    errors = primitive_checks(seed)
    worst = 0.0
    for name, err in errors.items():
        worst = max(worst, err)
        if verbose:
            flag = "ok" if err < PRIMITIVE_TOL else "FAIL"
            print(f"primitive {name:<16s} max rel err {err:.3e}  [{flag}]")
    model_err = full_model_check(seed)
    worst = max(worst, model_err)
    if verbose:
        flag = "ok" if model_err < MODEL_TOL else "FAIL"
        print(f"full model       max rel err {model_err:.3e}  [{flag}]")
    return worst
