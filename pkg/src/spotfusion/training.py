"""Class-weighted cross-entropy training with decoupled weight decay.

The epoch loop draws seeded mini-batch shuffles, keeps the checkpoint with
the best validation balanced accuracy (earlier epoch wins ties), and routes
all randomness through named substreams of one seed so a run is
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, PathwayDb
from .fusion import RngPlan
from .graph import DEFAULT_EPS, DEFAULT_NEIGHBORS, GraphCache
from .metrics import MetricsBundle, compute_metrics
from .model import Batch, ModelParams, ModelSpec, model_forward
from .pathways import select_pathways


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    learnable_pathways: int = 200
    select_frac: float = 0.05
    overlap_threshold: float = 0.9
    image_mode: str = "graph"        # none | seq | graph
    pathway_mode: str = "both"       # none | clinic | learnable | both
    st_branch: bool = True
    neighbors: int = DEFAULT_NEIGHBORS
    edge_eps: float = DEFAULT_EPS
    init_scale: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    token_mode: bool = False
    literal_masked_softmax: bool = False
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 < self.select_frac <= 1:
            raise ValueError("select_frac must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassWeights:
    w: np.ndarray
    n: int
    c: int
    counts: np.ndarray


def class_weights(labels, n_classes: int) -> ClassWeights:
    """W_i = N / (C * N_i); every class must appear at least once."""
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes)
    for c in range(n_classes):
        if counts[c] == 0:
            raise ValueError(f"class {c} has no training samples")
    n = int(y.size)
    w = n / (n_classes * counts.astype(np.float64))
    return ClassWeights(w=w, n=n, c=n_classes, counts=counts)


def weighted_ce(logits, label: int, weights) -> ad.Tensor:
    """Per-sample class-weighted cross entropy (log-sum-exp stabilized)."""
    return ad.weighted_cross_entropy(logits, label, np.asarray(weights, dtype=np.float64))


def weighted_ce_batch(logits, labels, weights) -> ad.Tensor:
    """Mean class-weighted cross entropy over a batch."""
    return ad.weighted_cross_entropy(logits, labels, np.asarray(weights, dtype=np.float64))


class AdamW:
    """Bias-corrected Adam with weight decay decoupled from the gradient term."""

    def __init__(self, params: list[ad.Parameter], lr: float = 1e-4,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        max_size = max((p.data.size for p in self.params), default=1)
        self._scratch = np.empty(max_size)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        decay = 1.0 - self.lr * self.weight_decay
        # m / (sqrt(v / bc2) + eps) == m * sqrt(bc2) / (sqrt(v) + eps * sqrt(bc2)),
        # so the bias corrections fold into scalars and each parameter needs
        # one shared scratch buffer and no temporaries
        sqrt_bc2 = np.sqrt(bc2)
        step_scale = self.lr * sqrt_bc2 / bc1
        eps_eff = self.eps * sqrt_bc2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            s = self._scratch[: p.data.size].reshape(p.data.shape)
            np.multiply(g, g, out=s)
            s *= 1.0 - self.beta2
            v *= self.beta2
            v += s
            np.multiply(g, 1.0 - self.beta1, out=s)
            m *= self.beta1
            m += s
            np.sqrt(v, out=s)
            s += eps_eff
            np.divide(m, s, out=s)
            s *= step_scale
            p.data *= decay
            p.data -= s


# ---------------------------------------------------------------------------
# feature preparation
# ---------------------------------------------------------------------------


class FeatureCache:
    """Dataset-level constants for batching: graph inputs and expression."""

    def __init__(self, ds: Dataset, cfg: TrainConfig, need_graph: bool):
        self.ds = ds
        self.graph = GraphCache(ds, cfg.neighbors, cfg.edge_eps) if need_graph else None

    def batch(self, idx: np.ndarray) -> Batch:
        feats = ehat = None
        if self.graph is not None:
            feats, ehat = self.graph.batch_inputs(idx, self.ds.morph)
        return Batch(morph=self.ds.morph[idx], expr=self.ds.expr[idx],
                     gcn_feats=feats, gcn_ehat=ehat)


def build_model_spec(ds: Dataset, pathway_db: PathwayDb | None,
                     cfg: TrainConfig) -> ModelSpec:
    clinical_names: list[str] = []
    clinical_idx: list[list[int]] = []
    if pathway_db is None:
        if cfg.pathway_mode in ("clinic", "both"):
            raise ValueError("clinical pathway mode needs a pathway database")
    else:
        # selected even when the clinical branch is ablated, so every
        # configuration builds the identical parameter set from one seed
        mask = select_pathways(pathway_db, ds.panel, cfg.overlap_threshold)
        clinical_names = mask.names
        clinical_idx = [list(map(int, ix)) for ix in mask.gene_indices]
    spec = ModelSpec(
        n_classes=ds.n_classes,
        n_genes=ds.panel.d,
        class_names=list(ds.class_names),
        gene_names=list(ds.panel.gene_names),
        image_mode=cfg.image_mode,
        pathway_mode=cfg.pathway_mode,
        st_branch=cfg.st_branch,
        learnable_pathways=cfg.learnable_pathways,
        select_frac=cfg.select_frac,
        clinical_names=clinical_names,
        clinical_gene_indices=clinical_idx,
        token_mode=cfg.token_mode,
        literal_masked_softmax=cfg.literal_masked_softmax,
        init_scale=cfg.init_scale,
    )
    spec.validate()
    return spec


def _predict_proba(model: ModelParams, cache: FeatureCache, idx: np.ndarray,
                   batch_size: int) -> np.ndarray:
    probs = np.zeros((idx.size, model.spec.n_classes))
    with ad.no_grad():
        for start in range(0, idx.size, batch_size):
            chunk = idx[start:start + batch_size]
            logits = model_forward(model, cache.batch(chunk), mode="eval")
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs[start:start + chunk.size] = e / e.sum(axis=1, keepdims=True)
    return probs


def _balanced_accuracy_of(model: ModelParams, cache: FeatureCache, idx: np.ndarray,
                          batch_size: int) -> float:
    probs = _predict_proba(model, cache, idx, batch_size)
    pred = probs.argmax(axis=1)
    truth = cache.ds.labels[idx]
    recalls = []
    for c in range(model.spec.n_classes):
        mask = truth == c
        if mask.any():
            recalls.append(float((pred[mask] == c).mean()))
    return float(np.mean(recalls))


def train(ds: Dataset, pathway_db: PathwayDb | None, cfg: TrainConfig
          ) -> tuple[ModelParams, list[dict]]:
    """Train on the train split, selecting the best validation checkpoint.

    Returns the model with the best-validation parameters restored and the
    per-epoch history [{train_loss, val_bal_acc}, ...].
    """
    cfg.validate()
    if not ds.normalized:
        raise ValueError("dataset is not preprocessed; run preprocess_expression first")
    train_idx = ds.split_indices("train")
    val_idx = ds.split_indices("val")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation splits must be non-empty")
    if np.any(ds.labels[train_idx] < 0) or np.any(ds.labels[val_idx] < 0):
        raise ValueError("train and validation spots must be labeled")

    spec = build_model_spec(ds, pathway_db, cfg)
    init_rng = np.random.Generator(np.random.PCG64(ad.derive_seed(cfg.seed, "init")))
    model = ModelParams(spec, init_rng)
    cache = FeatureCache(ds, cfg, need_graph=spec.image_mode == "graph")

    cw = class_weights(ds.labels[train_idx], ds.n_classes)
    opt = AdamW(model.trainable_parameters(), cfg.lr, cfg.weight_decay,
                cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = np.random.Generator(np.random.PCG64(ad.derive_seed(cfg.seed, "shuffle")))
    dropout_seed = ad.derive_seed(cfg.seed, "dropout")

    history: list[dict] = []
    best_acc = -1.0
    best_snap = model.snapshot()
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]  # last partial batch kept
            plan = RngPlan(dropout_seed, step)
            logits = model_forward(model, cache.batch(idx), mode="train", plan=plan)
            loss = weighted_ce_batch(logits, ds.labels[idx], cw.w)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {step}"
                )
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            step += 1
        val_acc = _balanced_accuracy_of(model, cache, val_idx, cfg.eval_batch_size)
        history.append({"train_loss": float(np.mean(losses)), "val_bal_acc": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best_snap = model.snapshot()
    model.restore(best_snap)
    return model, history


def evaluate(ds: Dataset, split: str, model: ModelParams, cfg: TrainConfig | None = None
             ) -> tuple[MetricsBundle, list[dict], np.ndarray, np.ndarray]:
    """Metrics plus per-spot predictions with confidences for one split.

    Returns (metrics, prediction rows, split spot indices, probabilities).
    """
    cfg = cfg or TrainConfig()
    if list(ds.class_names) != list(model.spec.class_names):
        raise ValueError(
            f"dataset classes {ds.class_names} do not match checkpoint "
            f"{model.spec.class_names}"
        )
    idx = ds.split_indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    cache = FeatureCache(ds, cfg, need_graph=model.spec.image_mode == "graph")
    probs = _predict_proba(model, cache, idx, cfg.eval_batch_size)
    pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)

    rows = []
    for j, i in enumerate(idx):
        truth_name = ds.class_names[ds.labels[i]] if ds.labels[i] >= 0 else "NA"
        rows.append({
            "spot_id": ds.spot_ids[i],
            "x": float(ds.xy[i, 0]),
            "y": float(ds.xy[i, 1]),
            "truth": truth_name,
            "predicted": ds.class_names[pred[j]],
            "confidence": float(conf[j]),
        })

    labeled = ds.labels[idx] >= 0
    if not labeled.any():
        raise ValueError(f"split {split!r} has no labeled spots to score")
    metrics = compute_metrics(ds.labels[idx][labeled], pred[labeled], probs[labeled])
    return metrics, rows, idx, probs


def predict_proba_dataset(ds: Dataset, model: ModelParams,
                          cfg: TrainConfig | None = None,
                          idx: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities for the given spots (all spots by default)."""
    cfg = cfg or TrainConfig()
    if idx is None:
        idx = np.arange(len(ds))
    cache = FeatureCache(ds, cfg, need_graph=model.spec.image_mode == "graph")
    return idx, _predict_proba(model, cache, idx, cfg.eval_batch_size)


# ---------------------------------------------------------------------------
# ablation orchestration
# ---------------------------------------------------------------------------

# rows of the standard ablation grid: (label, image_mode, pathway_mode, st_branch)
ABLATION_ROWS: list[tuple[str, str, str, bool]] = [
    ("image_seq_only", "seq", "none", False),
    ("st_only", "none", "none", True),
    ("seq_plus_st", "seq", "none", True),
    ("graph_plus_st", "graph", "none", True),
    ("graph_clinic_st", "graph", "clinic", True),
    ("graph_learnable_st", "graph", "learnable", True),
    ("full", "graph", "both", True),
]


def ablation_config(base: TrainConfig, image_mode: str, pathway_mode: str,
                    st_branch: bool, seed: int | None = None) -> TrainConfig:
    cfg = TrainConfig(**base.to_dict())
    cfg.image_mode = image_mode
    cfg.pathway_mode = pathway_mode
    cfg.st_branch = st_branch
    if seed is not None:
        cfg.seed = seed
    return cfg


def run_ablation(ds: Dataset, pathway_db: PathwayDb | None, base: TrainConfig,
                 rows: list[tuple[str, str, str, bool]] | None = None,
                 seeds: list[int] | None = None, split: str = "test") -> list[dict]:
    """Train/evaluate each configuration over the seeds; mean metrics per row."""
    rows = rows if rows is not None else ABLATION_ROWS
    seeds = seeds if seeds is not None else [base.seed]
    out = []
    for label, image_mode, pathway_mode, st_branch in rows:
        per_seed = []
        for seed in seeds:
            cfg = ablation_config(base, image_mode, pathway_mode, st_branch, seed)
            model, _ = train(ds, pathway_db, cfg)
            metrics, _, _, _ = evaluate(ds, split, model, cfg)
            per_seed.append(metrics.to_dict())
        summary = {"row": label, "image": image_mode, "pathway": pathway_mode,
                   "st": st_branch, "seeds": len(seeds)}
        for key in ("bal_acc", "w_f1", "auprc", "auroc", "mean"):
            summary[key] = float(np.mean([m[key] for m in per_seed]))
        out.append(summary)
    return out


def run_pathway_sweep(ds: Dataset, pathway_db: PathwayDb | None, base: TrainConfig,
                      counts: list[int], seeds: list[int] | None = None,
                      split: str = "test") -> list[dict]:
    """Mean metrics as the learnable pathway count varies."""
    seeds = seeds if seeds is not None else [base.seed]
    out = []
    for count in counts:
        per_seed = []
        for seed in seeds:
            cfg = TrainConfig(**base.to_dict())
            cfg.learnable_pathways = count
            cfg.seed = seed
            model, _ = train(ds, pathway_db, cfg)
            metrics, _, _, _ = evaluate(ds, split, model, cfg)
            per_seed.append(metrics.to_dict())
        summary = {"learnable_pathways": count, "seeds": len(seeds)}
        for key in ("bal_acc", "w_f1", "auprc", "auroc", "mean"):
            summary[key] = float(np.mean([m[key] for m in per_seed]))
        out.append(summary)
    return out
