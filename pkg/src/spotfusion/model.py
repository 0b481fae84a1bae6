"""Full multimodal classifier: assembly, forward pass, and checkpoint format.

Three entities feed a gated classification head: the microenvironment-graph
encoding of morphology, the morphology-pathway fusion stream, and the
directly encoded expression vector. Ablation switches replace disabled
entities with zeros and freeze their parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fusion import (
    FUSED_DIM,
    N_BLOCKS,
    CrossAttnBlockParams,
    MlpEncoderParams,
    RngPlan,
    branch_gate,
    cross_attention_fuse,
    init_attn_block,
    init_gate,
    init_mlp_encoder,
    late_gate_classify,
    mlp_encode,
)
from .graph import gcn_forward_batch, init_gcn
from .data import MORPH_DIM
from .pathways import (
    ClinicalPathwayMask,
    clinical_encode,
    init_learnable_pathways,
    learnable_encode,
)

IMAGE_MODES = ("none", "seq", "graph")
PATHWAY_MODES = ("none", "clinic", "learnable", "both")


@dataclass
class ModelSpec:
    """Everything needed to rebuild the parameter set and run inference."""

    n_classes: int
    n_genes: int
    class_names: list[str]
    gene_names: list[str]
    image_mode: str = "graph"
    pathway_mode: str = "both"
    st_branch: bool = True
    learnable_pathways: int = 200
    select_frac: float = 0.05
    clinical_names: list[str] = field(default_factory=list)
    clinical_gene_indices: list[list[int]] = field(default_factory=list)
    token_mode: bool = False
    literal_masked_softmax: bool = False
    init_scale: float = 0.02

    def validate(self) -> None:
        if self.image_mode not in IMAGE_MODES:
            raise ValueError(f"image_mode must be one of {IMAGE_MODES}")
        if self.pathway_mode not in PATHWAY_MODES:
            raise ValueError(f"pathway_mode must be one of {PATHWAY_MODES}")
        if self.pathway_mode != "none" and self.image_mode == "none":
            raise ValueError("pathway fusion requires a morphology branch")
        if self.image_mode == "none" and self.pathway_mode == "none" and not self.st_branch:
            raise ValueError("all branches disabled")
        if self.uses_clinical and not self.clinical_names:
            raise ValueError("clinical pathway mode needs a selected pathway mask")

    @property
    def uses_clinical(self) -> bool:
        return self.pathway_mode in ("clinic", "both")

    @property
    def uses_learnable(self) -> bool:
        return self.pathway_mode in ("learnable", "both")

    @property
    def uses_fusion(self) -> bool:
        return self.pathway_mode != "none"

    @property
    def uses_morph_encoder(self) -> bool:
        return self.uses_fusion or self.image_mode == "seq"

    def clinical_mask(self) -> ClinicalPathwayMask:
        return ClinicalPathwayMask(
            list(self.clinical_names),
            [np.asarray(ix, dtype=np.int64) for ix in self.clinical_gene_indices],
            self.n_genes,
        )

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_genes": self.n_genes,
            "class_names": list(self.class_names),
            "gene_names": list(self.gene_names),
            "image_mode": self.image_mode,
            "pathway_mode": self.pathway_mode,
            "st_branch": self.st_branch,
            "learnable_pathways": self.learnable_pathways,
            "select_frac": self.select_frac,
            "clinical_names": list(self.clinical_names),
            "clinical_gene_indices": [list(map(int, ix)) for ix in self.clinical_gene_indices],
            "token_mode": self.token_mode,
            "literal_masked_softmax": self.literal_masked_softmax,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class ModelParams:
    """Component parameters plus the spec that shaped them.

    Every constructible component is created regardless of the ablation
    switches (clinical components need a selected pathway mask, so they only
    exist when one is present); disabled branches simply stay out of the
    forward pass and out of the trainable set, so their parameters are
    frozen with zero gradients.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        s = spec.init_scale
        self.gcn = init_gcn(rng, "gcn", s)
        self.morph_mlp = init_mlp_encoder(rng, MORPH_DIM, "morph_mlp", s)
        self.clin_mlp: MlpEncoderParams | None = None
        self.xattn_clin: list[CrossAttnBlockParams] = []
        if spec.clinical_names:
            k = len(spec.clinical_names)
            self.clin_mlp = init_mlp_encoder(rng, k, "clin_mlp", s)
            self.xattn_clin = [init_attn_block(rng, f"xattn_clin.b{i}", s)
                               for i in range(N_BLOCKS)]
        self.pathway_layer = init_learnable_pathways(
            rng, spec.learnable_pathways, spec.n_genes, spec.select_frac,
            "pathway.w", s, spec.literal_masked_softmax)
        self.learn_mlp = init_mlp_encoder(rng, spec.learnable_pathways,
                                          "learn_mlp", s)
        self.xattn_learn = [init_attn_block(rng, f"xattn_learn.b{i}", s)
                            for i in range(N_BLOCKS)]
        self.st_mlp = init_mlp_encoder(rng, spec.n_genes, "st_mlp", s)
        self.branch_gate = init_gate(rng, 2, "branch_gate", None, s)
        self.late_gate = init_gate(rng, 3, "late_gate", spec.n_classes, s)

        self._clinical_mask = spec.clinical_mask() if spec.uses_clinical else None

    def parameters(self) -> list[ad.Parameter]:
        """All parameters in fixed traversal order (checkpoint order)."""
        out: list[ad.Parameter] = []
        out += self.gcn.params()
        out += self.morph_mlp.params()
        if self.clin_mlp:
            out += self.clin_mlp.params()
        for blk in self.xattn_clin:
            out += blk.params()
        out.append(self.pathway_layer.weights)
        out += self.learn_mlp.params()
        for blk in self.xattn_learn:
            out += blk.params()
        out += self.st_mlp.params()
        out += self.branch_gate.params()
        out += self.late_gate.params()
        return out

    def trainable_parameters(self) -> list[ad.Parameter]:
        """Parameters of active branches only; frozen branches are excluded."""
        spec = self.spec
        out: list[ad.Parameter] = []
        if spec.image_mode == "graph":
            out += self.gcn.params()
        if spec.uses_morph_encoder:
            out += self.morph_mlp.params()
        if spec.uses_clinical:
            out += self.clin_mlp.params()
            for blk in self.xattn_clin:
                out += blk.params()
        if spec.uses_learnable:
            out.append(self.pathway_layer.weights)
            out += self.learn_mlp.params()
            for blk in self.xattn_learn:
                out += blk.params()
        if spec.st_branch:
            out += self.st_mlp.params()
        if spec.uses_clinical and spec.uses_learnable:
            out += self.branch_gate.params()
        out += self.late_gate.params()
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = snap[p.name]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    return ModelParams(spec, rng)


@dataclass
class Batch:
    """Constant per-batch inputs gathered from the dataset and graph cache."""

    morph: np.ndarray             # (B, 1024)
    expr: np.ndarray              # (B, d)
    gcn_feats: np.ndarray | None  # (B, k+1, 1024)
    gcn_ehat: np.ndarray | None   # (B, k+1)

    @property
    def size(self) -> int:
        return self.morph.shape[0]


def model_forward(model: ModelParams, batch: Batch, mode: str = "eval",
                  plan: RngPlan | None = None) -> ad.Tensor:
    """Class logits (B, C) for a batch of spots."""
    spec = model.spec
    b = batch.size
    zeros = ad.Tensor(np.zeros((b, FUSED_DIM)))

    if spec.image_mode == "graph":
        entity_img = gcn_forward_batch(batch.gcn_feats, batch.gcn_ehat, model.gcn)
    elif spec.image_mode == "seq":
        entity_img = mlp_encode(batch.morph, model.morph_mlp, mode, plan, "morph_mlp")
    else:
        entity_img = zeros

    if spec.uses_fusion:
        x_enc = mlp_encode(batch.morph, model.morph_mlp, mode, plan, "morph_mlp")
        f1 = f2 = None
        if spec.uses_clinical:
            z = clinical_encode(ad.Tensor(batch.expr), model._clinical_mask)
            p1 = mlp_encode(z, model.clin_mlp, mode, plan, "clin_mlp")
            f1 = cross_attention_fuse(x_enc, p1, model.xattn_clin, mode, plan,
                                      "xattn_clin", spec.token_mode)
        if spec.uses_learnable:
            zp = learnable_encode(ad.Tensor(batch.expr), model.pathway_layer)
            p2 = mlp_encode(zp, model.learn_mlp, mode, plan, "learn_mlp")
            f2 = cross_attention_fuse(x_enc, p2, model.xattn_learn, mode, plan,
                                      "xattn_learn", spec.token_mode)
        if f1 is not None and f2 is not None:
            entity_fused = branch_gate(f1, f2, model.branch_gate)
        else:
            entity_fused = f1 if f1 is not None else f2
    else:
        entity_fused = zeros

    if spec.st_branch:
        entity_st = mlp_encode(batch.expr, model.st_mlp, mode, plan, "st_mlp")
    else:
        entity_st = zeros

    return late_gate_classify(entity_img, entity_fused, entity_st, model.late_gate)


# ---------------------------------------------------------------------------
# checkpoint format: params.json (manifest) + params.bin (little-endian f64)
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "params.json"
CHECKPOINT_BINARY = "params.bin"


def save_checkpoint(model: ModelParams, out_dir, config_echo: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format": "spotfusion-checkpoint-v1",
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
        "model_spec": model.spec.to_dict(),
        "config": config_echo or {},
    }
    with open(out / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / CHECKPOINT_BINARY, "wb") as fh:
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return out


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    ckpt = Path(ckpt_dir)
    with open(ckpt / CHECKPOINT_MANIFEST, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "spotfusion-checkpoint-v1":
        raise ValueError(f"{ckpt}: not a recognized checkpoint")
    spec = ModelSpec.from_dict(manifest["model_spec"])
    model = ModelParams(spec, np.random.Generator(np.random.PCG64(0)))
    params = model.parameters()
    names = [p["name"] for p in manifest["params"]]
    if names != [p.name for p in params]:
        raise ValueError(f"{ckpt}: parameter manifest does not match model spec")
    raw = (ckpt / CHECKPOINT_BINARY).read_bytes()
    expected = sum(8 * max(int(np.prod(p.data.shape)), 1) for p in params)
    if len(raw) != expected:
        raise ValueError(
            f"{ckpt}: binary size {len(raw)} does not match manifest ({expected})"
        )
    offset = 0
    for p, meta in zip(params, manifest["params"]):
        shape = tuple(meta["shape"])
        if shape != p.data.shape:
            raise ValueError(f"{ckpt}: shape mismatch for {p.name}")
        count = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        p.data[...] = block.reshape(shape)
    return model, manifest.get("config", {})
