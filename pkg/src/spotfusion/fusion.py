"""Shared-space encoders, cross-attention fusion, and gating layers.

All encoders project into a 512-d space (linear, layer norm, ReLU, dropout
0.5). Fusion runs two stacked transformer blocks per pathway stream with
8 heads and dropout 0.25; queries and keys come from the morphology stream
and values from the pathway vector. Each input is a single token, so the
attention softmax is degenerate (weight one) and the informative path is
the value projection plus the block MLPs; ``token_mode`` reshapes the
512-d vectors into 8 x 64 slices to obtain non-degenerate attention.
Gates are two linear layers (ReLU between) ending in a softmax whose
weights combine their inputs convexly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FUSED_DIM = 512
N_HEADS = 8
HEAD_DIM = FUSED_DIM // N_HEADS
BLOCK_MLP_DIM = 2048
N_BLOCKS = 2
ATTN_DROPOUT = 0.25
ENCODER_DROPOUT = 0.5
GATE_HIDDEN = 128


class RngPlan:
    """Derives a deterministic per-site dropout seed from (seed, site, step)."""

    def __init__(self, seed: int, step: int = 0):
        self.seed = seed
        self.step = step

    def site_seed(self, site: str) -> int:
        return ad.derive_seed(self.seed, site, self.step)


_EVAL_PLAN = RngPlan(0, 0)


def _dropout(x, rate, mode, plan, site):
    plan = plan or _EVAL_PLAN
    return ad.dropout(x, rate, mode, plan.site_seed(site))


def _affine_layer_norm(x, gain, bias):
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


@dataclass
class MlpEncoderParams:
    w: ad.Parameter        # (in_dim, 512)
    b: ad.Parameter
    ln_gain: ad.Parameter  # (512,)
    ln_bias: ad.Parameter
    dropout_rate: float = ENCODER_DROPOUT

    def params(self) -> list[ad.Parameter]:
        return [self.w, self.b, self.ln_gain, self.ln_bias]


def init_mlp_encoder(rng: np.random.Generator, in_dim: int, prefix: str,
                     init_scale: float = 0.02) -> MlpEncoderParams:
    return MlpEncoderParams(
        w=ad.Parameter(rng.normal(0, init_scale, (in_dim, FUSED_DIM)), f"{prefix}.w"),
        b=ad.Parameter(np.zeros(FUSED_DIM), f"{prefix}.b"),
        ln_gain=ad.Parameter(np.ones(FUSED_DIM), f"{prefix}.ln_gain"),
        ln_bias=ad.Parameter(np.zeros(FUSED_DIM), f"{prefix}.ln_bias"),
    )


def mlp_encode(v, p: MlpEncoderParams, mode: str = "eval",
               plan: RngPlan | None = None, site: str = "mlp") -> ad.Tensor:
    """linear -> layer norm -> relu -> dropout, into the shared 512-d space."""
    v = v if isinstance(v, ad.Tensor) else ad.Tensor(v)
    if v.data.shape[-1] != p.w.data.shape[0]:
        raise ValueError(
            f"encoder expects width {p.w.data.shape[0]}, got {v.data.shape[-1]}"
        )
    h = ad.add(ad.matmul(v, p.w), p.b)
    h = _affine_layer_norm(h, p.ln_gain, p.ln_bias)
    h = ad.relu(h)
    return _dropout(h, p.dropout_rate, mode, plan, f"{site}.drop")


@dataclass
class CrossAttnBlockParams:
    wq: ad.Parameter
    bq: ad.Parameter
    wk: ad.Parameter
    bk: ad.Parameter
    wv: ad.Parameter
    bv: ad.Parameter
    wo: ad.Parameter
    bo: ad.Parameter
    wm1: ad.Parameter  # (512, 2048)
    bm1: ad.Parameter
    wm2: ad.Parameter  # (2048, 512)
    bm2: ad.Parameter
    ln1_gain: ad.Parameter
    ln1_bias: ad.Parameter
    ln2_gain: ad.Parameter
    ln2_bias: ad.Parameter
    dropout_rate: float = ATTN_DROPOUT

    def params(self) -> list[ad.Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                self.wo, self.bo, self.wm1, self.bm1, self.wm2, self.bm2,
                self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]


def init_attn_block(rng: np.random.Generator, prefix: str,
                    init_scale: float = 0.02) -> CrossAttnBlockParams:
    def lin(name, shape):
        return ad.Parameter(rng.normal(0, init_scale, shape), f"{prefix}.{name}")

    def zeros(name, width):
        return ad.Parameter(np.zeros(width), f"{prefix}.{name}")

    return CrossAttnBlockParams(
        wq=lin("wq", (FUSED_DIM, FUSED_DIM)), bq=zeros("bq", FUSED_DIM),
        wk=lin("wk", (FUSED_DIM, FUSED_DIM)), bk=zeros("bk", FUSED_DIM),
        wv=lin("wv", (FUSED_DIM, FUSED_DIM)), bv=zeros("bv", FUSED_DIM),
        wo=lin("wo", (FUSED_DIM, FUSED_DIM)), bo=zeros("bo", FUSED_DIM),
        wm1=lin("wm1", (FUSED_DIM, BLOCK_MLP_DIM)), bm1=zeros("bm1", BLOCK_MLP_DIM),
        wm2=lin("wm2", (BLOCK_MLP_DIM, FUSED_DIM)), bm2=zeros("bm2", FUSED_DIM),
        ln1_gain=ad.Parameter(np.ones(FUSED_DIM), f"{prefix}.ln1_gain"),
        ln1_bias=zeros("ln1_bias", FUSED_DIM),
        ln2_gain=ad.Parameter(np.ones(FUSED_DIM), f"{prefix}.ln2_gain"),
        ln2_bias=zeros("ln2_bias", FUSED_DIM),
    )


def _attention_output(x, p_vec, p: CrossAttnBlockParams, token_mode: bool) -> ad.Tensor:
    v = ad.add(ad.matmul(p_vec, p.wv), p.bv)
    if not token_mode:
        # one token per input: the softmax over a single key is exactly 1 for
        # every head, so the head outputs equal the value projection and the
        # query/key projections do not influence this path
        ctx = v
    else:
        q = ad.add(ad.matmul(x, p.wq), p.bq)
        k = ad.add(ad.matmul(x, p.wk), p.bk)
        lead = x.data.shape[:-1]
        q = ad.reshape(q, lead + (N_HEADS, HEAD_DIM))
        k = ad.reshape(k, lead + (N_HEADS, HEAD_DIM))
        vt = ad.reshape(v, lead + (N_HEADS, HEAD_DIM))
        logits = ad.scale(ad.matmul(q, ad.swap_last_axes(k)), 1.0 / np.sqrt(HEAD_DIM))
        attn = ad.softmax(logits)
        ctx = ad.reshape(ad.matmul(attn, vt), lead + (FUSED_DIM,))
    return ad.add(ad.matmul(ctx, p.wo), p.bo)


def attn_block(x, p_vec, p: CrossAttnBlockParams, mode: str = "eval",
               plan: RngPlan | None = None, site: str = "block",
               token_mode: bool = False) -> ad.Tensor:
    """attention -> residual -> LN -> MLP -> residual -> LN (post-norm)."""
    attn = _attention_output(x, p_vec, p, token_mode)
    attn = _dropout(attn, p.dropout_rate, mode, plan, f"{site}.drop_attn")
    y = _affine_layer_norm(ad.add(x, attn), p.ln1_gain, p.ln1_bias)
    m = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(y, p.wm1), p.bm1)), p.wm2), p.bm2)
    m = _dropout(m, p.dropout_rate, mode, plan, f"{site}.drop_mlp")
    return _affine_layer_norm(ad.add(y, m), p.ln2_gain, p.ln2_bias)


def cross_attention_fuse(x, p_vec, blocks: list[CrossAttnBlockParams],
                         mode: str = "eval", plan: RngPlan | None = None,
                         site: str = "xattn", token_mode: bool = False) -> ad.Tensor:
    """Fuse a morphology vector with a pathway vector through stacked blocks.

    Every block draws its value from the same pathway vector; the morphology
    stream carries the residual path.
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    p_vec = p_vec if isinstance(p_vec, ad.Tensor) else ad.Tensor(p_vec)
    for t, name in ((x, "morphology"), (p_vec, "pathway")):
        if t.data.shape[-1] != FUSED_DIM:
            raise ValueError(f"{name} stream width {t.data.shape[-1]} != {FUSED_DIM}")
    stream = x
    for i, blk in enumerate(blocks):
        stream = attn_block(stream, p_vec, blk, mode, plan, f"{site}.b{i}", token_mode)
    return stream


@dataclass
class GateParams:
    w1: ad.Parameter  # (n_branch * 512, hidden)
    b1: ad.Parameter
    w2: ad.Parameter  # (hidden, n_branch)
    b2: ad.Parameter
    wc: ad.Parameter | None = None  # classifier (512, C); late gate only
    bc: ad.Parameter | None = None

    def params(self) -> list[ad.Parameter]:
        out = [self.w1, self.b1, self.w2, self.b2]
        if self.wc is not None:
            out += [self.wc, self.bc]
        return out


def init_gate(rng: np.random.Generator, n_branch: int, prefix: str,
              n_classes: int | None = None, init_scale: float = 0.02,
              hidden: int = GATE_HIDDEN) -> GateParams:
    gp = GateParams(
        w1=ad.Parameter(rng.normal(0, init_scale, (n_branch * FUSED_DIM, hidden)),
                        f"{prefix}.w1"),
        b1=ad.Parameter(np.zeros(hidden), f"{prefix}.b1"),
        w2=ad.Parameter(rng.normal(0, init_scale, (hidden, n_branch)), f"{prefix}.w2"),
        b2=ad.Parameter(np.zeros(n_branch), f"{prefix}.b2"),
    )
    if n_classes is not None:
        gp.wc = ad.Parameter(rng.normal(0, init_scale, (FUSED_DIM, n_classes)),
                             f"{prefix}.wc")
        gp.bc = ad.Parameter(np.zeros(n_classes), f"{prefix}.bc")
    return gp


def gate_weights(entities: list[ad.Tensor], gp: GateParams) -> ad.Tensor:
    cat = ad.concat(entities, axis=-1)
    hidden = ad.relu(ad.add(ad.matmul(cat, gp.w1), gp.b1))
    return ad.softmax(ad.add(ad.matmul(hidden, gp.w2), gp.b2))


def gate_pool(entities: list[ad.Tensor], gp: GateParams) -> ad.Tensor:
    """Softmax-gated convex combination of the entity vectors."""
    weights = gate_weights(entities, gp)
    return ad.weighted_sum(weights, ad.stack(entities, axis=-2))


def branch_gate(f1, f2, gp: GateParams) -> ad.Tensor:
    f1 = f1 if isinstance(f1, ad.Tensor) else ad.Tensor(f1)
    f2 = f2 if isinstance(f2, ad.Tensor) else ad.Tensor(f2)
    return gate_pool([f1, f2], gp)


def late_gate_classify(h, fused, st, gp: GateParams) -> ad.Tensor:
    """Gate the three entities, pool, and project to class logits."""
    if gp.wc is None:
        raise ValueError("late gate needs classifier parameters")
    ents = [t if isinstance(t, ad.Tensor) else ad.Tensor(t) for t in (h, fused, st)]
    pooled = gate_pool(ents, gp)
    return ad.add(ad.matmul(pooled, gp.wc), gp.bc)
