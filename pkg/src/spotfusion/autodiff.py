"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learned operation in the model is assembled from the primitives in
this module. Each primitive records a backward closure on the output node;
``backward`` walks the tape in reverse topological order and accumulates
gradients into every reachable node that requires them. A finite-difference
checker is included so analytic gradients can always be cross-validated.
"""

from __future__ import annotations

import hashlib

import numpy as np

LAYER_NORM_EPS = 1e-5

_CHECKED = True
_GRAD_ENABLED = True


def set_checked(flag: bool) -> bool:
    """Toggle finiteness validation of leaf tensors; returns previous value."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


class no_grad:
    """Context manager that disables tape recording (for evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from any printable parts (platform stable).

    Used for counter-based dropout: each call site derives its seed from
    (global seed, layer id, step) so training is bit-reproducible.
    """
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


class Tensor:
    """A dense float64 array plus the tape bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor; gradients accumulate across backward calls."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, bwd) -> Tensor:
    """Wrap an op result; records the tape edge only when a parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; 1-d operands are promoted, leading axes are batched."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError("matmul requires at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1 and bd.ndim == 1:
            g2 = np.asarray(g).reshape(1, 1)
        elif ad.ndim == 1:
            g2 = g[None, :]
        elif bd.ndim == 1:
            g2 = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = (g2 @ np.swapaxes(b2, -1, -2)).reshape(ad.shape)
        if b.requires_grad:
            if a2.ndim == b2.ndim == 2:
                gb = a2.T @ g2
            else:
                k = a2.shape[-1]
                m = g2.shape[-1]
                gb = a2.reshape(-1, k).T @ g2.reshape(-1, m)
            gb = gb.reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting (used for affine scales, gates)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}")

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        # subgradient at 0 is taken as 0
        return (g * (a.data > 0.0),) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (pre-affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (a,), bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), bwd)


def dropout(a, p: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: train mode keeps entries with prob 1-p, scaled by 1/(1-p)."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return _make(a.data, (a,), lambda g: (g,) if a.requires_grad else (None,))
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = a.data * keep

    def bwd(g):
        return (g * keep,) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def mse(a, b) -> Tensor:
    """Mean of squared componentwise differences, as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        d = (2.0 / n) * diff * g
        ga = d if a.requires_grad else None
        gb = -d if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make(out, tuple(tensors), bwd)


def stack(tensors, axis: int = -2) -> Tensor:
    """Stack equal-shaped tensors along a new axis (for gated weighted sums)."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple(
            pieces[i] if t.requires_grad else None for i, t in enumerate(tensors)
        )

    return _make(out, tuple(tensors), bwd)


def weighted_sum(weights, items) -> Tensor:
    """Combine items (..., n, D) with weights (..., n) into (..., D).

    Differentiable in both arguments; used by the gating layers (weights from
    a softmax) and by graph aggregation (constant edge weights).
    """
    w, x = _as_tensor(weights), _as_tensor(items)
    if x.data.ndim < 2 or w.data.shape != x.data.shape[:-1]:
        raise ValueError(
            f"weighted_sum shape mismatch: weights {w.data.shape}, items {x.data.shape}"
        )
    out = np.einsum("...n,...nd->...d", w.data, x.data, optimize=True)

    def bwd(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.einsum("...d,...nd->...n", g, x.data, optimize=True)
        if x.requires_grad:
            gx = w.data[..., :, None] * g[..., None, :]
        return gw, gx

    return _make(out, (w, x), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.full(a.data.shape, float(g)),) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def bwd(g):
        return (np.full(a.data.shape, float(g) / n),) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def swap_last_axes(a) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,) if a.requires_grad else (None,)

    return _make(out, (a,), bwd)


def weighted_cross_entropy(logits, labels, class_weights) -> Tensor:
    """Class-weighted cross entropy via log-sum-exp.

    1-d logits with an integer label give the per-sample loss; 2-d logits with
    a label vector give the mean over the batch.
    """
    lg = _as_tensor(logits)
    w = np.asarray(class_weights, dtype=np.float64)
    single = lg.data.ndim == 1
    z = lg.data[None, :] if single else lg.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise ValueError(
            f"cross entropy shape mismatch: logits {lg.data.shape}, labels {y.shape}"
        )
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("label index out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    logp = z[rows, y] - lse
    wy = w[y]
    n = z.shape[0]
    out = np.asarray(-(wy * logp).sum() / n)

    def bwd(g):
        if not lg.requires_grad:
            return (None,)
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        dz = p * (wy * (float(g) / n))[:, None]
        return (dz[0] if single else dz,)

    return _make(out, (lg,), bwd)


def topk_gated_rows(weights, genes, idx) -> Tensor:
    """Per-row sparse gating: softmax over each row's selected columns, then a
    weighted sum of ``genes`` over those columns.

    ``weights`` is (a, d) trainable, ``idx`` (a, k) holds the selected column
    indices (constant during backward: straight-through top-k), ``genes`` is
    (..., d). Returns (..., a).
    """
    w, g_in = _as_tensor(weights), _as_tensor(genes)
    idx = np.asarray(idx, dtype=np.int64)
    a_cnt, d = w.data.shape
    if idx.ndim != 2 or idx.shape[0] != a_cnt:
        raise ValueError(f"index shape {idx.shape} does not match weights {w.data.shape}")
    if g_in.data.shape[-1] != d:
        raise ValueError(
            f"gene vector width {g_in.data.shape[-1]} does not match weights {w.data.shape}"
        )
    rows = np.arange(a_cnt)[:, None]
    wsel = w.data[rows, idx]
    m = wsel.max(axis=1, keepdims=True)
    e = np.exp(wsel - m)
    s = e / e.sum(axis=1, keepdims=True)
    # dense (a, d) mixing matrix: zero outside each row's selected support
    smat = np.zeros((a_cnt, d))
    smat[rows, idx] = s
    out = g_in.data @ smat.T

    def bwd(g):
        gw = gg = None
        if g_in.requires_grad:
            gg = g @ smat
        if w.requires_grad:
            gflat = g.reshape(-1, a_cnt)
            xflat = g_in.data.reshape(-1, d)
            ds_dense = gflat.T @ xflat
            ds = ds_dense[rows, idx]
            dwsel = s * (ds - (ds * s).sum(axis=1, keepdims=True))
            gw = np.zeros((a_cnt, d))
            gw[rows, idx] = dwsel
        return gw, gg

    return _make(out, (w, g_in), bwd)


# contract surface demanded by the model architecture; extra internal
# primitives (mul, stack, ...) exist alongside these
PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "relu": relu,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "dropout": dropout,
    "mse": mse,
    "concat": concat,
    "weighted_sum": weighted_sum,
}


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; the set of names is the op contract."""
    if op_kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}")
    return PRIMITIVES[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires-grad leaf.

    Repeated calls without zeroing keep accumulating (grads sum over calls).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._bwd is None:
        raise RuntimeError("backward called without a recorded computation graph")

    topo: list[Tensor] = []
    visited = set()
    stack_ = [loss]
    while stack_:
        node = stack_[-1]
        nid = id(node)
        if nid in visited:
            stack_.pop()
            continue
        pending = [p for p in node._parents if id(p) not in visited and p._bwd is not None]
        if pending:
            stack_.extend(pending)
        else:
            visited.add(nid)
            topo.append(stack_.pop())

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._bwd is None:
                # leaf: accumulate persistently
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg


Tensor.backward = backward


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_diff_check(fn, params, step: float = 1e-5, sample: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return a scalar Tensor and be deterministic (it is
    evaluated twice up front and the values must match bit for bit). Relative
    error is |analytic - numeric| / max(1, |analytic|, |numeric|) over all
    parameter entries, or over ``sample`` random entries per parameter when
    the full sweep is too expensive.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    base = fn(params)
    again = fn(params)
    if not np.array_equal(base.data, again.data):
        raise RuntimeError("fn is not deterministic: two evaluations differ")

    for p in params:
        p.zero_grad()
    loss = fn(params)
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.size
        if sample is None or sample >= n:
            entries = range(n)
        else:
            entries = rng.choice(n, size=sample, replace=False)
        for j in entries:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + step
                hi = float(fn(params).data)
                flat[j] = orig - step
                lo = float(fn(params).data)
            flat[j] = orig
            num = (hi - lo) / (2.0 * step)
            ana = gflat[j]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if err > worst:
                worst = err
    return worst
