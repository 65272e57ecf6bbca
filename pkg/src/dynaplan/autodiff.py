"""Reverse-mode differentiable primitives on numpy arrays.

Only the operations the planner/trainer actually compose are provided:
affine maps, 2-D convolution, tanh/sigmoid, (log-)softmax, Huber,
a gated recurrent cell, and straight-through Gumbel-Softmax sampling.
Everything runs in float64; gradients are checked against central
finite differences (see ``grad_check``).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

OWNERS = ("inner_agent", "outer_agent", "encoder", "transition_model")

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Value:
    """A numpy array plus an optional backward closure into its parents."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Value:
    return Value(data)


def _make(data, parents, backward_fn) -> Value:
    out = Value(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def detach(v: Value) -> Value:
    return Value(v.data)


def backward(root: Value) -> None:
    """Populate .grad on every requires_grad node reachable from ``root``.

    ``root`` must be scalar. Nodes not reachable simply keep grad=None;
    a root with no recorded parents is valid and produces no gradients.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    topo: list[Value] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


class ParamSet:
    """Named parameter map; every entry carries exactly one ownership tag."""

    def __init__(self):
        self._values: dict[str, Value] = {}
        self._owners: dict[str, str] = {}

    def add(self, name: str, data, owner: str) -> Value:
        if name in self._values:
            raise ValueError(f"duplicate parameter name: {name}")
        if owner not in OWNERS:
            raise ValueError(f"unknown ownership tag: {owner}")
        v = Value(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._values[name] = v
        self._owners[name] = owner
        return v

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values)

    def owner(self, name: str) -> str:
        return self._owners[name]

    def owned_by(self, *owners: str) -> list[str]:
        return [n for n, o in self._owners.items() if o in owners]

    def zero_grads(self) -> None:
        for v in self._values.values():
            v.grad = None

    def n_scalars(self) -> int:
        return sum(v.data.size for v in self._values.values())

    def items(self):
        return self._values.items()


def gradient_map(root: Value, params: ParamSet) -> dict[str, np.ndarray]:
    """Backward from ``root``; unreachable parameters get exact zeros."""
    backward(root)
    out = {}
    for name, v in params.items():
        out[name] = v.grad if v.grad is not None else np.zeros_like(v.data)
    return out


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a: Value) -> Value:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Value) -> Value:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -------------------------------------------------------------- nonlinearity

def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((1.0 - out * out) * g,))


def sigmoid(a: Value) -> Value:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (out * (1.0 - out) * g,))


def softmax(a: Value) -> Value:
    """Softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), back)


def log_softmax(a: Value) -> Value:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), back)


# ------------------------------------------------------------------- linear

def affine(x: Value, w: Value, b: Value | None = None) -> Value:
    """x @ w (+ b). x: [B, in], w: [in, out], b: [out]."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


def action_linear(v: Value, a: Value, w: Value) -> Value:
    """Per-row action-conditioned linear map: out[b] = v[b] @ (sum_k a[b,k] w[k]).

    v: [B, z], a: [B, A], w: [A, z, z].
    """
    mix = np.einsum("ba,aij->bij", a.data, w.data)
    out = np.einsum("bi,bij->bj", v.data, mix)

    def back(g):
        gv = np.einsum("bj,bij->bi", g, mix)
        gmix = np.einsum("bi,bj->bij", v.data, g)
        ga = np.einsum("bij,aij->ba", gmix, w.data)
        gw = np.einsum("ba,bij->aij", a.data, gmix)
        return gv, ga, gw

    return _make(out, (v, a, w), back)


# -------------------------------------------------------------- convolution

def conv2d(x: Value, w: Value, b: Value | None = None, padding: int = 1) -> Value:
    """2-D convolution, stride 1. x: [B,C,H,W], w: [O,C,kh,kw], b: [O]."""
    B, C, H, W = x.data.shape
    O, C2, kh, kw = w.data.shape
    if C != C2:
        raise ValueError(f"conv2d channel mismatch: {C} vs {C2}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + Ho, j : j + Wo]
    cols2 = cols.reshape(B, C * kh * kw, Ho * Wo)
    wm = w.data.reshape(O, C * kh * kw)
    out = (wm @ cols2).reshape(B, O, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gm = g.reshape(B, O, Ho * Wo)
        gw = np.einsum("bol,bkl->ok", gm, cols2).reshape(w.data.shape)
        gcols = np.einsum("ok,bol->bkl", wm, gm).reshape(B, C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


# ------------------------------------------------------------------- losses

def huber(pred: Value, target: Value, delta: float = 1.0) -> Value:
    """Elementwise Huber penalty; gradients flow into both arguments."""
    diff = pred.data - target.data
    absd = np.abs(diff)
    out = np.where(absd <= delta, 0.5 * diff * diff, delta * (absd - 0.5 * delta))

    def back(g):
        d = np.clip(diff, -delta, delta) * g
        return d, -d

    return _make(out, (pred, target), back)


# --------------------------------------------------------------- reductions

def vsum(a: Value, axis: int | None = None) -> Value:
    if axis is None:
        out = np.asarray(a.data.sum())
        return _make(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))
    out = a.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(out, (a,), back)


def vmean(a: Value, axis: int | None = None) -> Value:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def reshape(a: Value, shape) -> Value:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: list[Value], axis: int = -1) -> Value:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), back)


def gather_rows(a: Value, idx) -> Value:
    """out[b] = a[b, idx[b]] for a 2-D value."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make(out, (a,), back)


def entropy_rows(logits: Value) -> Value:
    """Entropy of softmax(logits) per row: [B]."""
    p = softmax(logits)
    lp = log_softmax(logits)
    return neg(vsum(mul(p, lp), axis=-1))


# ---------------------------------------------------------- recurrent cell

GRU_SUFFIXES = ("wxr", "whr", "br", "wxu", "whu", "bu", "wxn", "whn", "bn")


def init_gru(params: ParamSet, prefix: str, in_dim: int, hid: int, owner: str, rng) -> None:
    def xavier(fi, fo):
        lim = np.sqrt(6.0 / (fi + fo))
        return rng.uniform(-lim, lim, size=(fi, fo))

    for gate in ("r", "u", "n"):
        params.add(f"{prefix}wx{gate}", xavier(in_dim, hid), owner)
        params.add(f"{prefix}wh{gate}", xavier(hid, hid), owner)
        params.add(f"{prefix}b{gate}", np.zeros(hid), owner)


def recurrent_cell(x: Value, h: Value, params, prefix: str = "") -> Value:
    """Gated update cell: h' = (1-u) * n + u * h, with n a reset-gated tanh.

    Output stays in (-1, 1) componentwise for h started at zero.
    ``params`` is anything indexable by name (ParamSet or dict of Values).
    """
    wxr = params[f"{prefix}wxr"]
    if x.data.shape[-1] != wxr.data.shape[0] or h.data.shape[-1] != params[f"{prefix}whr"].data.shape[0]:
        raise ValueError(
            f"recurrent_cell dimension mismatch: input {x.data.shape}, hidden {h.data.shape}"
        )
    r = sigmoid(add(affine(x, wxr, params[f"{prefix}br"]), affine(h, params[f"{prefix}whr"])))
    u = sigmoid(add(affine(x, params[f"{prefix}wxu"], params[f"{prefix}bu"]), affine(h, params[f"{prefix}whu"])))
    n = tanh(add(affine(x, params[f"{prefix}wxn"], params[f"{prefix}bn"]), mul(r, affine(h, params[f"{prefix}whn"]))))
    return add(mul(sub(1.0, u), n), mul(u, h))


# ------------------------------------------------------------- Gumbel noise

def gumbel_noise(rng, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-12) + 1e-12)


def gumbel_softmax(
    logits: Value,
    temperature: float = 1.0,
    hard: bool = True,
    rng=None,
    noise: np.ndarray | None = None,
    force_index: np.ndarray | None = None,
) -> Value:
    """Sample from the Gumbel-Softmax distribution over the last axis.

    hard=True returns an exactly one-hot vector whose backward pass is the
    relaxed (soft) sample's gradient (straight-through). hard=False returns
    the relaxed sample itself. Pass ``noise`` to replay a recorded draw;
    ``force_index`` pins the hard argmax (replay safety against ties).
    """
    if logits.data.shape[-1] < 2:
        raise ValueError("gumbel_softmax needs at least 2 categories")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    if noise is None:
        if rng is None:
            raise ValueError("provide rng or noise")
        noise = gumbel_noise(rng, logits.data.shape)
    y = (logits.data + noise) / temperature
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    soft = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * soft).sum(axis=-1, keepdims=True)
        return (soft * (g - dot) / temperature,)

    if not hard:
        return _make(soft, (logits,), back)
    idx = soft.argmax(axis=-1) if force_index is None else np.asarray(force_index, dtype=np.intp)
    out = np.zeros_like(soft)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return _make(out, (logits,), back)


def triplet_mix(w: Value, anchors: list[Value]) -> Value:
    """z* = sum_i w[:, i] * anchors[i].

    For a hard one-hot ``w`` the output rows are bit-exact copies of the
    selected anchor rows; the backward pass is the generic mixing rule in
    both cases, so straight-through gradients reach the logits and the
    selected anchor.
    """
    stacked = np.stack([a.data for a in anchors], axis=1)  # [B, k, z]
    if np.all((w.data == 0.0) | (w.data == 1.0)):
        idx = w.data.argmax(axis=-1)
        out = stacked[np.arange(stacked.shape[0]), idx].copy()
    else:
        out = np.einsum("bk,bkz->bz", w.data, stacked)

    def back(g):
        gw = np.einsum("bz,bkz->bk", g, stacked)
        gas = tuple(w.data[:, i : i + 1] * g for i in range(len(anchors)))
        return (gw, *gas)

    return _make(out, (w, *anchors), back)


# ----------------------------------------------------------- grad checking

def grad_check(f, params: ParamSet, eps: float = 1e-5, names: list[str] | None = None) -> float:
    """Max relative error between analytic gradients of scalar f() and
    central finite differences: |analytic - numeric| / max(1, |numeric|)."""
    params.zero_grads()
    root = f()
    grads = gradient_map(root, params)
    worst = 0.0
    for name in names if names is not None else params.names():
        v = params[name]
        flat = v.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
