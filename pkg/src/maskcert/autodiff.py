"""Minimal reverse-mode automatic differentiation on a flat tape.

Values are eagerly computed float64 numpy arrays. Every operation appends a
node to its tape, so insertion order is always a valid topological order and
the backward pass is a single reverse sweep. A tape can also be *replayed*
with substituted leaf values: the recorded graph is re-evaluated as a pure
function, with `detach` nodes frozen at their recorded constants and the
straight-through node shifting linearly with its parent. Replay is what makes
finite-difference checks of tape gradients well defined, including through
the straight-through path.

Tapes are single-threaded; use one tape per worker. Nodes never change after
creation except for the grad slot, which is written only by this tape's own
backward pass.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "Tape", "Node", "primitive", "backprop", "detach",
    "affine", "relu", "softmax", "log", "exp", "add", "sub", "mul", "div",
    "sum", "mean", "square", "sqrt", "l2_norm_sq", "inf_norm", "clip",
    "softplus", "kl_div", "cross_entropy", "topk_margin", "l1_sum", "ste",
    "KL_SMOOTHING",
]

# Both arguments of kl_div are mixed with the uniform distribution at this
# weight before taking logs, so exact zeros in a probability vector cannot
# produce log(0).
KL_SMOOTHING = 1e-8


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, n in enumerate(shape) if n == 1 and grad.shape[ax] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One tape entry: value, provenance, and a lazily allocated grad slot."""

    __slots__ = ("tape", "id", "value", "grad", "op", "parents", "attrs",
                 "requires_grad", "_vjps")

    def __init__(self, tape, nid, value, op, parents, attrs, requires_grad, vjps):
        self.tape = tape
        self.id = nid
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Append-only node store; node id equals insertion index."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, requires_grad: bool = False) -> Node:
        node = Node(self, len(self.nodes), _f64(value), "leaf", (), {},
                    requires_grad, ())
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def replay(self, overrides: dict) -> list[np.ndarray]:
        """Re-evaluate the recorded graph with some leaf values substituted.

        `overrides` maps Node (or node id) to a replacement array of the same
        shape. Returns the list of recomputed values indexed by node id.
        Detach nodes keep their recorded constants, so the replayed function
        is exactly the one the backward pass differentiates.
        """
        subst = {}
        for key, val in overrides.items():
            nid = key.id if isinstance(key, Node) else int(key)
            node = self.nodes[nid]
            if node.op != "leaf":
                raise ValueError(f"replay: node {nid} ({node.op}) is not a leaf")
            arr = _f64(val)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"replay: leaf {nid} expects shape {node.value.shape}, got {arr.shape}")
            subst[nid] = arr
        values: list[np.ndarray] = [None] * len(self.nodes)
        with np.errstate(all="ignore"):
            for node in self.nodes:
                if node.op == "leaf":
                    values[node.id] = subst.get(node.id, node.value)
                else:
                    parent_vals = [values[p.id] for p in node.parents]
                    values[node.id] = _f64(_OPS[node.op].forward(parent_vals, node.attrs))
        return values


class _Op(NamedTuple):
    forward: Callable            # (parent_values, attrs) -> array
    vjps: Callable               # (parent_values, out_value, attrs) -> [(arg_idx, fn)]


_OPS: dict[str, _Op] = {}


def _register(kind, forward, vjps):
    _OPS[kind] = _Op(forward, vjps)


def primitive(kind: str, inputs: list[Node], **attrs) -> Node:
    """Append one operation of the given kind and eagerly compute its value."""
    if kind not in _OPS:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if not inputs:
        raise ValueError(f"{kind}: at least one input node required")
    tape = inputs[0].tape
    if any(n.tape is not tape for n in inputs):
        raise ValueError(f"{kind}: inputs live on different tapes")
    spec = _OPS[kind]
    parent_vals = [n.value for n in inputs]
    with np.errstate(all="ignore"):
        value = _f64(spec.forward(parent_vals, attrs))
    nid = len(tape.nodes)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{kind}: non-finite forward value at node {nid}")
    requires_grad = kind != "detach" and any(n.requires_grad for n in inputs)
    vjps = tuple(spec.vjps(parent_vals, value, attrs)) if requires_grad else ()
    node = Node(tape, nid, value, kind, tuple(inputs), attrs, requires_grad, vjps)
    tape.nodes.append(node)
    return node


def backprop(root: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns {leaf id: gradient}.

    Gradients accumulate over all paths. Leaves with requires_grad=False are
    skipped; detached edges contribute nothing. Requires-grad leaves that no
    gradient reached report zeros.
    """
    if root.value.size != 1:
        raise ValueError(f"backprop: root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.id + 1]):
        if node.grad is None or not node._vjps:
            continue
        for arg_idx, vjp in node._vjps:
            parent = node.parents[arg_idx]
            if not parent.requires_grad:
                continue
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g
    return {n.id: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for n in tape.nodes if n.op == "leaf" and n.requires_grad}


# ---------------------------------------------------------------------------
# primitive kinds


def _check_ew(kind, x, y):
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {x.shape} and {y.shape}") from None


def _affine_fwd(v, a):
    x, w, b = v
    if (x.ndim != 2 or w.ndim != 2 or b.ndim != 1
            or x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]):
        raise ValueError(f"affine: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    return x @ w.T + b


def _affine_vjps(v, out, a):
    x, w, _ = v
    return [(0, lambda g: g @ w),
            (1, lambda g: g.T @ x),
            (2, lambda g: g.sum(axis=0))]


_register("affine", _affine_fwd, _affine_vjps)

_register("relu",
          lambda v, a: np.maximum(v[0], 0.0),
          lambda v, out, a: [(0, lambda g: g * (v[0] > 0))])


def _softmax_fwd(v, a):
    x = v[0]
    if x.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ValueError(f"softmax: expected 1-D or 2-D input, got shape {x.shape}")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjps(v, out, a):
    p = out
    return [(0, lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True)))]


_register("softmax", _softmax_fwd, _softmax_vjps)

_register("log", lambda v, a: np.log(v[0]),
          lambda v, out, a: [(0, lambda g: g / v[0])])
_register("exp", lambda v, a: np.exp(v[0]),
          lambda v, out, a: [(0, lambda g: g * out)])


def _ew_fwd(kind, fn):
    def forward(v, a):
        _check_ew(kind, v[0], v[1])
        return fn(v[0], v[1])
    return forward


_register("add", _ew_fwd("add", np.add),
          lambda v, out, a: [(0, lambda g: _unbroadcast(g, v[0].shape)),
                             (1, lambda g: _unbroadcast(g, v[1].shape))])
_register("sub", _ew_fwd("sub", np.subtract),
          lambda v, out, a: [(0, lambda g: _unbroadcast(g, v[0].shape)),
                             (1, lambda g: _unbroadcast(-g, v[1].shape))])
_register("mul", _ew_fwd("mul", np.multiply),
          lambda v, out, a: [(0, lambda g: _unbroadcast(g * v[1], v[0].shape)),
                             (1, lambda g: _unbroadcast(g * v[0], v[1].shape))])
_register("div", _ew_fwd("div", np.divide),
          lambda v, out, a: [(0, lambda g: _unbroadcast(g / v[1], v[0].shape)),
                             (1, lambda g: _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape))])

_register("sum", lambda v, a: v[0].sum(),
          lambda v, out, a: [(0, lambda g: np.ones_like(v[0]) * g)])
_register("mean", lambda v, a: v[0].mean(),
          lambda v, out, a: [(0, lambda g: np.ones_like(v[0]) * (g / v[0].size))])
_register("square", lambda v, a: v[0] * v[0],
          lambda v, out, a: [(0, lambda g: g * 2.0 * v[0])])
_register("sqrt", lambda v, a: np.sqrt(v[0]),
          lambda v, out, a: [(0, lambda g: g / (2.0 * out))])
_register("l1_sum", lambda v, a: np.abs(v[0]).sum(),
          lambda v, out, a: [(0, lambda g: g * np.sign(v[0]))])


def _l2sq_fwd(v, a):
    x = v[0]
    if x.ndim < 1:
        raise ValueError("l2_norm_sq: expected at least 1-D input")
    return (x * x).sum(axis=-1)


_register("l2_norm_sq", _l2sq_fwd,
          lambda v, out, a: [(0, lambda g: np.expand_dims(g, -1) * 2.0 * v[0])])


def _inf_norm_fwd(v, a):
    x = v[0]
    if x.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ValueError(f"inf_norm: expected 1-D or 2-D input, got shape {x.shape}")
    return np.abs(x).max(axis=-1)


def _inf_norm_vjps(v, out, a):
    x = v[0]
    # np.argmax picks the first attaining index; the subgradient is supported
    # there alone.
    idx = np.argmax(np.abs(x), axis=-1)

    def vjp(g):
        z = np.zeros_like(x)
        if x.ndim == 1:
            z[idx] = np.sign(x[idx]) * g
        else:
            rows = np.arange(x.shape[0])
            z[rows, idx] = np.sign(x[rows, idx]) * g
        return z

    return [(0, vjp)]


_register("inf_norm", _inf_norm_fwd, _inf_norm_vjps)


def _clip_fwd(v, a):
    lo, hi = a["lo"], a["hi"]
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got [{lo}, {hi}]")
    return np.clip(v[0], lo, hi)


def _clip_vjps(v, out, a):
    # Gradient passes on the closed interval [lo, hi]; it flows at exact
    # saturation boundaries.
    mask = (v[0] >= a["lo"]) & (v[0] <= a["hi"])
    return [(0, lambda g: g * mask)]


_register("clip", _clip_fwd, _clip_vjps)

# softplus(x) = max(x, 0) + log1p(exp(-|x|)); never overflows.
_register("softplus",
          lambda v, a: np.maximum(v[0], 0.0) + np.log1p(np.exp(-np.abs(v[0]))),
          lambda v, out, a: [(0, lambda g: g * np.exp(-np.logaddexp(0.0, -v[0])))])


def _kl_fwd(v, a):
    p, q = v
    if p.shape != q.shape or p.ndim not in (1, 2):
        raise ValueError(f"kl_div: expected matching 1-D or 2-D inputs, got {p.shape} and {q.shape}")
    k = p.shape[-1]
    ps = (1.0 - KL_SMOOTHING) * p + KL_SMOOTHING / k
    qs = (1.0 - KL_SMOOTHING) * q + KL_SMOOTHING / k
    return (ps * (np.log(ps) - np.log(qs))).sum(axis=-1)


def _kl_vjps(v, out, a):
    p, q = v
    k = p.shape[-1]
    ps = (1.0 - KL_SMOOTHING) * p + KL_SMOOTHING / k
    qs = (1.0 - KL_SMOOTHING) * q + KL_SMOOTHING / k
    logr = np.log(ps) - np.log(qs)
    return [(0, lambda g: np.expand_dims(g, -1) * (1.0 - KL_SMOOTHING) * (logr + 1.0)),
            (1, lambda g: np.expand_dims(g, -1) * (1.0 - KL_SMOOTHING) * (-ps / qs))]


_register("kl_div", _kl_fwd, _kl_vjps)


def _ce_fwd(v, a):
    logits = v[0]
    labels = a["labels"]
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: expected 2-D logits, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= logits.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    return -logp[np.arange(logits.shape[0]), labels]


def _ce_vjps(v, out, a):
    logits = v[0]
    labels = a["labels"]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(logits)
    onehot[np.arange(logits.shape[0]), labels] = 1.0
    return [(0, lambda g: g[:, None] * (p - onehot))]


_register("cross_entropy", _ce_fwd, _ce_vjps)


def _top2(x):
    """First-attaining argmax and second-largest index per row."""
    i1 = np.argmax(x, axis=-1)
    masked = x.copy()
    if x.ndim == 1:
        masked[i1] = -np.inf
    else:
        masked[np.arange(x.shape[0]), i1] = -np.inf
    i2 = np.argmax(masked, axis=-1)
    return i1, i2


def _topk_margin_fwd(v, a):
    x = v[0]
    if x.ndim not in (1, 2) or x.shape[-1] < 2:
        raise ValueError(f"topk_margin: need at least 2 classes, got shape {x.shape}")
    i1, i2 = _top2(x)
    if x.ndim == 1:
        return (x[i1] - x[i2]) / 2.0
    rows = np.arange(x.shape[0])
    return (x[rows, i1] - x[rows, i2]) / 2.0


def _topk_margin_vjps(v, out, a):
    x = v[0]
    i1, i2 = _top2(x)

    def vjp(g):
        z = np.zeros_like(x)
        if x.ndim == 1:
            z[i1] += g / 2.0
            z[i2] -= g / 2.0
        else:
            rows = np.arange(x.shape[0])
            z[rows, i1] += g / 2.0
            z[rows, i2] -= g / 2.0
        return z

    return [(0, vjp)]


_register("topk_margin", _topk_margin_fwd, _topk_margin_vjps)


def _detach_fwd(v, a):
    if "frozen" not in a:
        a["frozen"] = v[0]
    return a["frozen"]


_register("detach", _detach_fwd, lambda v, out, a: [])


def _ste_fwd(v, a):
    hard = a["hard"]
    if hard.shape != v[0].shape:
        raise ValueError(f"ste: hard mask shape {hard.shape} does not match {v[0].shape}")
    if "c0" not in a:
        a["c0"] = v[0]
    # Value equals the binary mask exactly at the recorded point and shifts
    # linearly with the soft mask, so replay differentiates to the identity.
    return hard + (v[0] - a["c0"])


_register("ste", _ste_fwd, lambda v, out, a: [(0, lambda g: g)])


# ---------------------------------------------------------------------------
# wrappers


def detach(x: Node) -> Node:
    """Same value as x; gradient flow through this edge is zero."""
    return primitive("detach", [x])


def affine(x, w, b):
    """x @ w.T + b for x (batch, in), w (out, in), b (out,)."""
    return primitive("affine", [x, w, b])


def relu(x):
    return primitive("relu", [x])


def softmax(x):
    """Row-wise softmax over the last axis, shifted by the row max."""
    return primitive("softmax", [x])


def log(x):
    return primitive("log", [x])


def exp(x):
    return primitive("exp", [x])


def add(a, b):
    return primitive("add", [a, b])


def sub(a, b):
    return primitive("sub", [a, b])


def mul(a, b):
    return primitive("mul", [a, b])


def div(a, b):
    return primitive("div", [a, b])


def sum(x):  # noqa: A001 - numpy-style reduction name
    return primitive("sum", [x])


def mean(x):
    return primitive("mean", [x])


def square(x):
    return primitive("square", [x])


def sqrt(x):
    return primitive("sqrt", [x])


def l2_norm_sq(x):
    """Sum of squares over the last axis."""
    return primitive("l2_norm_sq", [x])


def inf_norm(x):
    """Max |x_i| over the last axis; subgradient at the first attaining index."""
    return primitive("inf_norm", [x])


def clip(x, lo: float, hi: float):
    return primitive("clip", [x], lo=float(lo), hi=float(hi))


def softplus(x):
    return primitive("softplus", [x])


def kl_div(p, q):
    """Row-wise KL(p || q) with uniform smoothing of both arguments."""
    return primitive("kl_div", [p, q])


def cross_entropy(logits, labels):
    """Per-row negative log likelihood from logits (fused log-softmax)."""
    return primitive("cross_entropy", [logits], labels=np.asarray(labels, dtype=np.int64))


def topk_margin(p):
    """(largest - second largest) / 2 per row, first-index tie-break."""
    return primitive("topk_margin", [p])


def l1_sum(x):
    return primitive("l1_sum", [x])


def ste(c: Node, hard) -> Node:
    """Straight-through node: forward value is the binary mask, gradient is identity in c."""
    return primitive("ste", [c], hard=_f64(hard))
