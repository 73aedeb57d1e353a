"""Shared oracles for the test suite: replay-based finite differences and
kink-free random instance construction for every autodiff primitive."""

import numpy as np

from maskcert import autodiff as ad

FD_H = 1e-5
FD_TOL = 1e-4


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
    return float(np.max(np.abs(a - f) / denom))


def fd_leaf_grad(tape, root, leaf, h=FD_H) -> np.ndarray:
    """Central differences of the recorded tape function w.r.t. one leaf."""
    base = leaf.value
    g = np.zeros_like(base)
    for i in range(base.size):
        vp = base.copy()
        vp.ravel()[i] += h
        vm = base.copy()
        vm.ravel()[i] -= h
        fp = tape.replay({leaf: vp})[root.id]
        fm = tape.replay({leaf: vm})[root.id]
        g.ravel()[i] = (float(fp) - float(fm)) / (2 * h)
    return g


def check_graph_fd(tape, root, leaves, tol=FD_TOL, h=FD_H) -> float:
    grads = ad.backprop(root)
    worst = 0.0
    for leaf in leaves:
        worst = max(worst, rel_err(grads[leaf.id], fd_leaf_grad(tape, root, leaf, h)))
    assert worst < tol, f"gradient mismatch vs finite differences: {worst:.3e}"
    return worst


def tape_kink_margin(tape) -> float:
    """Distance from the recorded values to the nearest non-smooth point of
    any kinked primitive on the tape; instances are admitted for finite
    differencing only when this clears a margin."""
    margin = np.inf

    def row2(x):
        s = np.sort(x, axis=-1)
        return s[..., -1] - s[..., -2]

    for node in tape.nodes:
        if node.op == "relu":
            margin = min(margin, float(np.abs(node.parents[0].value).min()))
        elif node.op == "l1_sum":
            margin = min(margin, float(np.abs(node.parents[0].value).min()))
        elif node.op == "clip":
            x = node.parents[0].value
            margin = min(margin, float(np.abs(x - node.attrs["lo"]).min()),
                         float(np.abs(x - node.attrs["hi"]).min()))
        elif node.op == "inf_norm":
            a = np.abs(node.parents[0].value)
            margin = min(margin, float(row2(a).min()), float(a.max(axis=-1).min()))
        elif node.op == "topk_margin":
            x = node.parents[0].value
            s = np.sort(x, axis=-1)
            margin = min(margin, float((s[..., -1] - s[..., -2]).min()))
            if x.shape[-1] >= 3:
                margin = min(margin, float((s[..., -2] - s[..., -3]).min()))
    return margin


def weighted_scalar(out, rng):
    """Contract a node against a random constant so the upstream gradient in
    finite-difference checks is non-uniform."""
    w = out.tape.const(rng.uniform(0.5, 1.5, size=out.value.shape))
    return ad.sum(ad.mul(out, w))


def _spaced(rng, n, lo, hi, min_gap_factor=0.25):
    """n values with guaranteed pairwise gaps, in random order."""
    base = np.linspace(lo, hi, n)
    jitter = rng.uniform(-1, 1, n) * (base[1] - base[0]) * min_gap_factor
    vals = base + jitter
    return rng.permutation(vals)


def _signed_away_from_zero(rng, shape, lo=0.2, hi=2.0):
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _distinct_abs_rows(rng, shape):
    """Rows whose |entries| are pairwise separated (safe for inf_norm)."""
    rows = shape[0] if len(shape) == 2 else 1
    k = shape[-1]
    out = np.stack([_spaced(rng, k, 0.3, 2.0) for _ in range(rows)])
    sign = np.where(rng.uniform(size=out.shape) < 0.5, -1.0, 1.0)
    out = out * sign
    return out.reshape(shape)


def _distinct_rows(rng, shape):
    """Rows with pairwise-separated raw values (safe for topk_margin)."""
    rows = shape[0] if len(shape) == 2 else 1
    k = shape[-1]
    out = np.stack([_spaced(rng, k, -1.5, 1.5) for _ in range(rows)])
    return out.reshape(shape)


def _probs(rng, shape):
    p = rng.dirichlet(np.full(shape[-1], 2.0), size=shape[:-1] or None)
    p = np.maximum(p, 1e-3)
    return p / p.sum(axis=-1, keepdims=True)


def _leafed(rng, arrays):
    tape = ad.Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
    return tape, leaves


def _case_affine(rng):
    tape, (x, w, b) = _leafed(rng, [rng.standard_normal((4, 3)),
                                    rng.standard_normal((5, 3)),
                                    rng.standard_normal(5)])
    return tape, weighted_scalar(ad.affine(x, w, b), rng), [x, w, b]


def _case_relu(rng, shape):
    tape, (x,) = _leafed(rng, [_signed_away_from_zero(rng, shape)])
    return tape, weighted_scalar(ad.relu(x), rng), [x]


def _case_softmax(rng, shape):
    tape, (x,) = _leafed(rng, [rng.standard_normal(shape)])
    return tape, weighted_scalar(ad.softmax(x), rng), [x]


def _case_unary_smooth(op, sampler):
    def build(rng, shape):
        tape, (x,) = _leafed(rng, [sampler(rng, shape)])
        return tape, weighted_scalar(op(x), rng), [x]
    return build


def _case_binary(op, y_sampler=None):
    def build(rng, shapes):
        sx, sy = shapes
        ys = y_sampler or (lambda r, s: r.standard_normal(s))
        tape, (x, y) = _leafed(rng, [rng.standard_normal(sx), ys(rng, sy)])
        return tape, weighted_scalar(op(x, y), rng), [x, y]
    return build


def _case_reduction(op, sampler=None):
    def build(rng, shape):
        s = sampler or (lambda r, sh: r.standard_normal(sh))
        tape, (x,) = _leafed(rng, [s(rng, shape)])
        return tape, weighted_scalar(op(x), rng), [x]
    return build


def _case_clip(rng, shape):
    lo, hi = -0.5, 0.7
    x = rng.uniform(-1.5, 1.5, size=shape)
    for edge in (lo, hi):
        near = np.abs(x - edge) < 5e-3
        x = np.where(near, x + 0.05, x)
    tape, (x_leaf,) = _leafed(rng, [x])
    return tape, weighted_scalar(ad.clip(x_leaf, lo, hi), rng), [x_leaf]


def _case_kl(rng, shape):
    tape, (p, q) = _leafed(rng, [_probs(rng, shape), _probs(rng, shape)])
    return tape, weighted_scalar(ad.kl_div(p, q), rng), [p, q]


def _case_cross_entropy(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    tape, (x,) = _leafed(rng, [logits])
    return tape, weighted_scalar(ad.cross_entropy(x, labels), rng), [x]


def _case_inf_norm(rng, shape):
    tape, (x,) = _leafed(rng, [_distinct_abs_rows(rng, shape)])
    return tape, weighted_scalar(ad.inf_norm(x), rng), [x]


def _case_topk(rng, shape):
    tape, (x,) = _leafed(rng, [_distinct_rows(rng, shape)])
    return tape, weighted_scalar(ad.topk_margin(x), rng), [x]


def _case_ste(rng, shape):
    c = rng.uniform(0.05, 0.95, size=shape)
    hard = (rng.uniform(size=shape) < 0.5).astype(float)
    tape, (c_leaf,) = _leafed(rng, [c])
    return tape, weighted_scalar(ad.ste(c_leaf, hard), rng), [c_leaf]


def _case_detach_composite(rng, shape):
    # detach(hard - C) + C: value tracks the frozen constant, grad is identity
    c = rng.uniform(0.05, 0.95, size=shape)
    hard = (rng.uniform(size=shape) < 0.5).astype(float)
    tape, (c_leaf,) = _leafed(rng, [c])
    node = ad.add(ad.detach(ad.sub(tape.const(hard), c_leaf)), c_leaf)
    return tape, weighted_scalar(node, rng), [c_leaf]


def _pos(lo, hi):
    return lambda rng, shape: rng.uniform(lo, hi, size=shape)


def _den_sampler(rng, shape):
    return _signed_away_from_zero(rng, shape, lo=0.4, hi=2.0)


# primitive -> list of (label, builder(rng) -> (tape, root, leaves))
PRIMITIVE_CASES = {
    "affine": [("2d", _case_affine)],
    "relu": [("1d", lambda r: _case_relu(r, (7,))), ("2d", lambda r: _case_relu(r, (3, 5)))],
    "softmax": [("1d", lambda r: _case_softmax(r, (5,))), ("2d", lambda r: _case_softmax(r, (4, 3)))],
    "log": [("1d", lambda r: _case_unary_smooth(ad.log, _pos(0.2, 3.0))(r, (6,))),
            ("2d", lambda r: _case_unary_smooth(ad.log, _pos(0.2, 3.0))(r, (3, 4)))],
    "exp": [("1d", lambda r: _case_unary_smooth(ad.exp, lambda g, s: g.uniform(-2, 2, s))(r, (6,))),
            ("2d", lambda r: _case_unary_smooth(ad.exp, lambda g, s: g.uniform(-2, 2, s))(r, (3, 4)))],
    "add": [("same", lambda r: _case_binary(ad.add)(r, ((3, 4), (3, 4)))),
            ("bcast", lambda r: _case_binary(ad.add)(r, ((3, 4), (4,))))],
    "sub": [("same", lambda r: _case_binary(ad.sub)(r, ((3, 4), (3, 4)))),
            ("bcast", lambda r: _case_binary(ad.sub)(r, ((3, 4), (1, 4))))],
    "mul": [("same", lambda r: _case_binary(ad.mul)(r, ((3, 4), (3, 4)))),
            ("bcast_col", lambda r: _case_binary(ad.mul)(r, ((3, 4), (3, 1)))),
            ("scalar", lambda r: _case_binary(ad.mul)(r, ((3, 4), ())))],
    "div": [("same", lambda r: _case_binary(ad.div, _den_sampler)(r, ((3, 4), (3, 4)))),
            ("bcast", lambda r: _case_binary(ad.div, _den_sampler)(r, ((4,), ())))],
    "sum": [("2d", lambda r: _case_reduction(ad.sum)(r, (3, 4)))],
    "mean": [("2d", lambda r: _case_reduction(ad.mean)(r, (3, 4)))],
    "square": [("2d", lambda r: _case_reduction(ad.square)(r, (3, 4)))],
    "sqrt": [("2d", lambda r: _case_reduction(ad.sqrt, _pos(0.2, 3.0))(r, (3, 4)))],
    "l1_sum": [("2d", lambda r: _case_reduction(ad.l1_sum, _signed_away_from_zero)(r, (3, 4)))],
    "l2_norm_sq": [("1d", lambda r: _case_reduction(ad.l2_norm_sq)(r, (6,))),
                   ("2d", lambda r: _case_reduction(ad.l2_norm_sq)(r, (3, 4)))],
    "inf_norm": [("1d", lambda r: _case_inf_norm(r, (6,))), ("2d", lambda r: _case_inf_norm(r, (4, 5)))],
    "clip": [("1d", lambda r: _case_clip(r, (8,))), ("2d", lambda r: _case_clip(r, (3, 5)))],
    "softplus": [("1d", lambda r: _case_reduction(ad.softplus)(r, (7,))),
                 ("2d", lambda r: _case_reduction(ad.softplus)(r, (3, 4)))],
    "kl_div": [("1d", lambda r: _case_kl(r, (5,))), ("2d", lambda r: _case_kl(r, (4, 3)))],
    "cross_entropy": [("2d", _case_cross_entropy)],
    "topk_margin": [("1d", lambda r: _case_topk(r, (5,))), ("2d", lambda r: _case_topk(r, (4, 4)))],
    "ste": [("1d", lambda r: _case_ste(r, (6,))), ("2d", lambda r: _case_ste(r, (3, 4)))],
    "detach": [("ste_composite", lambda r: _case_detach_composite(r, (6,)))],
}


def run_primitive_fd_suite(instances_per_case=20, seed_base=1000):
    """Finite-difference check of every primitive over all shape classes.
    Returns the worst relative error seen."""
    worst = 0.0
    for kind, cases in PRIMITIVE_CASES.items():
        for label, build in cases:
            for k in range(instances_per_case):
                rng = np.random.default_rng([seed_base, hash(kind + label) % (2**32), k])
                tape, root, leaves = build(rng)
                worst = max(worst, check_graph_fd(tape, root, leaves))
    return worst
