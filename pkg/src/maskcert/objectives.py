"""The composite mask-search objective and its building blocks.

One training step draws three independent noisy soft masks, compares the
resulting predictions for structural stability, aligns the soft-mask
predictions with the binarized mask through a straight-through node, and
penalizes the prediction discrepancy between clean and transformed inputs
relative to the classification margin. All terms are assembled on a single
tape so one backward pass yields the full gradient on the soft mask while
frozen weights never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvariantError
from .masks import binarize, noisy_mask_values, sample_noisy
from .model import MaskableModel, broadcast_mask


@dataclass(frozen=True)
class LossWeights:
    stab: float = 5.0
    ratio: float = 1.0
    consis: float = 1.0
    l1: float = 1e-4
    eta: float = 1.0          # safety threshold on the robustness ratio
    margin_eps: float = 1e-6  # keeps the ratio finite at zero margin

    def __post_init__(self):
        if min(self.stab, self.ratio, self.consis, self.l1) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.margin_eps <= 0:
            raise ValueError(f"margin_eps must be positive, got {self.margin_eps}")


@dataclass
class StepReport:
    step: int
    l_stab: float
    l_ratio: float
    l_consis: float
    l1_normalized: float
    l1_raw: float
    composite: float
    grad_norm: float
    draw_seed: str


def margin(p):
    """Half the gap between the top-2 entries per probability row."""
    return ad.topk_margin(p)


def discrepancy(p_a, p_b):
    """Row-wise sup-norm distance between two probability batches."""
    if p_a.value.shape != p_b.value.shape:
        raise ValueError(f"discrepancy: shapes differ, {p_a.value.shape} vs {p_b.value.shape}")
    return ad.inf_norm(ad.sub(p_a, p_b))


def stability_loss(p_m, p_n):
    """Batch mean of the squared L2 distance between probability rows from
    two independent mask draws."""
    return ad.mean(ad.l2_norm_sq(ad.sub(p_m, p_n)))


def ratio_loss(z, d, weights: LossWeights):
    """Batch mean of softplus(Z / (d + eps) - eta): a smooth penalty on the
    robustness ratio exceeding the safety threshold, per sample."""
    tape = z.tape
    r = ad.div(z, ad.add(d, tape.const(weights.margin_eps)))
    return ad.mean(ad.softplus(ad.sub(r, tape.const(weights.eta))))


def consistency_loss(p_soft, p_hard):
    """Batch mean KL(p_soft || p_hard); p_hard normally arrives through the
    straight-through node so gradient reaches the soft mask."""
    return ad.mean(ad.kl_div(p_soft, p_hard))


# ---------------------------------------------------------------------------
# graph construction over a model


def mask_node_shape(spec, mode):
    """Leaf shape for a layer's mask so plain elementwise broadcasting against
    the (out, in) weight works: (out, in) unstructured, (out, 1) structured."""
    if mode == "unstructured":
        return (spec.out_dim, spec.in_dim)
    return (spec.out_dim, 1)


def mask_leaves(tape, model: MaskableModel, soft_mask, requires_grad=True):
    """One leaf per maskable layer (None for exempt layers), in broadcastable
    shape. The i-th entry aligns with model layer i."""
    leaves = []
    for spec, c in zip(model.specs, soft_mask):
        if c.size == 0:
            leaves.append(None)
        else:
            leaves.append(tape.leaf(c.reshape(mask_node_shape(spec, model.mask_mode)),
                                    requires_grad=requires_grad))
    return leaves


def weight_leaves(tape, model: MaskableModel, trainable=False):
    ws = [tape.leaf(w, requires_grad=trainable) for w in model.weights]
    bs = [tape.leaf(b, requires_grad=trainable) for b in model.biases]
    return ws, bs


def build_logits(x_node, w_nodes, b_nodes, specs, mask_nodes=None):
    h = x_node
    for i, spec in enumerate(specs):
        w = w_nodes[i]
        if mask_nodes is not None and mask_nodes[i] is not None:
            w = ad.mul(mask_nodes[i], w)
        h = ad.affine(h, w, b_nodes[i])
        if spec.activation == "relu":
            h = ad.relu(h)
    return h


def build_probs(x_node, w_nodes, b_nodes, specs, mask_nodes=None):
    return ad.softmax(build_logits(x_node, w_nodes, b_nodes, specs, mask_nodes))


@dataclass
class CompositeResult:
    loss: object                 # scalar Node
    report: StepReport
    grads: list[np.ndarray]      # per layer, flattened to mask-vector shape


def composite_step_loss(model: MaskableModel, soft_mask, x, x_t,
                        weights: LossWeights, pr: float, mu: float,
                        rng: np.random.Generator, step: int = 0,
                        draw_seed: str = "") -> CompositeResult:
    """One full objective evaluation plus backward pass on a fresh tape.

    Weights are frozen (their gradients are never allocated); only the soft
    mask receives gradients. Returns the loss node, a StepReport, and the
    per-layer mask gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("composite_step_loss: empty batch")
    if x.shape != x_t.shape:
        raise ValueError(f"batch pair shapes differ: {x.shape} vs {x_t.shape}")
    total_units = sum(c.size for c in soft_mask)
    if total_units == 0:
        raise ValueError("model has no prunable units to search over")

    tape = ad.Tape()
    c_leaves = mask_leaves(tape, model, soft_mask, requires_grad=True)
    w_nodes, b_nodes = weight_leaves(tape, model, trainable=False)
    x_node = tape.const(x)
    xt_node = tape.const(x_t)

    live = [c for c in c_leaves if c is not None]
    c_m = _scatter(sample_noisy(live, mu, rng), c_leaves)
    c_n = _scatter(sample_noisy(live, mu, rng), c_leaves)
    c_s = _scatter(sample_noisy(live, mu, rng), c_leaves)

    p_m = build_probs(x_node, w_nodes, b_nodes, model.specs, c_m)
    p_n = build_probs(x_node, w_nodes, b_nodes, model.specs, c_n)
    l_stab = stability_loss(p_m, p_n)

    hard = binarize(soft_mask, pr)
    ste_nodes = []
    for leaf, spec, vec in zip(c_leaves, model.specs, hard.layers):
        if leaf is None:
            ste_nodes.append(None)
        else:
            shaped = vec.reshape(mask_node_shape(spec, model.mask_mode))
            ste_nodes.append(ad.ste(leaf, shaped))
    p_h = build_probs(x_node, w_nodes, b_nodes, model.specs, ste_nodes)
    l_consis = consistency_loss(p_m, p_h)

    p_s = build_probs(xt_node, w_nodes, b_nodes, model.specs, c_s)
    z = discrepancy(p_m, p_s)
    d = margin(p_m)
    l_ratio = ratio_loss(z, d, weights)

    l1_raw = None
    for leaf in live:
        term = ad.l1_sum(leaf)
        l1_raw = term if l1_raw is None else ad.add(l1_raw, term)
    l1_norm = ad.mul(l1_raw, tape.const(1.0 / total_units))

    total = ad.add(
        ad.add(ad.mul(tape.const(weights.stab), l_stab),
               ad.mul(tape.const(weights.ratio), l_ratio)),
        ad.add(ad.mul(tape.const(weights.consis), l_consis),
               ad.mul(tape.const(weights.l1), l1_norm)))

    grad_map = ad.backprop(total)
    grads, sq = [], 0.0
    for leaf, c in zip(c_leaves, soft_mask):
        if leaf is None:
            grads.append(np.empty(0))
        else:
            g = grad_map[leaf.id].reshape(c.shape)
            grads.append(g)
            sq += float((g * g).sum())

    report = StepReport(
        step=step,
        l_stab=float(l_stab.value),
        l_ratio=float(l_ratio.value),
        l_consis=float(l_consis.value),
        l1_normalized=float(l1_norm.value),
        l1_raw=float(l1_raw.value),
        composite=float(total.value),
        grad_norm=float(np.sqrt(sq)),
        draw_seed=draw_seed,
    )
    return CompositeResult(loss=total, report=report, grads=grads)


def _scatter(live_nodes, template):
    """Re-align a dense list of nodes with a template containing None gaps."""
    out, it = [], iter(live_nodes)
    for slot in template:
        out.append(None if slot is None else next(it))
    return out


@dataclass
class TriangleCheck:
    z_c: float
    bound: float
    term_a: float
    term_b: float
    term_c: float


def triangle_bound_check(model: MaskableModel, soft_mask, x, x_t, mu: float,
                         rng: np.random.Generator, draws: int) -> TriangleCheck:
    """Numerically verify the three-term bound on the prediction discrepancy
    of one fixed noisy draw against the noisy-mask ensemble mean.

    The bound holds for any reference point by the triangle inequality plus
    the norm ordering, so it must hold for the empirical mean too; violation
    raises InvariantError.
    """
    if draws < 2:
        raise ValueError(f"draws must be >= 2, got {draws}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))

    def _forward(mask_vals, inp):
        mult = [broadcast_mask(v, spec, model.mask_mode) if v.size else None
                for v, spec in zip(mask_vals, model.specs)]
        return model.forward(inp, mult)[0]

    fixed = noisy_mask_values(soft_mask, mu, rng)
    p_c_x = _forward(fixed, x)
    p_c_xt = _forward(fixed, x_t)

    acc_x = np.zeros(model.class_count)
    acc_xt = np.zeros(model.class_count)
    for _ in range(draws):
        draw = noisy_mask_values(soft_mask, mu, rng)
        acc_x += _forward(draw, x)
        acc_xt += _forward(draw, x_t)
    bar_x = acc_x / draws
    bar_xt = acc_xt / draws

    z_c = float(np.abs(p_c_x - p_c_xt).max())
    term_a = float(np.sqrt(((p_c_x - bar_x) ** 2).sum()))
    term_b = float(np.abs(bar_x - bar_xt).max())
    term_c = float(np.sqrt(((bar_xt - p_c_xt) ** 2).sum()))
    bound = term_a + term_b + term_c
    if z_c > bound + 1e-9:
        raise InvariantError(
            f"triangle bound violated: Z_C={z_c} > A+B+C={bound}")
    return TriangleCheck(z_c, bound, term_a, term_b, term_c)
