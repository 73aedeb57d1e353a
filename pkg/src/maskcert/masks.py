"""Soft-mask lifecycle: percentile-scaled init, noise injection, layer-wise
top-k binarization, and the straight-through path.

A soft mask is a list of per-layer float vectors in [0, 1] whose lengths are
the model's prunable-unit counts (mask_dims); exempt layers carry empty
vectors. Keep counts use exact rational arithmetic so that e.g. a 0.7
pruning ratio on 10 units keeps ceil(3) = 3 units, not 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .model import MaskableModel, broadcast_mask


@dataclass
class HardMask:
    """Binary per-layer masks plus the thresholds that produced them."""
    layers: list[np.ndarray]
    thresholds: list[float]
    pruning_ratio: float

    @property
    def keep_ratio(self) -> float:
        return 1.0 - self.pruning_ratio


def unit_magnitudes(model: MaskableModel) -> list[np.ndarray]:
    """Per-unit weight magnitude per layer: |w| flattened in unstructured
    mode, row L2 norms in structured mode. Exempt layers give empty arrays."""
    out = []
    for w, n in zip(model.weights, model.mask_dims()):
        if n == 0:
            out.append(np.empty(0))
        elif model.mask_mode == "unstructured":
            out.append(np.abs(w).ravel().copy())
        else:
            out.append(np.sqrt((w * w).sum(axis=1)))
    return out


def _keep_count(fraction: Fraction, n: int) -> int:
    return math.ceil(fraction * n) if n > 0 else 0


def init_percentile_scaled(model: MaskableModel, tau: float) -> list[np.ndarray]:
    """Soft mask C = clip(|w| / Q, 0, 1) per layer, where Q is the
    ceil(tau% * N)-th largest magnitude, so exactly the top tau% of units
    start at the clip ceiling (nearest-rank convention)."""
    if not 0.0 < tau < 100.0:
        raise ValueError(f"tau must be in (0, 100), got {tau}")
    frac = Fraction(str(tau)) / 100
    soft = []
    for i, mags in enumerate(unit_magnitudes(model)):
        n = mags.size
        if n == 0:
            soft.append(np.empty(0))
            continue
        kappa = _keep_count(frac, n)
        q = np.sort(mags)[n - kappa]
        if q <= 0.0:
            raise ValueError(
                f"layer {i}: percentile threshold is zero; re-initialize the "
                f"weights before building a mask")
        soft.append(np.clip(mags / q, 0.0, 1.0))
    return soft


def sample_noisy(c_nodes: list, mu: float, rng: np.random.Generator) -> list:
    """clip(C + xi, 0, 1) with xi ~ U(-mu, mu) i.i.d. per entry, fresh per
    call. Gradient reaches C through clip's pass-through region."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    out = []
    for c in c_nodes:
        xi = rng.uniform(-mu, mu, size=c.value.shape)
        out.append(ad.clip(ad.add(c, c.tape.const(xi)), 0.0, 1.0))
    return out


def noisy_mask_values(c_layers: list[np.ndarray], mu: float,
                      rng: np.random.Generator) -> list[np.ndarray]:
    """Value-level counterpart of sample_noisy for gradient-free evaluation."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    return [np.clip(c + rng.uniform(-mu, mu, size=c.shape), 0.0, 1.0)
            for c in c_layers]


def binarize(soft_mask: list[np.ndarray], pr: float) -> HardMask:
    """Layer-wise top-k projection: keep ceil((1-pr) * N_i) units per layer,
    ties broken by lower index kept first."""
    if not 0.0 <= pr < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {pr}")
    keep_frac = 1 - Fraction(str(pr))
    layers, thresholds = [], []
    for c in soft_mask:
        n = c.size
        if n == 0:
            layers.append(np.empty(0))
            thresholds.append(float("nan"))
            continue
        kappa = _keep_count(keep_frac, n)
        order = np.argsort(-c, kind="stable")  # stable: lower index first on ties
        mask = np.zeros(n)
        mask[order[:kappa]] = 1.0
        layers.append(mask)
        thresholds.append(float(c[order[kappa - 1]]))
    return HardMask(layers, thresholds, float(pr))


def ste(c_node, hard_values: np.ndarray):
    """Differentiable hard-mask node: forward value equals the binary mask
    bitwise, gradient with respect to C is the identity."""
    return ad.ste(c_node, hard_values)


def effective_ratio(mask_layers, model: MaskableModel) -> float:
    """Realized pruning ratio: zeroed weight entries / total weight entries,
    counted with exact integers. Accepts a HardMask or a per-layer list of
    vectors; empty entries leave a layer dense."""
    if isinstance(mask_layers, HardMask):
        mask_layers = mask_layers.layers
    if len(mask_layers) != len(model.specs):
        raise ValueError("mask must have one entry per layer")
    zeroed = 0
    for spec, vec in zip(model.specs, mask_layers):
        v = np.asarray(vec)
        if v.size == 0:
            continue
        if model.mask_mode == "unstructured":
            if v.shape != (spec.out_dim * spec.in_dim,):
                raise ValueError(
                    f"mask length {v.size} != {spec.out_dim * spec.in_dim}")
            zeroed += int(np.count_nonzero(v == 0))
        else:
            if v.shape != (spec.out_dim,):
                raise ValueError(f"mask length {v.size} != {spec.out_dim}")
            zeroed += int(np.count_nonzero(v == 0)) * spec.in_dim
    return zeroed / model.weight_count()


def hard_multipliers(model: MaskableModel, hard: HardMask | None) -> list | None:
    """Broadcast a hard mask to per-layer weight-shaped multipliers."""
    if hard is None:
        return None
    return [broadcast_mask(vec, spec, model.mask_mode) if vec.size else None
            for vec, spec in zip(hard.layers, model.specs)]
