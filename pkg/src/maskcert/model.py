"""Dense feed-forward classifiers with per-layer mask slots and checkpoints.

A model is a stack of affine layers with relu activations, ending in a
logits layer. Masks multiply the weight matrices elementwise after being
broadcast to weight shape: in unstructured mode a mask entry covers one
weight, in structured mode one mask entry scales an entire output row.
Biases are never masked. In structured mode the final classifier layer is
exempt (pruning its outputs would delete classes), so its prunable-unit
count is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError

MASK_MODES = ("unstructured", "structured")
ACTIVATIONS = ("relu", "none")
CHECKPOINT_VERSION = 1
STAGE_TAGS = ("pretrained", "mask_searched", "finetuned")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_specs(in_dim: int, hidden: list[int], classes: int) -> list[LayerSpec]:
    """Layer specs for an MLP with relu hidden layers and a logits head."""
    dims = [in_dim, *hidden, classes]
    specs = []
    for i in range(len(dims) - 1):
        act = "relu" if i < len(dims) - 2 else "none"
        specs.append(LayerSpec(dims[i], dims[i + 1], act))
    return specs


class MaskableModel:
    """Stack of dense layers whose weights accept broadcast mask multipliers."""

    def __init__(self, specs: list[LayerSpec], weights, biases, mask_mode="unstructured"):
        if not specs:
            raise ValueError("model needs at least one layer")
        if specs[-1].activation != "none":
            raise ValueError("final layer must produce logits (activation 'none')")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {mask_mode!r}")
        self.specs = list(specs)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.mask_mode = mask_mode
        for spec, w, b in zip(specs, self.weights, self.biases):
            if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ValueError(
                    f"weight shapes {w.shape}/{b.shape} do not match spec "
                    f"{spec.out_dim}x{spec.in_dim}")

    @classmethod
    def initialized(cls, specs, mask_mode, rng: np.random.Generator):
        """Uniform init in +-sqrt(6/(in+out)) per layer; biases zero."""
        weights, biases = [], []
        for spec in specs:
            bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
            biases.append(np.zeros(spec.out_dim))
        return cls(specs, weights, biases, mask_mode)

    @property
    def class_count(self) -> int:
        return self.specs[-1].out_dim

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    def weight_count(self) -> int:
        return int(np.sum([s.out_dim * s.in_dim for s in self.specs]))

    def mask_dims(self) -> list[int]:
        """Prunable-unit count per layer for the model's mask mode."""
        dims = []
        last = len(self.specs) - 1
        for i, spec in enumerate(self.specs):
            if self.mask_mode == "unstructured":
                dims.append(spec.out_dim * spec.in_dim)
            else:
                dims.append(spec.out_dim if i != last else 0)
        return dims

    def copy(self) -> "MaskableModel":
        return MaskableModel(self.specs, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.mask_mode)

    def forward(self, x: np.ndarray, multipliers=None) -> np.ndarray:
        """Softmax class probabilities, shape (batch, K).

        `multipliers` is an optional per-layer list of arrays already
        broadcast to each weight's shape (None entries mean dense). Never
        mutates the model, so concurrent evaluations are safe.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"forward: expected input (batch, {self.in_dim}), got {x.shape}")
        if multipliers is not None and len(multipliers) != len(self.specs):
            raise ValueError("forward: one multiplier entry per layer required")
        h = x
        for i, spec in enumerate(self.specs):
            w = self.weights[i]
            if multipliers is not None and multipliers[i] is not None:
                m = np.asarray(multipliers[i], dtype=np.float64)
                if m.shape != w.shape:
                    raise ValueError(
                        f"forward: multiplier shape {m.shape} != weight shape {w.shape} "
                        f"in layer {i}")
                w = m * w
            h = h @ w.T + self.biases[i]
            if spec.activation == "relu":
                h = np.maximum(h, 0.0)
        z = h - h.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("forward: non-finite output probabilities")
        return p


def broadcast_mask(vector: np.ndarray, spec: LayerSpec, mode: str) -> np.ndarray:
    """Map a per-layer mask vector to a multiplier of the weight's shape."""
    v = np.asarray(vector, dtype=np.float64)
    if mode == "unstructured":
        if v.shape != (spec.out_dim * spec.in_dim,):
            raise ValueError(
                f"broadcast: expected length {spec.out_dim * spec.in_dim}, got {v.shape}")
        return v.reshape(spec.out_dim, spec.in_dim)
    if mode == "structured":
        if v.shape != (spec.out_dim,):
            raise ValueError(f"broadcast: expected length {spec.out_dim}, got {v.shape}")
        return np.repeat(v[:, None], spec.in_dim, axis=1)
    raise ValueError(f"unknown mask mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoints: single UTF-8 JSON document with explicit shape validation


def save_checkpoint(path, model: MaskableModel, stage: str, *, soft_mask=None,
                    hard_mask=None, seed=None) -> None:
    if stage not in STAGE_TAGS:
        raise ValueError(f"unknown stage tag {stage!r}")
    doc = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "mask_mode": model.mask_mode,
        "seed": seed,
        "layers": [
            {"in": s.in_dim, "out": s.out_dim, "activation": s.activation,
             "W": w.tolist(), "b": b.tolist()}
            for s, w, b in zip(model.specs, model.weights, model.biases)
        ],
        "soft_mask": [c.tolist() for c in soft_mask] if soft_mask is not None else None,
        "hard_mask": [[int(v) for v in m] for m in hard_mask] if hard_mask is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Load a checkpoint; returns (model, extras dict).

    extras carries stage, seed, soft_mask and hard_mask (as float arrays,
    None when absent). All array lengths are validated before any model is
    constructed, so a corrupt file never yields a partial model.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"checkpoint {path}: not valid JSON ({exc})") from None

    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise DatasetError(
            f"checkpoint {path}: unrecognized version {doc.get('version')!r}")
    stage = doc.get("stage")
    if stage not in STAGE_TAGS:
        raise DatasetError(f"checkpoint {path}: unknown stage tag {stage!r}")
    mode = doc.get("mask_mode")
    if mode not in MASK_MODES:
        raise DatasetError(f"checkpoint {path}: unknown mask_mode {mode!r}")

    specs, weights, biases = [], [], []
    for i, layer in enumerate(doc.get("layers") or []):
        try:
            spec = LayerSpec(int(layer["in"]), int(layer["out"]), layer["activation"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"checkpoint {path}: bad layer {i} header ({exc})") from None
        w, b = layer.get("W"), layer.get("b")
        if (not isinstance(w, list) or len(w) != spec.out_dim
                or any(not isinstance(r, list) or len(r) != spec.in_dim for r in w)):
            raise DatasetError(
                f"checkpoint {path}: layer {i} weight array does not match "
                f"declared {spec.out_dim}x{spec.in_dim}")
        if not isinstance(b, list) or len(b) != spec.out_dim:
            raise DatasetError(
                f"checkpoint {path}: layer {i} bias length != {spec.out_dim}")
        specs.append(spec)
        weights.append(np.asarray(w, dtype=np.float64))
        biases.append(np.asarray(b, dtype=np.float64))
    if not specs:
        raise DatasetError(f"checkpoint {path}: no layers")

    try:
        model = MaskableModel(specs, weights, biases, mode)
    except ValueError as exc:
        raise DatasetError(f"checkpoint {path}: {exc}") from None

    dims = model.mask_dims()

    def _validate_mask(name):
        raw = doc.get(name)
        if raw is None:
            return None
        if not isinstance(raw, list) or len(raw) != len(specs):
            raise DatasetError(f"checkpoint {path}: {name} must have one entry per layer")
        out = []
        for i, (vec, n) in enumerate(zip(raw, dims)):
            if not isinstance(vec, list) or len(vec) != n:
                raise DatasetError(
                    f"checkpoint {path}: {name} layer {i} length {len(vec) if isinstance(vec, list) else '?'} != {n}")
            out.append(np.asarray(vec, dtype=np.float64))
        return out

    extras = {
        "stage": stage,
        "seed": doc.get("seed"),
        "soft_mask": _validate_mask("soft_mask"),
        "hard_mask": _validate_mask("hard_mask"),
    }
    return model, extras
