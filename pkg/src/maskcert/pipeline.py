"""End-to-end training pipeline and baselines.

Stage 1 pre-trains the dense model with cross-entropy on the augmented set.
Stage 2 freezes the weights and searches a soft pruning mask with the
composite objective, clamping the mask into [0, 1] after every update.
Stage 3 binarizes the mask and fine-tunes the surviving weights under the
fixed hard mask; pruned weights receive exactly zero update because the
gradient arrives multiplied by the mask.

Baselines share everything they can with the main method: identical
pre-trained weights, augmented data, schedules, and certification streams
within one experiment, so comparisons isolate the mask choice.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .certify import PcaResult, pca
from .config import (ExperimentConfig, augment_count, cert_config, loss_weights,
                     model_layer_specs, synthetic_spec, transform_spec)
from .datasets import Dataset, accuracy, gen_synthetic, load_idx
from .errors import ConfigError
from .masks import (HardMask, binarize, effective_ratio, hard_multipliers,
                    init_percentile_scaled, unit_magnitudes)
from .model import MaskableModel
from .objectives import (LossWeights, StepReport, build_logits,
                         composite_step_loss, weight_leaves)
from .transforms import augment_dataset

# rng stream namespaces under the experiment root seed
STREAM_INIT = 1
STREAM_AUGMENT = 2
STREAM_STAGE1 = 3
STREAM_STAGE2_SHUFFLE = 4
STREAM_STAGE2_NOISE = 5
STREAM_STAGE3 = 6
STREAM_EVAL = 8


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 50
    stage1_lr: float = 0.01
    stage2_epochs: int = 100
    stage2_lr: float = 1e-4
    stage3_epochs: int = 50
    stage3_lr: float = 0.001
    batch_size: int = 64
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.stage3_epochs) < 1:
            raise ConfigError("epochs must be >= 1 in every stage")
        if min(self.stage1_lr, self.stage2_lr, self.stage3_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(stage1_epochs=cfg.stage1_epochs, stage1_lr=cfg.stage1_lr,
                       stage2_epochs=cfg.stage2_epochs, stage2_lr=cfg.stage2_lr,
                       stage3_epochs=cfg.stage3_epochs, stage3_lr=cfg.stage3_lr,
                       batch_size=cfg.batch_size, momentum=cfg.momentum)


class MomentumSGD:
    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        for i, (p, g) in enumerate(zip(params, grads)):
            v = self.velocity.get(i)
            v = g if v is None else self.momentum * v + g
            self.velocity[i] = v
            p -= self.lr * v


class Adam:
    """Per-coordinate first/second-moment update with bias correction."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(params, grads)):
            if g.size == 0:
                continue
            m = self.m.get(i, np.zeros_like(g))
            v = self.v.get(i, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[i], self.v[i] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: float


def _ce_epochs(model: MaskableModel, data: Dataset, epochs: int, lr: float,
               momentum: float, batch_size: int, rng: np.random.Generator,
               multipliers=None) -> list[EpochStats]:
    """Mini-batch cross-entropy training, optionally under fixed multipliers.
    Updates model weights in place."""
    opt = MomentumSGD(lr, momentum)
    history = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = data.x[idx], data.y[idx]
            tape = ad.Tape()
            w_nodes, b_nodes = weight_leaves(tape, model, trainable=True)
            mask_nodes = None
            if multipliers is not None:
                mask_nodes = [None if m is None else tape.const(m) for m in multipliers]
            try:
                logits = build_logits(tape.const(xb), w_nodes, b_nodes,
                                      model.specs, mask_nodes)
                loss = ad.mean(ad.cross_entropy(logits, yb))
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: {exc}") from None
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: non-finite loss")
            grads = ad.backprop(loss)
            params = model.weights + model.biases
            gs = [grads[node.id] for node in w_nodes] + [grads[node.id] for node in b_nodes]
            opt.step(params, gs)
            loss_sum += float(loss.value) * len(idx)
        history.append(EpochStats(epoch, loss_sum / n, accuracy(model, data, multipliers)))
    return history


def stage1_pretrain(model: MaskableModel, train_aug: Dataset, tc: TrainConfig,
                    seed: int) -> list[EpochStats]:
    rng = np.random.default_rng([seed, STREAM_STAGE1])
    return _ce_epochs(model, train_aug, tc.stage1_epochs, tc.stage1_lr,
                      tc.momentum, tc.batch_size, rng)


def stage2_mask_search(model: MaskableModel, pairs, tc: TrainConfig,
                       weights: LossWeights, pr: float, mu: float, tau: float,
                       seed: int):
    """Search the soft mask over the paired batches; weights stay frozen.

    Returns (soft_mask, step reports). The mask is clamped back into [0, 1]
    after every update. Each step's noise draws come from a stream derived
    from (seed, noise namespace, step), so any step is reproducible in
    isolation; the draw_seed column records that triple.
    """
    clean, transformed = pairs
    if len(clean) == 0:
        raise ConfigError("mask search needs a non-empty paired set; "
                          "augment the dataset first")
    if sum(model.mask_dims()) == 0:
        raise ConfigError("model has no prunable units under this mask mode")
    soft = init_percentile_scaled(model, tau)
    opt = Adam(tc.stage2_lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    shuffle_rng = np.random.default_rng([seed, STREAM_STAGE2_SHUFFLE])
    reports: list[StepReport] = []
    step = 0
    for _ in range(tc.stage2_epochs):
        order = shuffle_rng.permutation(len(clean))
        for start in range(0, len(clean), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            noise_rng = np.random.default_rng([seed, STREAM_STAGE2_NOISE, step])
            result = composite_step_loss(
                model, soft, clean[idx], transformed[idx], weights, pr, mu,
                noise_rng, step=step,
                draw_seed=f"{seed}:{STREAM_STAGE2_NOISE}:{step}")
            opt.step(soft, result.grads)
            soft = [np.clip(c, 0.0, 1.0) for c in soft]
            reports.append(result.report)
            step += 1
    return soft, reports


def stage3_finetune(model: MaskableModel, hard: HardMask, train_aug: Dataset,
                    tc: TrainConfig, seed: int) -> list[EpochStats]:
    """Fine-tune weights under the fixed binary mask (in place)."""
    multipliers = hard_multipliers(model, hard)
    rng = np.random.default_rng([seed, STREAM_STAGE3])
    return _ce_epochs(model, train_aug, tc.stage3_epochs, tc.stage3_lr,
                      tc.momentum, tc.batch_size, rng, multipliers=multipliers)


def lmp_mask(model: MaskableModel, pr: float) -> HardMask:
    """Least-magnitude pruning: per-layer top-(1-pr) units by weight
    magnitude, with the same keep counts and tie rules as binarize."""
    return binarize(unit_magnitudes(model), pr)


@dataclass
class MethodResult:
    method: str
    clean_accuracy: float
    pca: float
    ratio: float
    wall_time: float
    seed: int


@dataclass
class MethodArtifacts:
    model: MaskableModel
    hard: HardMask | None
    soft: list | None
    cert: PcaResult
    stage_logs: dict


@dataclass
class ExperimentOutput:
    results: list[MethodResult]
    artifacts: dict[str, MethodArtifacts]
    pretrained: MaskableModel
    stage1_log: list[EpochStats]
    eval_indices: np.ndarray
    train_aug: Dataset
    test: Dataset


def build_data(cfg: ExperimentConfig):
    """Dataset + transformation space + augmented set + pairs, all derived
    deterministically from the config."""
    if cfg.dataset_kind == "synthetic":
        train, test, direction = gen_synthetic(synthetic_spec(cfg))
        spec = transform_spec(cfg, direction)
    else:
        train = load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.idx_classes)
        test = load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.idx_classes)
        if len(train) == 0 or len(test) == 0:
            raise ConfigError("idx dataset is empty")
        spec = transform_spec(cfg)
    rng = np.random.default_rng([cfg.seed, STREAM_AUGMENT])
    count = augment_count(cfg, len(train))
    x_aug, y_aug, pairs = augment_dataset(train.x, train.y, spec, count, 1.0, rng)
    return train, test, spec, Dataset(x_aug, y_aug), pairs


def class_count(cfg: ExperimentConfig) -> int:
    return cfg.synthetic_classes if cfg.dataset_kind == "synthetic" else cfg.idx_classes


def fresh_model(cfg: ExperimentConfig, in_dim: int) -> MaskableModel:
    specs = model_layer_specs(cfg, in_dim, class_count(cfg))
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    return MaskableModel.initialized(specs, cfg.mask_mode, rng)


def eval_subset(cfg: ExperimentConfig, test: Dataset) -> np.ndarray:
    m = cfg.cert_eval_size
    if m > len(test):
        raise ConfigError(
            f"cert_eval_size {m} exceeds the test set size {len(test)}")
    rng = np.random.default_rng([cfg.seed, STREAM_EVAL])
    return np.sort(rng.choice(len(test), size=m, replace=False))


def run_experiment(cfg: ExperimentConfig) -> ExperimentOutput:
    """Train every configured method from one shared pre-trained model and
    certify them on one shared evaluation subset."""
    train, test, spec, train_aug, pairs = build_data(cfg)
    tc = train_config(cfg)
    ccfg = cert_config(cfg)
    weights = loss_weights(cfg)

    base = fresh_model(cfg, train.x.shape[1])
    stage1_log = stage1_pretrain(base, train_aug, tc, cfg.seed)

    idx = eval_subset(cfg, test)
    x_eval, y_eval = test.x[idx], test.y[idx]

    results, artifacts = [], {}
    for method in cfg.methods:
        t0 = time.perf_counter()
        logs = {}
        soft = None
        if method == "vanilla":
            model, hard = base.copy(), None
        elif method == "lmp":
            model = base.copy()
            hard = lmp_mask(model, cfg.pruning_ratio)
            logs["stage3"] = stage3_finetune(model, hard, train_aug, tc, cfg.seed)
        elif method == "csam":
            model = base.copy()
            soft, reports = stage2_mask_search(
                model, pairs, tc, weights, cfg.pruning_ratio,
                cfg.noise_magnitude, cfg.init_percentile, cfg.seed)
            logs["stage2"] = reports
            hard = binarize(soft, cfg.pruning_ratio)
            logs["stage3"] = stage3_finetune(model, hard, train_aug, tc, cfg.seed)
        else:
            raise ConfigError(f"unknown method {method!r}")

        multipliers = hard_multipliers(model, hard)
        cert = pca(model, multipliers, x_eval, y_eval, spec, ccfg)
        ratio = effective_ratio(hard, model) if hard is not None else 0.0
        results.append(MethodResult(
            method=method,
            clean_accuracy=accuracy(model, test, multipliers),
            pca=cert.fraction,
            ratio=ratio,
            wall_time=time.perf_counter() - t0,
            seed=cfg.seed,
        ))
        artifacts[method] = MethodArtifacts(model=model, hard=hard, soft=soft,
                                            cert=cert, stage_logs=logs)

    return ExperimentOutput(results=results, artifacts=artifacts, pretrained=base,
                            stage1_log=stage1_log, eval_indices=idx,
                            train_aug=train_aug, test=test)
