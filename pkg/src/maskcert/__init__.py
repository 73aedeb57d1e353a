"""Robust pruning-mask search for dense classifiers, with probabilistic
certification of the deployed masked model."""

from .certify import CertConfig, PcaResult, SampleCert, paley_confidence, pca
from .config import ExperimentConfig, parse_config
from .datasets import Dataset, SyntheticDatasetSpec, gen_synthetic, load_idx
from .masks import HardMask, binarize, effective_ratio, init_percentile_scaled
from .model import LayerSpec, MaskableModel, load_checkpoint, save_checkpoint
from .objectives import LossWeights, StepReport, composite_step_loss
from .pipeline import TrainConfig, run_experiment
from .transforms import CorruptionTag, TransformSpec

__version__ = "0.1.0"

__all__ = [
    "CertConfig", "PcaResult", "SampleCert", "paley_confidence", "pca",
    "ExperimentConfig", "parse_config",
    "Dataset", "SyntheticDatasetSpec", "gen_synthetic", "load_idx",
    "HardMask", "binarize", "effective_ratio", "init_percentile_scaled",
    "LayerSpec", "MaskableModel", "load_checkpoint", "save_checkpoint",
    "LossWeights", "StepReport", "composite_step_loss",
    "TrainConfig", "run_experiment",
    "CorruptionTag", "TransformSpec",
    "__version__",
]
