"""Subtraction-based multi-scale feature fusion for segmentation.

A self-contained stack: reverse-mode autodiff tensors, the fusion-pyramid
encoder-decoder model, boundary-weighted losses with a frozen feature-loss
extractor, a verifiable metric suite, and a deterministic training harness.
"""

from .autodiff import SGD, Parameter, Tensor, backward, no_grad
from .data import Sample, SyntheticSpec, kfold, load_folder, synth_generate, synth_samples
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError
from .losses import FeatureLossExtractor, LossBundle, LossConfig, SegmentationLoss
from .metrics import MetricParams, MetricReport
from .model import ModelConfig, PyramidFeatures, SegmentationModel
from .train import TrainConfig, TrainResult, evaluate, lr_schedule, predict, train

__version__ = "0.1.0"

__all__ = [
    "SGD",
    "Parameter",
    "Tensor",
    "backward",
    "no_grad",
    "Sample",
    "SyntheticSpec",
    "kfold",
    "load_folder",
    "synth_generate",
    "synth_samples",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "FeatureLossExtractor",
    "LossBundle",
    "LossConfig",
    "SegmentationLoss",
    "MetricParams",
    "MetricReport",
    "ModelConfig",
    "PyramidFeatures",
    "SegmentationModel",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "lr_schedule",
    "predict",
    "train",
]
