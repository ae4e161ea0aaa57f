"""Gated two-stream convolutional-recurrent video features for cross-camera
person matching, on a pure numpy reverse-mode tape.

The pieces, bottom to top: ``tensor`` (autodiff core), ``network`` (the
two-stream gated architecture), ``losses`` (identification + verification +
gate regularizer), ``synth`` (two-camera benchmark generator with exact
flow), ``training`` (Adam pair training), ``evaluation`` (multi-crop CMC),
``checkpoint`` (bit-exact persistence), ``verify`` (finite-difference
checks), ``cli`` (the ``gatereid`` command).
"""

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .evaluation import CMCCurve, compute_cmc
from .losses import ClassifierParams, LossBreakdown, total_loss
from .network import (
    NetworkConfig,
    NetworkParams,
    frame_forward,
    init_network_params,
    sequence_forward,
)
from .synth import (SyntheticDataset, VideoClip, generate_dataset, load_dataset,
                    save_dataset, train_test_split)
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, grad_check, no_recording
from .training import ChannelStats, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "CMCCurve",
    "ChannelStats",
    "CheckpointBundle",
    "ClassifierParams",
    "LossBreakdown",
    "NetworkConfig",
    "NetworkParams",
    "NonFiniteError",
    "ShapeError",
    "SyntheticDataset",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "VideoClip",
    "compute_cmc",
    "frame_forward",
    "generate_dataset",
    "grad_check",
    "init_network_params",
    "load_checkpoint",
    "load_dataset",
    "no_recording",
    "save_checkpoint",
    "save_dataset",
    "train_test_split",
    "sequence_forward",
    "total_loss",
    "train",
]
