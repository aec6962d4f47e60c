"""3D nodule segmentation workbench on a numpy reverse-mode tensor core.

Layers: ``tensor`` (autodiff engine) -> ``functional`` (stateless 3D ops) ->
``modules``/``blocks`` (layers and the gated/residual building blocks) ->
``network`` (the four-stage encoder/decoder with its variant presets) ->
``losses``/``metrics``/``training`` (protocol) -> ``dataio`` (phantoms,
volumes, manifests, checkpoints) -> ``cli``.
"""

from .blocks import DoubleConv, GatedSkipMiniU, MiniU, MiniUBlock, SqueezeExcite
from .dataio import (
    BadMagicError,
    CheckpointConfigError,
    CheckpointError,
    DatasetManifest,
    ManifestError,
    PhantomSpec,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
    VolumeFormatError,
    VolumeRecord,
    build_manifest,
    generate_phantom,
    load_checkpoint,
    load_manifest,
    load_samples,
    read_volume,
    save_checkpoint,
    save_manifest,
    write_volume,
)
from .gradcheck import GradCheckResult, grad_check, standard_battery
from .losses import LossConfig, ce_loss, combined_loss, dice_loss
from .metrics import ConfusionCounts, argmax_labels, confusion_counts, metrics
from .modules import BatchNorm3d, Buffer, Conv3d, ConvBNReLU, InstanceNorm3d, Linear, Module, Parameter, initialize
from .network import VARIANTS, ConfigError, CSUNet3D, NetworkConfig, build_network
from .runtime import configure_threads
from .tensor import ShapeError, TapeError, Tensor, concat, no_grad
from .training import (
    Adam,
    EarlyStopping,
    SGD,
    TrainConfig,
    cross_validate,
    evaluate,
    fit,
    flip_volume,
    kfold_split,
    make_optimizer,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BadMagicError",
    "BatchNorm3d",
    "Buffer",
    "CheckpointConfigError",
    "CheckpointError",
    "ConfigError",
    "ConfusionCounts",
    "Conv3d",
    "ConvBNReLU",
    "CSUNet3D",
    "DatasetManifest",
    "DoubleConv",
    "EarlyStopping",
    "GatedSkipMiniU",
    "GradCheckResult",
    "InstanceNorm3d",
    "Linear",
    "LossConfig",
    "ManifestError",
    "MiniU",
    "MiniUBlock",
    "Module",
    "NetworkConfig",
    "Parameter",
    "PhantomSpec",
    "SGD",
    "ShapeError",
    "SqueezeExcite",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "TruncatedFileError",
    "UnsupportedDtypeError",
    "UnsupportedVersionError",
    "VARIANTS",
    "VolumeFormatError",
    "VolumeRecord",
    "argmax_labels",
    "build_manifest",
    "build_network",
    "ce_loss",
    "combined_loss",
    "concat",
    "configure_threads",
    "confusion_counts",
    "cross_validate",
    "dice_loss",
    "evaluate",
    "fit",
    "flip_volume",
    "generate_phantom",
    "grad_check",
    "initialize",
    "kfold_split",
    "load_checkpoint",
    "load_manifest",
    "load_samples",
    "make_optimizer",
    "metrics",
    "no_grad",
    "read_volume",
    "save_checkpoint",
    "save_manifest",
    "standard_battery",
    "train_step",
    "write_volume",
]
