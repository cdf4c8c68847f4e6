"""Multi-task U-net segmentation trained from lazy (mostly weak) labels."""

from .data_model import DEFAULT_CLASS_SETS, TASKS, DatasetManifest, ImageTensor, LazyLabelSet, OneHotMask
from .network import ArchitectureConfig, MultiTaskUNet, SingleTaskUNet, build_model, single_task_variant
from .objective import LossConfig, multitask_loss

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CLASS_SETS",
    "TASKS",
    "DatasetManifest",
    "ImageTensor",
    "LazyLabelSet",
    "OneHotMask",
    "ArchitectureConfig",
    "MultiTaskUNet",
    "SingleTaskUNet",
    "build_model",
    "single_task_variant",
    "LossConfig",
    "multitask_loss",
]
