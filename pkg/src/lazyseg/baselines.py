"""Comparison systems: single-task U-net on weak labels, on strong labels, and on pseudo labels."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data_model import (
    TASKS,
    DatasetManifest,
    ImageTensor,
    LazyLabelSet,
    OneHotMask,
    onehot_encode,
    read_label,
)
from .evaluation import EvalConfig, EvaluationReport, evaluate_dataset
from .network import ArchitectureConfig, single_task_variant
from .objective import LossConfig
from .trainer import TrainConfig, train

__all__ = [
    "BASELINE_KINDS",
    "BaselineConfigError",
    "EmptyDetectionWarning",
    "RegionGrowConfig",
    "BaselineSpec",
    "generate_pseudo_labels",
    "baseline_samples",
    "run_baseline",
]

log = logging.getLogger(__name__)

BASELINE_KINDS = ("single_task_WL", "single_task_SL", "pseudo_label")


class BaselineConfigError(ValueError):
    pass


class EmptyDetectionWarning(UserWarning):
    """Pseudo-label generation received a detection mask with no foreground."""


@dataclass(frozen=True)
class RegionGrowConfig:
    gradient_percentile: float = 90.0
    max_radius_ratio: float = 2.0
    smoothing: float = 1.0


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    pl_generator: str = "region_grow"  # or "external:<dir>"
    region_grow: RegionGrowConfig = field(default_factory=RegionGrowConfig)

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise BaselineConfigError(f"unknown baseline kind {self.kind!r}; choose from {BASELINE_KINDS}")
        if not (self.pl_generator == "region_grow" or self.pl_generator.startswith("external:")):
            raise BaselineConfigError(f"pl_generator must be 'region_grow' or 'external:<dir>', got {self.pl_generator!r}")


def _gradient_magnitude(pixels: np.ndarray, sigma: float) -> np.ndarray:
    g = np.zeros(pixels.shape[:2])
    for c in range(pixels.shape[2]):
        g += ndimage.gaussian_gradient_magnitude(pixels[..., c].astype(np.float64), sigma) ** 2
    return np.sqrt(g)


def generate_pseudo_labels(
    image: ImageTensor, detection: OneHotMask, cfg: RegionGrowConfig = RegionGrowConfig()
) -> OneHotMask:
    """Grow every detection region into a full pseudo segmentation mask.

    Seeds (8-connected detection components) grow together by 4-neighbour
    geodesic dilation. Pixels on strong gradient ridges (above the configured
    percentile) are claimed but do not propagate, and a seed stops after
    ``(max_radius_ratio - 1) * sqrt(area / pi)`` rounds. Seed pixels keep
    their class, so the result contains the detection foreground per class.
    """
    if detection.shape != image.shape:
        raise ValueError(f"detection {detection.shape} does not match image {image.shape}")
    det = detection.labels
    H, W = det.shape
    if not (det > 0).any():
        warnings.warn("empty detection mask; pseudo label is all background", EmptyDetectionWarning, stacklevel=2)
        return onehot_encode(np.zeros((H, W), dtype=np.int64), detection.class_set, "segmentation")

    grad = _gradient_magnitude(image.pixels, cfg.smoothing)
    ridge = grad > np.percentile(grad, cfg.gradient_percentile)

    owner = np.zeros((H, W), dtype=np.int32)
    seed_class = [0]
    limits = [0]
    n_seeds = 0
    for c in range(1, detection.num_classes):
        comp, n = ndimage.label(det == c, structure=np.ones((3, 3), bool))
        if n == 0:
            continue
        areas = np.bincount(comp.ravel())[1:]
        owner[comp > 0] = comp[comp > 0] + n_seeds
        seed_class.extend([c] * n)
        limits.extend(((cfg.max_radius_ratio - 1.0) * np.sqrt(areas / np.pi)).tolist())
        n_seeds += n
    seed_class = np.asarray(seed_class)
    limits = np.asarray(limits)

    cross = ndimage.generate_binary_structure(2, 1)
    propagating = owner > 0
    t = 0
    while True:
        t += 1
        active = limits >= t
        active[0] = False
        src = np.where(propagating & active[owner], owner, 0)
        if not src.any():
            break
        cand = ndimage.grey_dilation(src, footprint=cross, mode="constant", cval=0)
        new = (owner == 0) & (cand > 0)
        if not new.any():
            break
        owner[new] = cand[new]
        propagating = propagating | (new & ~ridge)
    return onehot_encode(seed_class[owner], detection.class_set, "segmentation")


def _external_pseudo_label(directory: Path, entry_id: str, class_set) -> OneHotMask:
    path = directory / f"{entry_id}.png"
    if not path.is_file():
        raise BaselineConfigError(f"external pseudo label missing: {path}")
    return read_label(path, class_set, "segmentation")


def baseline_samples(spec: BaselineSpec, manifest: DatasetManifest) -> list[tuple[ImageTensor, LazyLabelSet]]:
    """Training samples for a baseline; each carries only a ``segmentation`` label.

    Task-3 labels are read only for images in I_3.
    """
    train_entries = manifest.split("train")
    k_det, k_seg = TASKS.index("detection"), TASKS.index("segmentation")
    cs = manifest.class_sets["segmentation"]
    samples = []
    if spec.kind == "single_task_SL":
        chosen = [e for e in train_entries if e.membership[k_seg]]
        if not chosen:
            raise BaselineConfigError("single_task_SL needs at least one strongly labelled training image (|I_3| = 0)")
        for e in chosen:
            image, labels = manifest.load_entry(e, ("segmentation",))
            samples.append((image, LazyLabelSet(segmentation=labels.segmentation)))
    elif spec.kind == "single_task_WL":
        chosen = [e for e in train_entries if e.membership[k_det]]
        if not chosen:
            raise BaselineConfigError("single_task_WL needs detection labels (|I_1| = 0)")
        for e in chosen:
            image, labels = manifest.load_entry(e, ("detection",))
            as_seg = OneHotMask(labels.detection.values, cs, "segmentation")
            samples.append((image, LazyLabelSet(segmentation=as_seg)))
    else:
        chosen = [e for e in train_entries if e.membership[k_det] or e.membership[k_seg]]
        if not chosen:
            raise BaselineConfigError("pseudo_label needs detection or segmentation labels")
        external = Path(spec.pl_generator.split(":", 1)[1]) if spec.pl_generator.startswith("external:") else None
        for e in chosen:
            if e.membership[k_seg]:
                image, labels = manifest.load_entry(e, ("segmentation",))
                mask = labels.segmentation
            else:
                image, labels = manifest.load_entry(e, ("detection",))
                if external is not None:
                    mask = _external_pseudo_label(external, e.id, cs)
                else:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", EmptyDetectionWarning)
                        mask = generate_pseudo_labels(image, labels.detection, spec.region_grow)
            samples.append((image, LazyLabelSet(segmentation=mask)))
    return samples


def run_baseline(
    spec: BaselineSpec,
    manifest: DatasetManifest,
    arch: ArchitectureConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    loss_cfg: LossConfig = LossConfig(),
    init_seed: int | None = None,
    out_dir: str | Path | None = None,
    eval_split: str = "test",
) -> tuple[torch.nn.Module, EvaluationReport]:
    """Train the single-task U-net for ``spec`` and evaluate it on ``eval_split``."""
    samples = baseline_samples(spec, manifest)
    model = single_task_variant(arch, train_cfg.seed if init_seed is None else init_seed)
    log.info("baseline %s: %d training images", spec.kind, len(samples))
    result = train(model, samples, train_cfg, loss_cfg, out_dir=out_dir)
    report = evaluate_dataset(
        result.model, manifest, eval_split, eval_cfg,
        metadata={"method": spec.kind, "train_images": len(samples), "seed": train_cfg.seed},
    )
    return result.model, report
