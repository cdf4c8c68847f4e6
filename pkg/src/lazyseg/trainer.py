"""Augmentation, patch sampling, the Adam training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data_model import TASKS, DatasetManifest, ImageTensor, LazyLabelSet, onehot_encode
from .network import ArchitectureConfig, MultiTaskUNet, SingleTaskUNet, TaskProbabilityMaps
from .objective import LossConfig, collate_labels, multitask_loss

__all__ = [
    "TrainConfig",
    "AugmentationError",
    "TrainingDivergedError",
    "CheckpointError",
    "GeometricTransform",
    "augment",
    "load_samples",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

Sample = tuple[ImageTensor, LazyLabelSet]


class AugmentationError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 4
    iterations: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    patch_size: int = 256
    scale_range: tuple[float, float] = (0.8, 1.2)
    rotation_range: tuple[float, float] = (0.0, 360.0)
    flip: bool = True
    augment: bool = True
    max_attempts: int = 50
    seed: int = 0
    checkpoint_every: int = 0
    validate_every: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        for name in ("betas", "scale_range", "rotation_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class GeometricTransform:
    """Maps a ``patch x patch`` output grid into source-image coordinates.

    Output pixel ``q`` samples the source at ``center + R(angle) F (q - m) / scale``
    with ``m`` the patch midpoint and ``F`` the optional axis flips.
    """

    center: tuple[float, float]
    patch: int
    scale: float = 1.0
    angle: float = 0.0  # degrees
    flip_y: bool = False
    flip_x: bool = False

    def _matrix(self) -> np.ndarray:
        t = math.radians(self.angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        flip = np.diag([-1.0 if self.flip_y else 1.0, -1.0 if self.flip_x else 1.0])
        return rot @ flip / self.scale

    def source_coords(self) -> np.ndarray:
        m = (self.patch - 1) / 2.0
        q = np.mgrid[0 : self.patch, 0 : self.patch].reshape(2, -1).astype(float) - m
        src = self._matrix() @ q + np.asarray(self.center, dtype=float)[:, None]
        return src.reshape(2, self.patch, self.patch)

    def to_patch(self, point: tuple[float, float]) -> np.ndarray:
        """Forward map of a source coordinate into patch coordinates."""
        m = (self.patch - 1) / 2.0
        rel = np.asarray(point, dtype=float) - np.asarray(self.center, dtype=float)
        return np.linalg.solve(self._matrix(), rel) + m

    def apply_image(self, pixels: np.ndarray) -> np.ndarray:
        coords = self.source_coords()
        chans = [
            ndimage.map_coordinates(pixels[..., c].astype(np.float64), coords, order=1, mode="mirror")
            for c in range(pixels.shape[2])
        ]
        return np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(np.float32)

    def apply_labels(self, label_map: np.ndarray) -> np.ndarray:
        coords = self.source_coords()
        # nearest neighbour by explicit rounding + reflection so indices stay exact
        idx = np.rint(coords).astype(np.int64)
        for axis, n in enumerate(label_map.shape):
            idx[axis] = _mirror_index(idx[axis], n)
        return label_map[idx[0], idx[1]]

    def apply(self, image: ImageTensor, labels: LazyLabelSet) -> Sample:
        masks = {}
        for task, m in labels.masks().items():
            masks[task] = onehot_encode(self.apply_labels(m.labels), m.class_set, task)
        return ImageTensor(self.apply_image(image.pixels), image.id), LazyLabelSet(**masks)


def _mirror_index(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def random_transform(shape: tuple[int, int], cfg: TrainConfig, rng: np.random.Generator) -> GeometricTransform:
    H, W = shape
    P = cfg.patch_size
    if not cfg.augment:
        if H < P or W < P:
            raise AugmentationError(f"image {H}x{W} is smaller than patch {P}")
        ty = int(rng.integers(0, H - P + 1))
        tx = int(rng.integers(0, W - P + 1))
        return GeometricTransform((ty + (P - 1) / 2, tx + (P - 1) / 2), P)
    for _ in range(cfg.max_attempts):
        s = float(rng.uniform(*cfg.scale_range))
        if min(H, W) * s >= P:
            break
    else:
        raise AugmentationError(
            f"image {H}x{W} stays smaller than patch {P} after {cfg.max_attempts} scale draws from {cfg.scale_range}"
        )
    angle = float(rng.uniform(*cfg.rotation_range))
    fy = bool(cfg.flip and rng.random() < 0.5)
    fx = bool(cfg.flip and rng.random() < 0.5)
    # crop uniformly over valid positions of the rescaled image
    ty = float(rng.uniform(0, H * s - P))
    tx = float(rng.uniform(0, W * s - P))
    center = ((ty + P / 2) / s - 0.5, (tx + P / 2) / s - 0.5)
    return GeometricTransform(center, P, s, angle, fy, fx)


def augment(image: ImageTensor, labels: LazyLabelSet, rng: np.random.Generator, cfg: TrainConfig = TrainConfig()) -> Sample:
    """Random rescale, rotation, flips and crop, applied identically to image and labels."""
    return random_transform(image.shape, cfg, rng).apply(image, labels)


# ---------------------------------------------------------------------------
# data

def load_samples(manifest: DatasetManifest, split: str = "train", tasks: Sequence[str] = TASKS) -> list[Sample]:
    """Read every labelled entry of ``split``; entries with no requested label are skipped."""
    out = []
    for e in manifest.split(split):
        if not any(e.membership[TASKS.index(t)] for t in tasks):
            continue
        out.append(manifest.load_entry(e, tasks))
    return out


class _Sampler:
    """Epoch-wise shuffled index stream with a serialisable state."""

    def __init__(self, n: int, seed: int) -> None:
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.perm[self.pos]))
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def restore(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.perm = np.asarray(st["perm"], dtype=np.int64)
        self.pos = int(st["pos"])


def _predict(model: torch.nn.Module, x: torch.Tensor):
    out = model(x)
    if isinstance(out, tuple):
        return TaskProbabilityMaps.from_logits(out)
    p = torch.softmax(out, dim=1).permute(0, 2, 3, 1)
    return (None, None, p)


def _num_classes(model: torch.nn.Module) -> tuple[int, int, int]:
    cfg = model.config
    if isinstance(model, SingleTaskUNet):
        c = model.head.out_channels
        return (cfg.num_classes[0], cfg.num_classes[1], c)
    return cfg.num_classes


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list[dict] = field(default_factory=list)
    step: int = 0


def train(
    model: torch.nn.Module,
    data: DatasetManifest | Sequence[Sample],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    validate: Callable[[torch.nn.Module], dict] | None = None,
) -> TrainResult:
    """Minimise the masked multi-task loss with Adam over augmented patch batches.

    ``data`` is a manifest (its train split is read) or in-memory samples.
    Single-task models only receive the ``segmentation`` slot of each sample.
    With ``out_dir`` set, a ``train_log.jsonl`` and periodic checkpoints are
    written there. ``validate(model)`` is called every ``validate_every`` steps.
    """
    samples = load_samples(data) if isinstance(data, DatasetManifest) else list(data)
    if isinstance(model, SingleTaskUNet):
        samples = [(im, LazyLabelSet(segmentation=ls.segmentation)) for im, ls in samples if ls.segmentation is not None]
    samples = [s for s in samples if any(s[1].membership)]
    if not samples:
        raise ValueError("no labelled training images")
    if cfg.patch_size % (2 ** (model.config.levels - 1)):
        raise ValueError(f"patch size {cfg.patch_size} is not divisible by 2**(levels-1)")

    param = next(model.parameters())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    sampler = _Sampler(len(samples), cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    history: list[dict] = []
    if resume_from is not None:
        state = _load_training_state(resume_from, model, opt)
        sampler.restore(state["sampler"])
        aug_rng.bit_generator.state = state["aug_rng"]
        step = int(state["step"])

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")
    ncls = _num_classes(model)
    try:
        while step < cfg.iterations:
            batch = [samples[i] for i in sampler.take(cfg.batch_size)]
            patches = [augment(im, ls, aug_rng, cfg) for im, ls in batch]
            x = torch.from_numpy(np.stack([p[0].pixels for p in patches])).permute(0, 3, 1, 2).to(param.dtype)
            lb = collate_labels([p[1] for p in patches], ncls, (cfg.patch_size, cfg.patch_size), dtype=param.dtype)
            model.train()
            opt.zero_grad(set_to_none=True)
            preds = _predict(model, x)
            loss, comps = multitask_loss(preds, lb, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step + 1}: "
                    + ", ".join(f"{k}={v.item():.4g}" for k, v in comps.items())
                )
            loss.backward()
            opt.step()
            step += 1
            rec = {"step": step, "loss": loss.item(), **{k: v.item() for k, v in comps.items()}}
            if validate is not None and cfg.validate_every and step % cfg.validate_every == 0:
                rec.update(validate(model))
            history.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f", step, rec["loss"])
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save_training_state(out / "checkpoints" / f"step_{step:06d}", model, opt, sampler, aug_rng, step, cfg, rec)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return TrainResult(model, history, step)


# ---------------------------------------------------------------------------
# checkpoints

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _model_record(model: torch.nn.Module) -> dict:
    kind = "single_task" if isinstance(model, SingleTaskUNet) else "multitask"
    rec = {"kind": kind, "architecture": model.config.to_dict()}
    if kind == "single_task":
        rec["head_classes"] = model.head.out_channels
    rec["dtype"] = str(next(model.parameters()).dtype).replace("torch.", "")
    return rec


def save_checkpoint(model: torch.nn.Module, path: str | Path, metadata: dict | None = None, step: int = 0) -> Path:
    """Write ``metadata.json`` and ``weights.pt`` into the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rec = _model_record(model)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        **rec,
        "step": int(step),
        "config_hash": config_hash(rec["architecture"]),
        **(metadata or {}),
    }
    torch.save(model.state_dict(), path / "weights.pt")
    (path / "metadata.json").write_text(json.dumps(meta, indent=1))
    return path


def read_checkpoint_metadata(path: str | Path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / "metadata.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint metadata in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')!r} does not match supported {CHECKPOINT_VERSION}"
        )
    return meta


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, metadata)`` in eval mode."""
    path = Path(path)
    meta = read_checkpoint_metadata(path)
    arch = ArchitectureConfig.from_dict(meta["architecture"])
    if meta["kind"] == "single_task":
        model: torch.nn.Module = SingleTaskUNet(arch, meta.get("head_classes"))
    elif meta["kind"] == "multitask":
        model = MultiTaskUNet(arch)
    else:
        raise CheckpointError(f"unknown model kind {meta['kind']!r}")
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    try:
        state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing weight blob in {path}") from exc
    except Exception as exc:  # torch raises several types for damaged files
        raise CheckpointError(f"corrupt weight blob in {path}: {exc}") from exc
    model.eval()
    return model, meta


def _save_training_state(path, model, opt, sampler, aug_rng, step, cfg: TrainConfig, rec: dict) -> None:
    meta = {
        "train_config": cfg.to_dict(),
        "metrics": rec,
        "sampler": sampler.state(),
        "aug_rng": aug_rng.bit_generator.state,
    }
    save_checkpoint(model, path, meta, step)
    torch.save(opt.state_dict(), Path(path) / "optimizer.pt")


def _load_training_state(path, model, opt) -> dict:
    loaded, meta = load_checkpoint(path)
    model.load_state_dict(loaded.state_dict())
    opt_path = Path(path) / "optimizer.pt"
    if not opt_path.is_file():
        raise CheckpointError(f"{path} has no optimizer state; cannot resume")
    opt.load_state_dict(torch.load(opt_path, map_location="cpu", weights_only=True))
    if "sampler" not in meta or "aug_rng" not in meta:
        raise CheckpointError(f"{path} has no data-sampler state; cannot resume")
    return meta
