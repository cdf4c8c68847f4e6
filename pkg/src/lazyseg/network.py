"""Multi-task U-net: shared contracting path, multi-task expansive blocks, softmax heads.

Every expansive step of the multi-task blocks runs three paths:

* detection ``x`` and segmentation ``z`` share one decoder sub-block ``F_W``;
* segmentation adds a residual sub-block on top of the shared output;
* separation ``y`` has its own decoder whose skip features come from ``z``.

Internally tensors are NCHW; the public probability maps are channel-last
``(B, H, W, C)`` to line up with :class:`lazyseg.data_model.OneHotMask`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ArchitectureConfig",
    "BlockActivations",
    "ConfigError",
    "ConvSubBlock",
    "DecoderStep",
    "MultiTaskBlock",
    "MultiTaskUNet",
    "SingleTaskUNet",
    "TaskProbabilityMaps",
    "build_model",
    "forward",
    "multitask_block_forward",
    "single_task_variant",
]


class ConfigError(ValueError):
    """Invalid architecture configuration."""


@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int = 256
    levels: int = 6
    base_width: int = 32
    growth: int = 2
    max_width: int = 512
    leaky_slope: float = 0.01
    num_multitask_blocks: int = 4
    in_channels: int = 1
    num_classes: tuple[int, int, int] = (3, 2, 3)
    share_heads: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "num_classes", tuple(int(c) for c in self.num_classes))
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.input_size < 1 or self.input_size % (2 ** (self.levels - 1)):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**(levels-1) = {2 ** (self.levels - 1)}"
            )
        if min(self.base_width, self.growth, self.max_width, self.in_channels) < 1:
            raise ConfigError("widths, growth and in_channels must be >= 1")
        if len(self.num_classes) != 3 or min(self.num_classes) < 1:
            raise ConfigError(f"num_classes must be three counts >= 1, got {self.num_classes}")
        if not 0 <= self.num_multitask_blocks <= self.levels - 1:
            raise ConfigError(
                f"num_multitask_blocks must lie in [0, levels-1={self.levels - 1}], got {self.num_multitask_blocks}"
            )
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be non-negative")

    def widths(self) -> list[int]:
        return [min(self.base_width * self.growth**i, self.max_width) for i in range(self.levels)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["num_classes"] = list(self.num_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


class TaskProbabilityMaps(NamedTuple):
    """Per-pixel class distributions, channel-last ``(B, H, W, |C_k|)``."""

    detection: torch.Tensor
    separation: torch.Tensor
    segmentation: torch.Tensor

    @classmethod
    def from_logits(cls, logits: tuple[torch.Tensor, ...]) -> "TaskProbabilityMaps":
        return cls(*(torch.softmax(t, dim=1).permute(0, 2, 3, 1) for t in logits))


@dataclass
class BlockActivations:
    """Inputs/outputs of one multi-task block (NCHW tensors)."""

    x: torch.Tensor  # detection path
    z: torch.Tensor  # segmentation path
    y: torch.Tensor  # separation path
    c: torch.Tensor | None = None  # encoder skip for the next step


class ConvSubBlock(nn.Sequential):
    """3x3 same-padded conv -> batch norm -> leaky ReLU."""

    def __init__(self, in_ch: int, out_ch: int, slope: float) -> None:
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(slope),
        )


def _double(in_ch: int, out_ch: int, slope: float) -> nn.Sequential:
    return nn.Sequential(ConvSubBlock(in_ch, out_ch, slope), ConvSubBlock(out_ch, out_ch, slope))


def _upsample(t: torch.Tensor) -> torch.Tensor:
    return F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)


class DecoderStep(nn.Module):
    """``F_W(h, c)``: bilinear 2x upsample, concat with skip ``c``, two conv sub-blocks."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, slope: float) -> None:
        super().__init__()
        self.convs = _double(in_ch + skip_ch, out_ch, slope)

    def forward(self, h: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        up = _upsample(h)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"skip shape {tuple(skip.shape[-2:])} does not match upsampled {tuple(up.shape[-2:])}")
        return self.convs(torch.cat([up, skip], dim=1))


class MultiTaskBlock(nn.Module):
    """One expansive multi-task block.

    ``shared`` holds W_l, ``residual`` holds W_{l+1/2} and ``separation``
    holds the separation-only weights.
    """

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, sep_in_ch: int, slope: float) -> None:
        super().__init__()
        self.shared = DecoderStep(in_ch, skip_ch, out_ch, slope)
        self.residual = _double(out_ch, out_ch, slope)
        self.separation = DecoderStep(sep_in_ch, out_ch, out_ch, slope)

    def forward(self, acts: BlockActivations) -> BlockActivations:
        if acts.c is None:
            raise ValueError("multi-task block needs encoder skip features c")
        if acts.x.shape != acts.z.shape:
            raise ValueError(f"detection/segmentation shapes differ: {tuple(acts.x.shape)} vs {tuple(acts.z.shape)}")
        x_next = self.shared(acts.x, acts.c)
        z_half = self.shared(acts.z, acts.c)
        z_next = z_half + self.residual(z_half)
        y_next = self.separation(acts.y, z_next)
        return BlockActivations(x=x_next, z=z_next, y=y_next)


def multitask_block_forward(acts: BlockActivations, block: MultiTaskBlock) -> BlockActivations:
    return block(acts)


class _Encoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig) -> None:
        super().__init__()
        widths = cfg.widths()
        chans = [cfg.in_channels] + widths
        self.stages = nn.ModuleList(_double(chans[i], chans[i + 1], cfg.leaky_slope) for i in range(cfg.levels))

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = img
        for i, stage in enumerate(self.stages):
            if i:
                h = F.max_pool2d(h, 2)
            h = stage(h)
            feats.append(h)
        return feats


def _init_weights(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class _UNetBase(nn.Module):
    config: ArchitectureConfig

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_input(self, img: torch.Tensor) -> None:
        if img.ndim != 4 or img.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(img.shape)}")
        div = 2 ** (self.config.levels - 1)
        if img.shape[-1] % div or img.shape[-2] % div:
            raise ValueError(f"spatial size {tuple(img.shape[-2:])} not divisible by {div}")


class MultiTaskUNet(_UNetBase):
    """Shared encoder, optional plain decoder steps, then multi-task blocks and three heads.

    ``forward`` returns logits ``(detection, separation, segmentation)`` in NCHW.
    """

    def __init__(self, cfg: ArchitectureConfig) -> None:
        super().__init__()
        self.config = cfg
        w = cfg.widths()
        slope = cfg.leaky_slope
        self.encoder = _Encoder(cfg)
        n_steps = cfg.levels - 1
        n_plain = n_steps - cfg.num_multitask_blocks
        # decoder step j lands on level L-2-j
        self.plain = nn.ModuleList(
            DecoderStep(w[n_steps - j], w[n_steps - j - 1], w[n_steps - j - 1], slope) for j in range(n_plain)
        )
        entry = n_steps - n_plain  # level index of the tensor entering the first block
        self.sep_stem = nn.Sequential(
            nn.Conv2d(w[entry], w[entry], 1, bias=False), nn.BatchNorm2d(w[entry]), nn.LeakyReLU(slope)
        )
        blocks = []
        for j in range(n_plain, n_steps):
            lvl_in, lvl_out = n_steps - j, n_steps - j - 1
            blocks.append(MultiTaskBlock(w[lvl_in], w[lvl_out], w[lvl_out], w[lvl_in], slope))
        self.blocks = nn.ModuleList(blocks)
        c1, c2, c3 = cfg.num_classes
        self.head_detection = nn.Conv2d(w[0], c1, 1)
        self.head_separation = nn.Conv2d(w[0], c2, 1)
        if cfg.share_heads and c1 == c3:
            self.head_segmentation = self.head_detection
        else:
            self.head_segmentation = nn.Conv2d(w[0], c3, 1)
        _init_weights(self, slope)

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        self._check_input(img)
        feats = self.encoder(img)
        skips = feats[:-1][::-1]  # deepest skip first
        h = feats[-1]
        for step, c in zip(self.plain, skips):
            h = step(h, c)
        acts = BlockActivations(x=h, z=h, y=self.sep_stem(h))
        for block, c in zip(self.blocks, skips[len(self.plain):]):
            acts.c = c
            acts = block(acts)
        return (
            self.head_detection(acts.x),
            self.head_separation(acts.y),
            self.head_segmentation(acts.z),
        )

    def parameter_groups(self) -> dict[str, list[str]]:
        """Canonical parameter names grouped by role (shared / residual / separation / ...)."""
        groups: dict[str, list[str]] = {"encoder": [], "plain": [], "shared": [], "residual": [],
                                        "separation": [], "heads": []}
        for name, _ in self.named_parameters():
            if name.startswith("encoder."):
                groups["encoder"].append(name)
            elif name.startswith("plain."):
                groups["plain"].append(name)
            elif name.startswith("sep_stem.") or ".separation." in name or name.startswith("head_separation"):
                groups["separation"].append(name)
            elif ".shared." in name:
                groups["shared"].append(name)
            elif ".residual." in name:
                groups["residual"].append(name)
            else:
                groups["heads"].append(name)
        return groups


class SingleTaskUNet(_UNetBase):
    """Plain U-net with one softmax head (no multi-task blocks)."""

    def __init__(self, cfg: ArchitectureConfig, num_classes: int | None = None) -> None:
        super().__init__()
        self.config = cfg
        w = cfg.widths()
        n_steps = cfg.levels - 1
        self.encoder = _Encoder(cfg)
        self.decoder = nn.ModuleList(
            DecoderStep(w[n_steps - j], w[n_steps - j - 1], w[n_steps - j - 1], cfg.leaky_slope)
            for j in range(n_steps)
        )
        self.head = nn.Conv2d(w[0], num_classes or cfg.num_classes[2], 1)
        _init_weights(self, cfg.leaky_slope)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self._check_input(img)
        feats = self.encoder(img)
        h = feats[-1]
        for step, c in zip(self.decoder, feats[:-1][::-1]):
            h = step(h, c)
        return self.head(h)


def _seeded_build(factory, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_model(cfg: ArchitectureConfig, seed: int = 0) -> MultiTaskUNet:
    """Deterministically initialised multi-task U-net."""
    return _seeded_build(lambda: MultiTaskUNet(cfg), seed)


def single_task_variant(cfg: ArchitectureConfig, seed: int = 0, num_classes: int | None = None) -> SingleTaskUNet:
    return _seeded_build(lambda: SingleTaskUNet(cfg, num_classes), seed)


def to_tensor_batch(images, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Stack ``ImageTensor``s, ``(H, W[, C])`` arrays or a channel-last batch into an NCHW tensor."""
    if isinstance(images, torch.Tensor):
        t = images
        if t.ndim == 3:
            t = t.unsqueeze(-1)
        t = t.permute(0, 3, 1, 2)
        return t.to(dtype) if dtype is not None else t
    arrs = []
    for im in images:
        px = getattr(im, "pixels", im)
        px = torch.as_tensor(px)
        if px.ndim == 2:
            px = px.unsqueeze(-1)
        arrs.append(px.permute(2, 0, 1))
    t = torch.stack(arrs)
    return t.to(dtype or torch.get_default_dtype())


def forward(model: nn.Module, images, mode: str = "eval"):
    """Run the network and return softmax maps (channel-last).

    Multi-task models give :class:`TaskProbabilityMaps`; single-task models a
    single ``(B, H, W, C)`` tensor.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    param = next(model.parameters())
    batch = to_tensor_batch(images, dtype=param.dtype)
    size = model.config.input_size
    if batch.shape[-2:] != (size, size):
        raise ValueError(f"expected {size}x{size} input, got {tuple(batch.shape[-2:])}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            out = model(batch)
    else:
        out = model(batch)
    if isinstance(out, tuple):
        return TaskProbabilityMaps.from_logits(out)
    return torch.softmax(out, dim=1).permute(0, 2, 3, 1)
