"""Whole-image prediction by overlapping patches blended with a Gaussian window."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data_model import DEFAULT_CLASS_SETS, ImageTensor, OneHotMask, onehot_encode

__all__ = [
    "CoverageError",
    "InferenceError",
    "TilingPlan",
    "Prediction",
    "plan_tiles",
    "gaussian_weight",
    "aggregate",
    "decode",
    "predict_image",
    "count_instances",
]


class CoverageError(ValueError):
    pass


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TilingPlan:
    patch: int
    stride: int
    height: int  # original image size
    width: int
    padded: tuple[int, int]
    offsets: tuple[tuple[int, int], ...]

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.padded, dtype=np.int32)
        for y, x in self.offsets:
            cov[y : y + self.patch, x : x + self.patch] += 1
        return cov[: self.height, : self.width]


def _axis_offsets(length: int, patch: int, stride: int) -> list[int]:
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] + patch < length:
        offs.append(length - patch)
    return offs


def plan_tiles(height: int, width: int, patch: int = 256, stride: int | None = None) -> TilingPlan:
    """Patch offsets covering an image; images smaller than ``patch`` are padded up to it."""
    stride = stride or patch // 2
    if stride < 1 or patch < 1:
        raise ValueError("patch and stride must be positive")
    ph, pw = max(height, patch), max(width, patch)
    offsets = tuple((y, x) for y in _axis_offsets(ph, patch, stride) for x in _axis_offsets(pw, patch, stride))
    return TilingPlan(patch, stride, height, width, (ph, pw), offsets)


def gaussian_weight(patch: int, sigma: float | None = None) -> np.ndarray:
    """Isotropic Gaussian on a ``patch x patch`` grid, peak 1, centred on the grid midpoint.

    For odd sizes the centre pixel is the unique maximum; for even sizes the
    four central pixels share it.
    """
    sigma = patch / 4 if sigma is None else sigma
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    m = (patch - 1) / 2.0
    r = np.arange(patch) - m
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.max()


def aggregate(
    patch_maps: Sequence[Sequence[np.ndarray]],
    plan: TilingPlan,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, ...]:
    """Weighted average ``sum w p / sum w`` of per-patch maps, cropped to the image.

    ``patch_maps[j]`` holds one channel-last ``(P, P, C_k)`` array per task for
    the patch at ``plan.offsets[j]``. Pixels covered by a single patch take
    that patch's value unchanged.
    """
    if len(patch_maps) != len(plan.offsets):
        raise ValueError(f"{len(patch_maps)} patch maps for {len(plan.offsets)} planned patches")
    P = plan.patch
    w = gaussian_weight(P) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (P, P):
        raise ValueError(f"weights must be {P}x{P}")
    n_tasks = len(patch_maps[0])
    wsum = np.zeros(plan.padded)
    count = np.zeros(plan.padded, dtype=np.int32)
    accs, firsts = [], []
    for k in range(n_tasks):
        c = np.asarray(patch_maps[0][k]).shape[-1]
        accs.append(np.zeros(plan.padded + (c,)))
        firsts.append(np.zeros(plan.padded + (c,)))
    for maps, (y, x) in zip(patch_maps, plan.offsets):
        sl = (slice(y, y + P), slice(x, x + P))
        new = count[sl] == 0
        for k in range(n_tasks):
            p = np.asarray(maps[k], dtype=np.float64)
            if p.shape[:2] != (P, P):
                raise ValueError(f"patch map of shape {p.shape} does not match patch size {P}")
            accs[k][sl] += w[..., None] * p
            firsts[k][sl][new] = p[new]
        wsum[sl] += w
        count[sl] += 1
    H, W = plan.height, plan.width
    if (count[:H, :W] == 0).any():
        r, c = np.argwhere(count[:H, :W] == 0)[0]
        raise CoverageError(f"pixel ({r}, {c}) is not covered by any patch")
    single = (count == 1)[..., None]
    out = []
    for k in range(n_tasks):
        avg = accs[k] / np.where(wsum > 0, wsum, 1.0)[..., None]
        out.append(np.where(single, firsts[k], avg)[:H, :W])
    return tuple(out)


class Prediction(NamedTuple):
    """Aggregated probability maps (``None`` for tasks the model lacks) and argmax masks."""

    maps: tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]
    segmentation: OneHotMask
    separation: OneHotMask | None
    detection: OneHotMask | None


def decode(prob: np.ndarray, class_set: Sequence[str], task: str) -> OneHotMask:
    """Per-pixel argmax; ties go to the lowest class index."""
    return onehot_encode(np.argmax(prob, axis=-1), class_set, task)


@torch.no_grad()
def _forward_patches(model: torch.nn.Module, patches: np.ndarray, batch_size: int) -> list[tuple[np.ndarray, ...]]:
    dtype = next(model.parameters()).dtype
    outs: list[tuple[np.ndarray, ...]] = []
    model.eval()
    for i in range(0, len(patches), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(patches[i : i + batch_size])).permute(0, 3, 1, 2).to(dtype).clone(memory_format=torch.contiguous_format)
        logits = model(x)
        if not isinstance(logits, tuple):
            logits = (logits,)
        probs = [torch.softmax(t, dim=1).permute(0, 2, 3, 1).double().numpy() for t in logits]
        for p in probs:
            if not np.isfinite(p).all():
                raise InferenceError("network produced non-finite probabilities")
        outs.extend(tuple(p[b] for p in probs) for b in range(probs[0].shape[0]))
    return outs


def predict_image(
    model: torch.nn.Module,
    image: ImageTensor | np.ndarray,
    patch: int | None = None,
    stride: int | None = None,
    sigma: float | None = None,
    batch_size: int = 8,
    class_sets: dict[str, Sequence[str]] | None = None,
) -> Prediction:
    """Tile, forward every patch in eval mode, blend, and decode masks."""
    px = image.pixels if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float32)
    if px.ndim == 2:
        px = px[..., None]
    patch = patch or model.config.input_size
    H, W = px.shape[:2]
    plan = plan_tiles(H, W, patch, stride)
    ph, pw = plan.padded
    if (ph, pw) != (H, W):
        px = np.pad(px, ((0, ph - H), (0, pw - W), (0, 0)), mode="reflect" if min(H, W) > 1 else "edge")
    tiles = np.stack([px[y : y + patch, x : x + patch] for y, x in plan.offsets])
    per_patch = _forward_patches(model, tiles, batch_size)
    maps = aggregate(per_patch, plan, gaussian_weight(patch, sigma))
    cs = dict(DEFAULT_CLASS_SETS)
    if class_sets:
        cs.update({k: tuple(v) for k, v in class_sets.items()})
    if len(maps) == 1:
        seg = maps[0]
        return Prediction((None, None, seg), decode(seg, _fit(cs["segmentation"], seg), "segmentation"), None, None)
    det, sep, seg = maps
    return Prediction(
        (det, sep, seg),
        decode(seg, _fit(cs["segmentation"], seg), "segmentation"),
        decode(sep, _fit(cs["separation"], sep), "separation"),
        decode(det, _fit(cs["detection"], det), "detection"),
    )


def _fit(class_set: Sequence[str], prob: np.ndarray) -> tuple[str, ...]:
    c = prob.shape[-1]
    if len(class_set) == c:
        return tuple(class_set)
    return ("background",) + tuple(f"class{i}" for i in range(1, c))


def count_instances(detection: np.ndarray, threshold: float = 0.5, min_area: int = 1) -> dict[int, int]:
    """Connected components (8-connectivity) of ``P(c) > threshold`` per foreground class."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    prob = np.asarray(detection)
    structure = np.ones((3, 3), dtype=bool)
    counts = {}
    for c in range(1, prob.shape[-1]):
        comp, n = ndimage.label(prob[..., c] > threshold, structure=structure)
        if n == 0:
            counts[c] = 0
            continue
        areas = np.bincount(comp.ravel())[1:]
        counts[c] = int((areas >= min_area).sum())
    return counts
