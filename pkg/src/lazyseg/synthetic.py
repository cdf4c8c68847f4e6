"""Synthetic microscopy-like scenes and programmatic lazy-label synthesis.

Scenes contain two foreground classes: dark "bubbles" with a bright rim and
brighter textured "crystals". Touching pairs are separated in the instance
map by a one-pixel background seam that is almost invisible in the image,
so only the labels tell the two instances apart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data_model import (
    DEFAULT_CLASS_SETS,
    DatasetManifest,
    ImageTensor,
    InstanceMap,
    LazyLabelSet,
    ManifestEntry,
    OneHotMask,
    onehot_encode,
    save_manifest,
    validate_lazy_consistency,
    write_image,
    write_instances,
    write_label,
)

__all__ = [
    "GenerationError",
    "SceneSpec",
    "LabelPolicy",
    "InstanceMap",
    "generate_scene",
    "synthesize_detection_label",
    "synthesize_separation_label",
    "touching_pairs",
    "lazy_labels_for_scene",
    "build_corpus",
    "scene_specs",
]

log = logging.getLogger(__name__)

_MARGIN = 4  # min free pixels between non-touching instances


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    instances_per_class: tuple[tuple[int, int], ...] = ((3, 6), (3, 6))
    radius_range: tuple[float, float] = (6.0, 12.0)
    touching_fraction: float = 0.3
    texture_amplitude: float = 0.06
    noise_amplitude: float = 0.04
    contrast_range: tuple[float, float] = (0.6, 1.2)
    background_range: tuple[float, float] = (0.35, 0.6)
    seam_contrast: float = 0.12
    max_attempts: int = 400

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances_per_class", tuple(tuple(int(v) for v in r) for r in self.instances_per_class))
        for name in ("radius_range", "contrast_range", "background_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8x8")
        for lo, hi in self.instances_per_class:
            if lo < 1 or hi < lo:
                raise ValueError(f"instance count range ({lo}, {hi}) must satisfy 1 <= lo <= hi")
        for name in ("radius_range", "contrast_range", "background_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.radius_range[0] < 1:
            raise ValueError("radius_range must start at >= 1")
        if not 0.0 <= self.touching_fraction <= 1.0:
            raise ValueError("touching_fraction must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.instances_per_class)


@dataclass(frozen=True)
class _Ellipse:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated y
    b: float
    theta: float
    cls: int

    @property
    def bound(self) -> float:
        return max(self.a, self.b)

    @property
    def nominal(self) -> float:
        return min(self.a, self.b)

    def rho(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = c * dy + s * dx
        v = -s * dy + c * dx
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)


_SCENE_RESTARTS = 8  # whole-layout restarts before giving up


def _place(spec: SceneSpec, rng: np.random.Generator) -> list[_Ellipse]:
    for _ in range(_SCENE_RESTARTS):
        placed = _place_once(spec, rng)
        if placed is not None:
            return placed
    raise GenerationError(
        f"could not place the instances on a {spec.height}x{spec.width} canvas (seed {spec.seed}); "
        "reduce counts or radii"
    )


def _place_once(spec: SceneSpec, rng: np.random.Generator) -> list[_Ellipse] | None:
    classes = [c + 1 for c, (lo, hi) in enumerate(spec.instances_per_class) for _ in range(rng.integers(lo, hi + 1))]
    rng.shuffle(classes)
    placed: list[_Ellipse] = []
    partners: dict[int, int] = {}
    H, W = spec.height, spec.width

    def fits(e: _Ellipse, skip: int | None = None) -> bool:
        if not (e.bound + 1 <= e.cy <= H - e.bound - 2 and e.bound + 1 <= e.cx <= W - e.bound - 2):
            return False
        for j, o in enumerate(placed):
            if j == skip:
                continue
            if np.hypot(e.cy - o.cy, e.cx - o.cx) < e.bound + o.bound + _MARGIN:
                return False
        return True

    for cls in classes:
        r = rng.uniform(*spec.radius_range)
        elong = rng.uniform(1.0, 1.25)
        theta = rng.uniform(0, np.pi)
        touch = bool(placed) and rng.random() < spec.touching_fraction
        done = False
        if touch:
            for _ in range(spec.max_attempts // 4):
                j = int(rng.integers(len(placed)))
                if partners.get(j, 0) >= 2:
                    continue
                o = placed[j]
                d = (r + o.nominal) * rng.uniform(0.78, 0.92)
                ang = rng.uniform(0, 2 * np.pi)
                e = _Ellipse(o.cy + d * np.sin(ang), o.cx + d * np.cos(ang), r * elong, r, theta, cls)
                # the circumscribed radius can exceed d; require the partner's centre outside the new body
                if e.nominal <= 0 or d <= max(e.nominal, o.nominal) or not fits(e, skip=j):
                    continue
                placed.append(e)
                partners[j] = partners.get(j, 0) + 1
                partners[len(placed) - 1] = 1
                done = True
                break
        if not done:
            for _ in range(spec.max_attempts):
                e = _Ellipse(rng.uniform(0, H), rng.uniform(0, W), r * elong, r, theta, cls)
                if fits(e):
                    placed.append(e)
                    done = True
                    break
        if not done:
            return None
    return placed


def _rasterize(shapes: Sequence[_Ellipse], H: int, W: int) -> np.ndarray:
    ids = np.zeros((H, W), dtype=np.int32)
    best = np.full((H, W), np.inf)
    for k, e in enumerate(shapes, start=1):
        y0, y1 = max(int(e.cy - e.bound) - 1, 0), min(int(e.cy + e.bound) + 2, H)
        x0, x1 = max(int(e.cx - e.bound) - 1, 0), min(int(e.cx + e.bound) + 2, W)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        rho = e.rho(yy.astype(float), xx.astype(float))
        sub_best = best[y0:y1, x0:x1]
        win = (rho <= 1.0) & (rho < sub_best)
        sub_best[win] = rho[win]
        ids[y0:y1, x0:x1][win] = k
    return ids


def _cut_seams(ids: np.ndarray) -> np.ndarray:
    """Drop pixels of the higher id that touch (8-nbhd) a lower nonzero id."""
    padded = np.pad(ids, 1)
    H, W = ids.shape
    drop = np.zeros(ids.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
            drop |= (nb != 0) & (ids != 0) & (nb < ids)
    out = ids.copy()
    out[drop] = 0
    return out


def _render(spec: SceneSpec, full_ids: np.ndarray, ids: np.ndarray, shapes: Sequence[_Ellipse], rng) -> np.ndarray:
    H, W = ids.shape
    contrast = rng.uniform(*spec.contrast_range)
    bg = rng.uniform(*spec.background_range)
    low = ndimage.gaussian_filter(rng.standard_normal((H, W)), 6.0)
    low /= np.abs(low).max() + 1e-12
    img = bg + spec.texture_amplitude * low

    cls_map = np.zeros((H, W), dtype=np.int32)
    for k, e in enumerate(shapes, start=1):
        cls_map[full_ids == k] = e.cls
    fg = full_ids > 0
    dist_out = ndimage.distance_transform_edt(fg)

    bubble = cls_map == 1
    crystal = cls_map == 2
    # bubbles: dark interior with a bright rim against the background
    img = img - 0.14 * contrast * bubble
    rim = bubble & (dist_out <= 2.0)
    img = img + 0.32 * contrast * rim
    # crystals: brighter, finely textured, soft edge
    fine = ndimage.gaussian_filter(rng.standard_normal((H, W)), 1.0)
    fine /= np.abs(fine).max() + 1e-12
    soft = ndimage.gaussian_filter(crystal.astype(float), 0.8)
    img = img + contrast * soft * (0.16 + 1.5 * spec.texture_amplitude * fine)
    # faint seam where touching instances meet
    seam = (full_ids > 0) & (ids == 0)
    img = img - spec.seam_contrast * contrast * seam
    img = ndimage.gaussian_filter(img, 0.6)
    img = img + spec.noise_amplitude * rng.standard_normal((H, W))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec) -> tuple[ImageTensor, InstanceMap]:
    """Render one scene; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    shapes = _place(spec, rng)
    full_ids = _rasterize(shapes, spec.height, spec.width)
    ids = _cut_seams(full_ids)
    class_of = {k: e.cls for k, e in enumerate(shapes, start=1)}
    missing = [k for k in class_of if not (ids == k).any()]
    if missing:
        raise GenerationError(f"instances {missing} vanished during rasterisation (seed {spec.seed})")
    class_set = DEFAULT_CLASS_SETS["segmentation"][: spec.num_classes + 1]
    if len(class_set) < spec.num_classes + 1:
        class_set = ("background",) + tuple(f"class{c}" for c in range(1, spec.num_classes + 1))
    pixels = _render(spec, full_ids, ids, shapes, rng)
    return ImageTensor(pixels, f"scene{spec.seed}"), InstanceMap(ids, class_of, class_set)


def synthesize_detection_label(
    instances: InstanceMap,
    erosion_radius: float,
    drop_fraction: float = 0.0,
    rng: np.random.Generator | None = None,
) -> OneHotMask:
    """Under-segmentation label: each instance eroded by a disk of ``erosion_radius``.

    An instance that would vanish keeps its innermost pixel (largest distance
    to the outside; first in row-major order on ties). ``drop_fraction`` leaves
    a random share of instances unmarked.
    """
    if erosion_radius < 0:
        raise ValueError("erosion_radius must be >= 0")
    ids = instances.ids
    H, W = ids.shape
    out = np.zeros((H, W), dtype=np.int64)
    pad = int(np.ceil(erosion_radius)) + 1
    for k, sl in enumerate(ndimage.find_objects(ids), start=1):
        if sl is None:
            continue
        if drop_fraction > 0 and rng is not None and rng.random() < drop_fraction:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        crop = np.pad(ids[y0:y1, x0:x1] == k, pad)
        # distance to the nearest non-instance pixel; canvas outside counts as outside
        dist = ndimage.distance_transform_edt(crop)
        keep = dist > erosion_radius
        if not keep.any():
            keep = np.zeros_like(keep)
            keep.flat[int(np.argmax(dist))] = True
        keep = keep[pad:-pad, pad:-pad]
        out[y0:y1, x0:x1][keep] = instances.class_of[k]
    return onehot_encode(out, instances.class_set, "detection")


def _near_count(instances: InstanceMap, radius: float, pairs: bool = False):
    """Per-pixel number of distinct instances within ``radius`` (Euclidean)."""
    ids = instances.ids
    H, W = ids.shape
    count = np.zeros((H, W), dtype=np.int32)
    pad = int(np.ceil(radius)) + 1
    cover: dict[int, tuple[slice, slice, np.ndarray]] = {}
    for k, sl in enumerate(ndimage.find_objects(ids), start=1):
        if sl is None:
            continue
        y0, y1 = max(sl[0].start - pad, 0), min(sl[0].stop + pad, H)
        x0, x1 = max(sl[1].start - pad, 0), min(sl[1].stop + pad, W)
        dist = ndimage.distance_transform_edt(ids[y0:y1, x0:x1] != k)
        near = dist <= radius
        count[y0:y1, x0:x1] += near
        if pairs:
            cover[k] = (slice(y0, y1), slice(x0, x1), near)
    return count, cover


def synthesize_separation_label(
    instances: InstanceMap,
    gap: float = 3.0,
    drop_fraction: float = 0.0,
    rng: np.random.Generator | None = None,
) -> OneHotMask:
    """Interface scribbles: pixels within ``gap`` of two or more distinct instances.

    ``drop_fraction`` removes a random share of the touching pairs' interfaces.
    """
    if gap < 1:
        raise ValueError("gap must be >= 1")
    count, cover = _near_count(instances, gap, pairs=drop_fraction > 0)
    positive = count >= 2
    if drop_fraction > 0 and rng is not None and positive.any():
        def full(k: int) -> np.ndarray:
            sy, sx, near = cover[k]
            m = np.zeros_like(positive)
            m[sy, sx] = near
            return m

        for a, b in sorted(touching_pairs(instances, 2 * gap)):
            if rng.random() < drop_fraction:
                positive &= ~(full(a) & full(b))
    return onehot_encode(positive.astype(np.int64), DEFAULT_CLASS_SETS["separation"], "separation")


def touching_pairs(instances: InstanceMap, max_distance: float = 2.0) -> set[tuple[int, int]]:
    """Instance pairs whose pixel sets come within ``max_distance`` of each other."""
    ids = instances.ids
    H, W = ids.shape
    pad = int(np.ceil(max_distance)) + 1
    out: set[tuple[int, int]] = set()
    for k, sl in enumerate(ndimage.find_objects(ids), start=1):
        if sl is None:
            continue
        y0, y1 = max(sl[0].start - pad, 0), min(sl[0].stop + pad, H)
        x0, x1 = max(sl[1].start - pad, 0), min(sl[1].stop + pad, W)
        sub = ids[y0:y1, x0:x1]
        near = ndimage.distance_transform_edt(sub != k) <= max_distance
        for j in np.unique(sub[near]):
            if j != 0 and j != k:
                out.add((min(k, int(j)), max(k, int(j))))
    return out


@dataclass(frozen=True)
class LabelPolicy:
    """How many training images get each label type, plus label synthesis knobs."""

    n_detection: int
    n_separation: int
    n_segmentation: int
    n_val: int = 0
    n_test: int = 0
    erosion_radius: float = 3.0
    separation_gap: float = 3.0
    detection_drop: float = 0.0
    separation_drop: float = 0.0
    seed: int = 0

    def validate(self, n: int) -> None:
        n_train = n - self.n_val - self.n_test
        if n_train < 0 or min(self.n_val, self.n_test) < 0:
            raise ValueError(f"val+test ({self.n_val}+{self.n_test}) exceed corpus size {n}")
        for name in ("n_detection", "n_separation", "n_segmentation"):
            v = getattr(self, name)
            if not 0 <= v <= n_train:
                raise ValueError(f"{name}={v} must lie in [0, n_train={n_train}]")


def lazy_labels_for_scene(
    instances: InstanceMap, tasks: Sequence[str], policy: LabelPolicy, rng: np.random.Generator | None = None
) -> LazyLabelSet:
    masks = {}
    if "detection" in tasks:
        masks["detection"] = synthesize_detection_label(instances, policy.erosion_radius, policy.detection_drop, rng)
    if "separation" in tasks:
        masks["separation"] = synthesize_separation_label(instances, policy.separation_gap, policy.separation_drop, rng)
    if "segmentation" in tasks:
        masks["segmentation"] = instances.segmentation
    return LazyLabelSet(**masks)


def scene_specs(n: int, seed: int = 0, **overrides) -> list[SceneSpec]:
    """``n`` scene specs with distinct seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [SceneSpec(seed=int(s), **overrides) for s in seeds]


def build_corpus(
    specs: Sequence[SceneSpec],
    policy: LabelPolicy,
    out_dir: str | Path,
    validate: bool = True,
) -> DatasetManifest:
    """Generate scenes, synthesise lazy labels per ``policy`` and write a corpus.

    The last ``n_val + n_test`` specs become the val/test splits and carry
    every label plus their instance maps. Training images receive task labels
    through three independent seeded draws of sizes ``n_detection``,
    ``n_separation`` and ``n_segmentation``.
    """
    policy.validate(len(specs))
    out = Path(out_dir)
    for sub in ("images", "labels/task1", "labels/task2", "labels/task3", "labels/instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_train = len(specs) - policy.n_val - policy.n_test
    rng = np.random.default_rng(policy.seed)
    members = [set(), set(), set()]
    for k, cnt in enumerate((policy.n_detection, policy.n_separation, policy.n_segmentation)):
        members[k] = set(rng.permutation(n_train)[:cnt].tolist())
    splits = ["train"] * n_train + ["val"] * policy.n_val + ["test"] * policy.n_test
    label_dirs = {"detection": "labels/task1", "separation": "labels/task2", "segmentation": "labels/task3"}

    entries = []
    for i, spec in enumerate(specs):
        image, instances = generate_scene(spec)
        eid = f"img{i:04d}"
        split = splits[i]
        if split == "train":
            tasks = [t for k, t in enumerate(("detection", "separation", "segmentation")) if i in members[k]]
        else:
            tasks = ["detection", "separation", "segmentation"]
        noise_rng = np.random.default_rng([policy.seed, spec.seed])
        labels = lazy_labels_for_scene(instances, tasks, policy, noise_rng)
        if validate:
            bad = validate_lazy_consistency(labels) if labels.masks() else []
            if bad:
                raise GenerationError(f"{eid}: {len(bad)} label consistency violations, first: {bad[0]}")
        write_image(image, out / "images" / f"{eid}.png")
        paths: dict[str, str | None] = {}
        for t in ("detection", "separation", "segmentation"):
            m = labels.get(t)
            if m is None:
                paths[t] = None
            else:
                rel = f"{label_dirs[t]}/{eid}.png"
                write_label(m, out / rel)
                paths[t] = rel
        inst_rel = None
        if labels.segmentation is not None:
            inst_rel = f"labels/instances/{eid}.png"
            write_instances(instances, out / inst_rel)
        entries.append(
            ManifestEntry(
                id=eid,
                image=f"images/{eid}.png",
                labels=paths,
                membership=labels.membership,
                split=split,
                instances=inst_rel,
                instance_classes=dict(instances.class_of) if inst_rel else None,
            )
        )
    manifest = DatasetManifest(
        tuple(entries),
        dict(DEFAULT_CLASS_SETS),
        out,
        metadata={"generator": "lazyseg.synthetic", "policy": _policy_record(policy), "scene_seeds": [s.seed for s in specs]},
    )
    save_manifest(manifest, out / "manifest.json")
    log.info("wrote corpus of %d images to %s (%s)", len(entries), out, manifest.counts())
    return manifest


def _policy_record(policy: LabelPolicy) -> dict:
    from dataclasses import asdict

    return asdict(policy)
