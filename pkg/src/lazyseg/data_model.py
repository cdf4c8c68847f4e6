"""Images, one-hot masks, lazy label sets, instance maps and dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "TASKS",
    "DEFAULT_CLASS_SETS",
    "SPLITS",
    "EncodingError",
    "ShapeError",
    "ManifestError",
    "ImageTensor",
    "OneHotMask",
    "LazyLabelSet",
    "InstanceMap",
    "ManifestEntry",
    "DatasetManifest",
    "Violation",
    "onehot_encode",
    "validate_lazy_consistency",
    "load_manifest",
    "save_manifest",
    "read_image",
    "write_image",
    "read_label",
    "write_label",
    "read_instances",
    "write_instances",
    "disk",
]

TASKS = ("detection", "separation", "segmentation")
SPLITS = ("train", "val", "test")
# background is always index 0
DEFAULT_CLASS_SETS: dict[str, tuple[str, ...]] = {
    "detection": ("background", "bubble", "crystal"),
    "separation": ("background", "interface"),
    "segmentation": ("background", "bubble", "crystal"),
}

PALETTE = [0, 0, 0, 220, 40, 40, 40, 200, 60, 40, 90, 230, 240, 200, 40, 200, 60, 220, 60, 220, 220, 255, 255, 255]
MANIFEST_FORMAT = "lazyseg-manifest"
MANIFEST_VERSION = 1


class EncodingError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def disk(radius: float) -> np.ndarray:
    """Boolean disk footprint ``{(dy, dx): dy^2 + dx^2 <= radius^2}``."""
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= radius**2


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray  # (H, W, channels), float32 in [0, 1]
    id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"image must be (H, W[, C]) with H, W >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError(f"image {self.id!r}: pixel values must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True, eq=False)
class OneHotMask:
    values: np.ndarray  # (H, W, |C|) uint8
    class_set: tuple[str, ...]
    task: str

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        v = np.asarray(self.values)
        cs = tuple(self.class_set)
        if v.ndim != 3 or v.shape[2] != len(cs):
            raise ShapeError(f"one-hot values must be (H, W, {len(cs)}), got {v.shape}")
        if not np.isin(v, (0, 1)).all() or not (v.sum(axis=2) == 1).all():
            raise EncodingError("one-hot mask must hold exactly one 1 per pixel")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))
        object.__setattr__(self, "class_set", cs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def num_classes(self) -> int:
        return len(self.class_set)

    @property
    def labels(self) -> np.ndarray:
        """Class-index map (argmax along the class axis)."""
        return self.values.argmax(axis=2)

    def channel(self, c: int) -> np.ndarray:
        return self.values[..., c].astype(bool)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OneHotMask):
            return NotImplemented
        return (
            self.task == other.task
            and self.class_set == other.class_set
            and np.array_equal(self.values, other.values)
        )


def onehot_encode(label_map: np.ndarray, class_set: Sequence[str], task: str = "segmentation") -> OneHotMask:
    """Encode an ``(H, W)`` class-index map as a :class:`OneHotMask`."""
    lm = np.asarray(label_map)
    if lm.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {lm.shape}")
    k = len(class_set)
    bad = (lm < 0) | (lm >= k)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise EncodingError(f"class index {lm[r, c]} at pixel ({r}, {c}) is outside [0, {k})")
    values = np.zeros(lm.shape + (k,), dtype=np.uint8)
    np.put_along_axis(values, lm.astype(np.intp)[..., None], 1, axis=2)
    return OneHotMask(values, tuple(class_set), task)


@dataclass(frozen=True)
class LazyLabelSet:
    """The labels available for one image; absence means "not in I_k"."""

    detection: OneHotMask | None = None
    separation: OneHotMask | None = None
    segmentation: OneHotMask | None = None

    def __post_init__(self) -> None:
        shapes = set()
        for task in TASKS:
            m = getattr(self, task)
            if m is None:
                continue
            if m.task != task:
                raise ValueError(f"{task} slot holds a mask for task {m.task!r}")
            shapes.add(m.shape)
        if len(shapes) > 1:
            raise ShapeError(f"label masks disagree on H x W: {sorted(shapes)}")

    @property
    def membership(self) -> tuple[bool, bool, bool]:
        return tuple(getattr(self, t) is not None for t in TASKS)

    @property
    def shape(self) -> tuple[int, int] | None:
        for t in TASKS:
            m = getattr(self, t)
            if m is not None:
                return m.shape
        return None

    def get(self, task: str) -> OneHotMask | None:
        return getattr(self, task)

    def masks(self) -> dict[str, OneHotMask]:
        return {t: getattr(self, t) for t in TASKS if getattr(self, t) is not None}


@dataclass(frozen=True, eq=False)
class InstanceMap:
    ids: np.ndarray  # (H, W) int, 0 = background
    class_of: dict[int, int] = field(default_factory=dict)
    class_set: tuple[str, ...] = DEFAULT_CLASS_SETS["segmentation"]

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ShapeError(f"instance ids must be 2-D, got {ids.shape}")
        cls = {int(k): int(v) for k, v in self.class_of.items()}
        missing = sorted(set(np.unique(ids).tolist()) - {0} - set(cls))
        if missing:
            raise ValueError(f"instances without a class: {missing[:10]}")
        if any(c <= 0 or c >= len(self.class_set) for c in cls.values()):
            raise ValueError("instance classes must be foreground indices of class_set")
        object.__setattr__(self, "ids", _frozen(ids.astype(np.int32)))
        object.__setattr__(self, "class_of", cls)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def instance_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.ids) if i != 0]

    def counts(self) -> dict[int, int]:
        """Number of present instances per foreground class."""
        present = self.instance_ids()
        return {c: sum(self.class_of[i] == c for i in present) for c in range(1, len(self.class_set))}

    def class_map(self) -> np.ndarray:
        lut = np.zeros(int(self.ids.max()) + 1, dtype=np.int64)
        for i, c in self.class_of.items():
            if i < lut.size:
                lut[i] = c
        return lut[self.ids]

    @property
    def segmentation(self) -> OneHotMask:
        return onehot_encode(self.class_map(), self.class_set, "segmentation")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceMap):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and {i: c for i, c in self.class_of.items() if i in set(self.instance_ids())}
            == {i: c for i, c in other.class_of.items() if i in set(other.instance_ids())}
            and self.class_set == other.class_set
        )


class Violation(NamedTuple):
    pixel: tuple[int, int]
    tasks: tuple[str, str]
    rule: str
    message: str


def _segmentation_components(seg: OneHotMask) -> tuple[np.ndarray, int]:
    """8-connected components of every foreground class, with globally distinct ids."""
    lab = seg.labels
    out = np.zeros(lab.shape, dtype=np.int32)
    offset = 0
    for c in range(1, seg.num_classes):
        comp, n = ndimage.label(lab == c, structure=np.ones((3, 3), bool))
        out[comp > 0] = comp[comp > 0] + offset
        offset += n
    return out, offset


def validate_lazy_consistency(labels: LazyLabelSet, r_sep: float = 3.0) -> list[Violation]:
    """Check the subset relations between detection, separation and segmentation.

    Rule ``under_segmentation``: a foreground detection pixel of class c must be
    class c in the segmentation. Rule ``separation_interface``: a separation
    pixel must lie within ``r_sep`` of two distinct segmentation instances
    (8-connected components of one class).
    """
    present = labels.masks()
    if not present:
        raise ValueError("no labels present")
    shapes = {m.shape for m in present.values()}
    if len(shapes) > 1:
        raise ShapeError(f"label masks disagree on H x W: {sorted(shapes)}")
    seg = labels.segmentation
    if seg is None:
        return []
    violations: list[Violation] = []
    seg_lab = seg.labels

    det = labels.detection
    if det is not None:
        det_lab = det.labels
        bad = (det_lab > 0) & (det_lab != seg_lab)
        for r, c in np.argwhere(bad):
            violations.append(
                Violation(
                    (int(r), int(c)),
                    ("detection", "segmentation"),
                    "under_segmentation",
                    f"detection class {det_lab[r, c]} but segmentation class {seg_lab[r, c]}",
                )
            )

    sep = labels.separation
    if sep is not None:
        positive = sep.labels > 0
        if positive.any():
            comps, n = _segmentation_components(seg)
            near = np.zeros(seg_lab.shape, dtype=np.int32)
            fp = disk(r_sep)
            pad = fp.shape[0] // 2
            for sl, k in zip(ndimage.find_objects(comps), range(1, n + 1)):
                if sl is None:
                    continue
                y0, y1 = max(sl[0].start - pad, 0), min(sl[0].stop + pad, near.shape[0])
                x0, x1 = max(sl[1].start - pad, 0), min(sl[1].stop + pad, near.shape[1])
                grown = ndimage.binary_dilation(comps[y0:y1, x0:x1] == k, structure=fp)
                near[y0:y1, x0:x1] += grown
            for r, c in np.argwhere(positive & (near < 2)):
                violations.append(
                    Violation(
                        (int(r), int(c)),
                        ("separation", "segmentation"),
                        "separation_interface",
                        f"separation pixel near {near[r, c]} segmentation instance(s) within r={r_sep}",
                    )
                )
    return violations


# ---------------------------------------------------------------------------
# file IO

def read_image(path: str | Path, image_id: str = "") -> ImageTensor:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        px = arr.astype(np.float32) / 65535.0
    else:
        px = arr.astype(np.float32) / 255.0
    return ImageTensor(px, image_id or Path(path).stem)


def write_image(image: ImageTensor | np.ndarray, path: str | Path) -> None:
    px = image.pixels if isinstance(image, ImageTensor) else np.asarray(image)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[..., 0]
    Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)).save(path)


def write_label(mask: OneHotMask, path: str | Path) -> None:
    im = Image.fromarray(mask.labels.astype(np.uint8), mode="P")
    im.putpalette(PALETTE + [0] * (768 - len(PALETTE)))
    im.save(path)


def read_label(path: str | Path, class_set: Sequence[str], task: str) -> OneHotMask:
    with Image.open(path) as im:
        if im.mode != "P":
            raise ManifestError(f"label file {path} is not an indexed-colour image (mode {im.mode})")
        arr = np.asarray(im)
    return onehot_encode(arr, class_set, task)


def write_instances(inst: InstanceMap, path: str | Path) -> None:
    if inst.ids.max() > 65535:
        raise ValueError("too many instances for a 16-bit instance image")
    Image.fromarray(inst.ids.astype(np.uint16)).save(path)


def read_instances(path: str | Path, class_of: dict[int, int], class_set: Sequence[str]) -> InstanceMap:
    with Image.open(path) as im:
        ids = np.asarray(im).astype(np.int32)
    return InstanceMap(ids, class_of, tuple(class_set))


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    labels: dict[str, str | None]
    membership: tuple[bool, bool, bool]
    split: str = "train"
    instances: str | None = None
    instance_classes: dict[int, int] | None = None

    def __post_init__(self) -> None:
        labels = {t: self.labels.get(t) for t in TASKS}
        extra = set(self.labels) - set(TASKS)
        if extra:
            raise ManifestError(f"entry {self.id!r}: unknown label task(s) {sorted(extra)}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "membership", tuple(bool(b) for b in self.membership))
        if len(self.membership) != 3:
            raise ManifestError(f"entry {self.id!r}: membership needs three flags")
        for t, flag in zip(TASKS, self.membership):
            if flag != (labels[t] is not None):
                raise ManifestError(f"entry {self.id!r}: membership flag for {t} disagrees with label presence")
        if self.split not in SPLITS:
            raise ManifestError(f"entry {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")
        if self.instance_classes is not None:
            object.__setattr__(self, "instance_classes", {int(k): int(v) for k, v in self.instance_classes.items()})

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "image": self.image,
            "labels": dict(self.labels),
            "membership": list(self.membership),
            "split": self.split,
        }
        if self.instances is not None:
            rec["instances"] = self.instances
            rec["instance_classes"] = {str(k): v for k, v in (self.instance_classes or {}).items()}
        return rec


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_sets: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_CLASS_SETS))
    root: Path = Path(".")
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "class_sets", {t: tuple(self.class_sets[t]) for t in TASKS})
        object.__setattr__(self, "root", Path(self.root))
        if not self.entries:
            raise ManifestError("empty manifest")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate entry ids in manifest")

    @property
    def n(self) -> int:
        return len(self.entries)

    def counts(self) -> dict[str, int]:
        out = {"n": self.n}
        for k, t in enumerate(TASKS):
            out[t] = sum(e.membership[k] for e in self.entries)
        return out

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_entry(self, entry: ManifestEntry, tasks: Sequence[str] = TASKS) -> tuple[ImageTensor, LazyLabelSet]:
        """Read an entry's image and the requested subset of its labels."""
        image = read_image(self.resolve(entry.image), entry.id)
        masks = {}
        for t in tasks:
            rel = entry.labels[t]
            if rel is not None:
                masks[t] = read_label(self.resolve(rel), self.class_sets[t], t)
        return image, LazyLabelSet(**masks)

    def load_instances(self, entry: ManifestEntry) -> InstanceMap | None:
        if entry.instances is None:
            return None
        return read_instances(self.resolve(entry.instances), entry.instance_classes or {}, self.class_sets["segmentation"])

    def with_entries(self, entries: Sequence[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(tuple(entries), self.class_sets, self.root, dict(self.metadata))

    def to_record(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "class_sets": {t: list(cs) for t, cs in self.class_sets.items()},
            "metadata": self.metadata,
            "entries": [e.to_record() for e in self.entries],
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_record() == other.to_record()


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_record(), indent=1))


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(rec, dict) or rec.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if rec.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {rec.get('version')!r}")
    try:
        class_sets = {t: tuple(rec["class_sets"][t]) for t in TASKS}
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: class_sets header must declare {TASKS}") from exc
    entries = []
    for i, r in enumerate(rec.get("entries") or []):
        try:
            entries.append(
                ManifestEntry(
                    id=str(r["id"]),
                    image=r["image"],
                    labels=r["labels"],
                    membership=tuple(r["membership"]),
                    split=r.get("split", "train"),
                    instances=r.get("instances"),
                    instance_classes=r.get("instance_classes"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed record #{i}: missing or bad field {exc}") from exc
    if not entries:
        raise ManifestError("empty manifest")
    manifest = DatasetManifest(tuple(entries), class_sets, path.parent, rec.get("metadata") or {})
    if check_files:
        for e in manifest.entries:
            refs = [e.image] + [p for p in e.labels.values() if p is not None]
            if e.instances:
                refs.append(e.instances)
            for rel in refs:
                if not manifest.resolve(rel).is_file():
                    raise ManifestError(f"entry {e.id!r}: dangling path {rel}")
    return manifest
