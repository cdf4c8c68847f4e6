"""Dice scores, interface precision / touching-object recall, and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data_model import DatasetManifest, InstanceMap, OneHotMask
from .inference import count_instances, predict_image

__all__ = [
    "EvalConfig",
    "EvaluationReport",
    "ImageResult",
    "dice_score",
    "true_interfaces",
    "separation_metrics",
    "evaluate_predictions",
    "evaluate_dataset",
    "save_report",
    "load_report",
    "format_table",
]


def dice_score(pred: OneHotMask, gt: OneHotMask, c: int) -> float | None:
    """``2 |x_c & y_c| / (|x_c| + |y_c|)``; ``None`` when neither mask has class ``c``."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not (0 <= c < pred.num_classes and c < gt.num_classes):
        raise ValueError(f"class {c} missing from a class set")
    x = pred.values[..., c].astype(np.int64)
    y = gt.values[..., c].astype(np.int64)
    denom = int(x.sum() + y.sum())
    if denom == 0:
        return None
    return 2.0 * int((x * y).sum()) / denom


def true_interfaces(instances: InstanceMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixels whose 3x3 neighbourhood holds two distinct instance ids.

    Returns the interface mask and, per pixel, the (lowest, highest) id pair seen.
    """
    ids = instances.ids
    big = np.iinfo(np.int32).max
    hi = ndimage.maximum_filter(ids, size=3, mode="constant", cval=0)
    lo = ndimage.minimum_filter(np.where(ids == 0, big, ids), size=3, mode="constant", cval=big)
    iface = (hi != 0) & (lo != big) & (lo != hi)
    return iface, np.where(iface, lo, 0), np.where(iface, hi, 0)


def _distance_to(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def separation_metrics(
    pred_interface: OneHotMask | np.ndarray, instances: InstanceMap, match_radius: float = 3.0
) -> tuple[float | None, float | None, dict]:
    """Interface precision and touching-object recall.

    A predicted interface component (8-connected) is correct when it comes
    within ``match_radius`` of a true interface pixel. A touching pair counts
    as recognised when some predicted pixel lies within ``match_radius`` of
    that pair's interface. Precision is ``None`` without predicted components,
    recall is ``None`` without touching pairs. The third value holds raw counts.
    """
    arr = pred_interface.values if isinstance(pred_interface, OneHotMask) else np.asarray(pred_interface)
    pred = arr[..., 1:].any(axis=-1) if arr.ndim == 3 else arr > 0
    if pred.shape != instances.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {instances.shape}")
    iface, lo, hi = true_interfaces(instances)
    comps, n_comp = ndimage.label(pred, structure=np.ones((3, 3), bool))
    d_iface = _distance_to(iface)
    matched = 0
    if n_comp:
        mins = ndimage.minimum(d_iface, labels=comps, index=np.arange(1, n_comp + 1))
        matched = int((np.asarray(mins) <= match_radius).sum())
    pairs = sorted(set(zip(lo[iface].tolist(), hi[iface].tolist())))
    d_pred = _distance_to(pred)
    found = 0
    for a, b in pairs:
        sel = iface & (lo == a) & (hi == b)
        if d_pred[sel].min() <= match_radius:
            found += 1
    precision = matched / n_comp if n_comp else None
    recall = found / len(pairs) if pairs else None
    return precision, recall, {"components": n_comp, "matched": matched, "pairs": len(pairs), "found": found}


@dataclass(frozen=True)
class EvalConfig:
    patch: int | None = None
    stride: int | None = None
    sigma: float | None = None
    match_radius: float = 3.0
    count_threshold: float = 0.5
    count_min_area: int = 4
    batch_size: int = 8


@dataclass
class ImageResult:
    id: str
    dice: dict[int, float | None]
    overall: float | None
    counts: dict[str, int] = field(default_factory=dict)  # raw pixel tallies for pooled dice
    separation: dict | None = None
    count_error: float | None = None


@dataclass
class EvaluationReport:
    class_names: dict[int, str]
    per_class_dice: dict[int, float | None]
    overall_dice: float | None
    pooled_per_class_dice: dict[int, float | None]
    pooled_overall_dice: float | None
    interface_precision: float | None = None
    touching_recall: float | None = None
    count_error: float | None = None
    null_counts: dict[int, int] = field(default_factory=dict)
    per_image: list[ImageResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = asdict(self)
        for key in ("class_names", "per_class_dice", "pooled_per_class_dice", "null_counts"):
            rec[key] = {str(k): v for k, v in rec[key].items()}
        for img in rec["per_image"]:
            img["dice"] = {str(k): v for k, v in img["dice"].items()}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvaluationReport":
        rec = dict(rec)
        for key in ("class_names", "per_class_dice", "pooled_per_class_dice", "null_counts"):
            rec[key] = {int(k): v for k, v in rec.get(key, {}).items()}
        rec["per_image"] = [
            ImageResult(**{**img, "dice": {int(k): v for k, v in img["dice"].items()}}) for img in rec.get("per_image", [])
        ]
        return cls(**rec)

    def __post_init__(self) -> None:
        scores = [*self.per_class_dice.values(), self.overall_dice, *self.pooled_per_class_dice.values(),
                  self.pooled_overall_dice, self.interface_precision, self.touching_recall]
        for s in scores:
            if s is not None and not 0.0 <= s <= 1.0:
                raise ValueError(f"score {s} outside [0, 1]")


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_predictions(
    items: Sequence[dict],
    class_names: Sequence[str],
    match_radius: float = 3.0,
    metadata: dict | None = None,
) -> EvaluationReport:
    """Aggregate per-image results.

    Each item is a dict with ``id``, ``pred`` and ``gt`` (segmentation
    :class:`OneHotMask`), and optionally ``separation`` (predicted interface
    mask), ``instances`` (:class:`InstanceMap`) and ``counts`` (predicted
    per-class instance counts).
    """
    if not items:
        raise ValueError("nothing to evaluate: empty split")
    fg = list(range(1, len(class_names)))
    per_image: list[ImageResult] = []
    inter = {c: 0 for c in fg}
    total = {c: 0 for c in fg}
    sep_tally = {"components": 0, "matched": 0, "pairs": 0, "found": 0}
    have_sep = False
    count_errs = []
    for it in items:
        pred, gt = it["pred"], it["gt"]
        dice = {c: dice_score(pred, gt, c) for c in fg}
        tallies = {}
        for c in fg:
            x, y = pred.values[..., c].astype(bool), gt.values[..., c].astype(bool)
            inter[c] += int((x & y).sum())
            total[c] += int(x.sum() + y.sum())
            tallies[f"inter_{c}"] = int((x & y).sum())
            tallies[f"total_{c}"] = int(x.sum() + y.sum())
        res = ImageResult(str(it["id"]), dice, _mean(dice.values()), tallies)
        inst = it.get("instances")
        if it.get("separation") is not None and inst is not None:
            p, r, raw = separation_metrics(it["separation"], inst, match_radius)
            res.separation = {"precision": p, "recall": r, **raw}
            for k in sep_tally:
                sep_tally[k] += raw[k]
            have_sep = True
        if it.get("counts") is not None and inst is not None:
            gt_counts = inst.counts()
            res.count_error = float(np.mean([abs(it["counts"].get(c, 0) - gt_counts.get(c, 0)) for c in fg]))
            count_errs.append(res.count_error)
        per_image.append(res)

    per_class = {c: _mean(r.dice[c] for r in per_image) for c in fg}
    pooled = {c: (2.0 * inter[c] / total[c] if total[c] else None) for c in fg}
    nulls = {c: sum(r.dice[c] is None for r in per_image) for c in fg}
    precision = recall = None
    if have_sep:
        precision = sep_tally["matched"] / sep_tally["components"] if sep_tally["components"] else None
        recall = sep_tally["found"] / sep_tally["pairs"] if sep_tally["pairs"] else None
    return EvaluationReport(
        class_names={c: class_names[c] for c in fg},
        per_class_dice=per_class,
        overall_dice=_mean(per_class.values()),
        pooled_per_class_dice=pooled,
        pooled_overall_dice=_mean(pooled.values()),
        interface_precision=precision,
        touching_recall=recall,
        count_error=_mean(count_errs) if count_errs else None,
        null_counts=nulls,
        per_image=per_image,
        metadata={**(metadata or {}), "separation_tally": sep_tally if have_sep else None},
    )


def evaluate_dataset(
    model: torch.nn.Module,
    manifest: DatasetManifest,
    split: str = "test",
    cfg: EvalConfig = EvalConfig(),
    metadata: dict | None = None,
) -> EvaluationReport:
    """Predict every ``split`` image carrying a segmentation label and score it."""
    entries = [e for e in manifest.split(split) if e.labels["segmentation"] is not None]
    if not entries:
        raise ValueError(f"split {split!r} has no images with segmentation ground truth")
    items = []
    for e in entries:
        image, labels = manifest.load_entry(e, ("segmentation",))
        pred = predict_image(model, image, cfg.patch, cfg.stride, cfg.sigma, cfg.batch_size, manifest.class_sets)
        inst = manifest.load_instances(e)
        det = pred.maps[0]
        items.append({
            "id": e.id,
            "pred": pred.segmentation,
            "gt": labels.segmentation,
            "separation": pred.separation,
            "instances": inst,
            "counts": count_instances(det, cfg.count_threshold, cfg.count_min_area) if det is not None else None,
        })
    meta = {"split": split, "n_images": len(items), "label_counts": manifest.counts(), **(metadata or {})}
    return evaluate_predictions(items, manifest.class_sets["segmentation"], cfg.match_radius, meta)


def format_table(rows: dict[str, EvaluationReport], title: str = "Dice scores") -> str:
    """Fixed-width table: one row per method, one column per class plus overall."""
    if not rows:
        return ""
    names = next(iter(rows.values())).class_names
    cols = [names[c] for c in sorted(names)] + ["Overall"]
    w0 = max(12, *(len(k) for k in rows)) + 2
    header = "The models".ljust(w0) + "".join(c.rjust(12) for c in cols)
    lines = [title, "-" * len(header), header, "-" * len(header)]

    def fmt(v):
        return "n/a".rjust(12) if v is None else f"{v:12.3f}"

    for name, rep in rows.items():
        vals = [rep.per_class_dice.get(c) for c in sorted(names)] + [rep.overall_dice]
        lines.append(name.ljust(w0) + "".join(fmt(v) for v in vals))
    lines.append("-" * len(header))
    return "\n".join(lines)


def save_report(report: EvaluationReport, out_dir: str | Path, name: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    path.write_text(json.dumps(report.to_record(), indent=1))
    (out / f"{name}.txt").write_text(format_table({name: report}) + "\n")
    return path


def load_report(path: str | Path) -> EvaluationReport:
    return EvaluationReport.from_record(json.loads(Path(path).read_text()))
