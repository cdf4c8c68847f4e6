"""Multi-task training runs and multi-method comparisons across strong-label ratios."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .baselines import BaselineSpec, RegionGrowConfig, run_baseline
from .data_model import TASKS, DatasetManifest
from .evaluation import EvalConfig, EvaluationReport, evaluate_dataset, format_table, save_report
from .network import ArchitectureConfig, build_model
from .objective import LossConfig
from .synthetic import LabelPolicy, build_corpus, scene_specs
from .trainer import TrainConfig, save_checkpoint, train

__all__ = ["CorpusConfig", "METHODS", "make_corpus", "restrict_strong_labels", "run_multitask", "run_method", "compare", "summarize"]

log = logging.getLogger(__name__)

METHODS = ("multitask", "single_task_WL", "single_task_SL", "pseudo_label")


@dataclass(frozen=True)
class CorpusConfig:
    """Size and label budget of a synthetic corpus."""

    n_train: int = 40
    n_val: int = 0
    n_test: int = 8
    n_detection: int = 30
    n_separation: int = 10
    n_segmentation: int = 2
    height: int = 128
    width: int = 128
    touching_fraction: float = 0.5
    instances_per_class: tuple[tuple[int, int], ...] = ((3, 6), (3, 6))
    radius_range: tuple[float, float] = (6.0, 12.0)
    seam_contrast: float = 0.12
    erosion_radius: float = 3.0
    separation_gap: float = 3.0
    detection_drop: float = 0.0
    separation_drop: float = 0.0
    seed: int = 0


def make_corpus(cfg: CorpusConfig, out_dir: str | Path) -> DatasetManifest:
    n = cfg.n_train + cfg.n_val + cfg.n_test
    specs = scene_specs(n, cfg.seed, height=cfg.height, width=cfg.width, touching_fraction=cfg.touching_fraction,
                        instances_per_class=cfg.instances_per_class, radius_range=cfg.radius_range,
                        seam_contrast=cfg.seam_contrast)
    policy = LabelPolicy(
        n_detection=cfg.n_detection,
        n_separation=cfg.n_separation,
        n_segmentation=cfg.n_segmentation,
        n_val=cfg.n_val,
        n_test=cfg.n_test,
        erosion_radius=cfg.erosion_radius,
        separation_gap=cfg.separation_gap,
        detection_drop=cfg.detection_drop,
        separation_drop=cfg.separation_drop,
        seed=cfg.seed,
    )
    return build_corpus(specs, policy, out_dir)


def restrict_strong_labels(manifest: DatasetManifest, n: int, seed: int = 0) -> DatasetManifest:
    """Keep segmentation labels on ``n`` randomly chosen training images and drop the rest."""
    k = TASKS.index("segmentation")
    strong = [i for i, e in enumerate(manifest.entries) if e.split == "train" and e.membership[k]]
    if n > len(strong):
        raise ValueError(f"asked for {n} strong labels but the training split has only {len(strong)}")
    keep = set(np.random.default_rng(seed).choice(strong, size=n, replace=False).tolist())
    entries = []
    for i, e in enumerate(manifest.entries):
        if i in strong and i not in keep:
            labels = {**e.labels, "segmentation": None}
            e = dataclasses.replace(e, labels=labels, membership=tuple(v is not None for v in labels.values()))
        entries.append(e)
    kept = manifest.with_entries([e for e in entries if any(e.membership) or e.split != "train"])
    return kept


def run_multitask(
    manifest: DatasetManifest,
    arch: ArchitectureConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    init_seed: int | None = None,
    out_dir: str | Path | None = None,
    eval_split: str = "test",
) -> tuple[torch.nn.Module, EvaluationReport]:
    model = build_model(arch, train_cfg.seed if init_seed is None else init_seed)
    result = train(model, manifest, train_cfg, loss_cfg, out_dir=out_dir)
    if out_dir is not None:
        save_checkpoint(result.model, Path(out_dir) / "final", {"train_config": train_cfg.to_dict()}, result.step)
    report = evaluate_dataset(result.model, manifest, eval_split, eval_cfg,
                              metadata={"method": "multitask", "seed": train_cfg.seed})
    return result.model, report


def run_method(
    method: str,
    manifest: DatasetManifest,
    arch: ArchitectureConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    region_grow: RegionGrowConfig = RegionGrowConfig(),
    pl_generator: str = "region_grow",
    out_dir: str | Path | None = None,
    eval_split: str = "test",
) -> tuple[torch.nn.Module, EvaluationReport]:
    if method == "multitask":
        return run_multitask(manifest, arch, train_cfg, loss_cfg, eval_cfg, out_dir=out_dir, eval_split=eval_split)
    spec = BaselineSpec(method, pl_generator, region_grow)
    model, report = run_baseline(spec, manifest, arch, train_cfg, eval_cfg, loss_cfg, out_dir=out_dir,
                                 eval_split=eval_split)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "final", {"train_config": train_cfg.to_dict(), "method": method},
                        train_cfg.iterations)
    return model, report


def summarize(reports: Sequence[EvaluationReport]) -> dict:
    """Mean (over runs) of per-class and overall dice."""
    classes = sorted(reports[0].class_names)
    out = {"overall_dice": float(np.mean([r.overall_dice for r in reports]))}
    for c in classes:
        vals = [r.per_class_dice[c] for r in reports if r.per_class_dice[c] is not None]
        out[f"dice_{reports[0].class_names[c]}"] = float(np.mean(vals)) if vals else None
    rec = [r.touching_recall for r in reports if r.touching_recall is not None]
    out["touching_recall"] = float(np.mean(rec)) if rec else None
    return out


def compare(
    corpus: CorpusConfig,
    ratios: Sequence[float],
    methods: Sequence[str],
    arch: ArchitectureConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    seeds: Sequence[int] = (0,),
    loss_cfg: LossConfig = LossConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    region_grow: RegionGrowConfig = RegionGrowConfig(),
    manifest: DatasetManifest | None = None,
) -> dict:
    """Run every method at every strong-label ratio and seed; write a table and a JSON summary.

    A ratio sets ``n_segmentation = max(1, round(ratio * n_train))``. Without
    ``manifest`` a fresh corpus is synthesised per ratio and seed; with one,
    its strong labels are subsampled to that count instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    tables = []
    for ratio in ratios:
        n_train = corpus.n_train if manifest is None else len(manifest.split("train"))
        n_sl = max(1, int(round(ratio * n_train)))
        per_method: dict[str, list[EvaluationReport]] = {m: [] for m in methods}
        for seed in seeds:
            if manifest is None:
                ccfg = dataclasses.replace(corpus, n_segmentation=n_sl, seed=seed)
                data = make_corpus(ccfg, out / f"corpus_r{ratio:g}_s{seed}")
            else:
                data = restrict_strong_labels(manifest, n_sl, seed)
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            for m in methods:
                run_dir = out / f"r{ratio:g}" / f"s{seed}" / m
                _, rep = run_method(m, data, arch, tcfg, loss_cfg, eval_cfg, region_grow, out_dir=run_dir)
                save_report(rep, run_dir, "report")
                per_method[m].append(rep)
                log.info("ratio %g seed %d %s: overall dice %.3f", ratio, seed, m, rep.overall_dice or float("nan"))
        for m in methods:
            rows.append({"ratio": ratio, "n_segmentation": n_sl, "method": m, "seeds": list(seeds),
                         **summarize(per_method[m])})
        mean_reports = {m: _mean_report(per_method[m]) for m in methods}
        tables.append(format_table(mean_reports, title=f"SL ratio {ratio:.1%} ({n_sl} strong labels), mean of {len(seeds)} seed(s)"))
    (out / "comparison.json").write_text(json.dumps(rows, indent=1))
    (out / "comparison.txt").write_text("\n\n".join(tables) + "\n")
    return {"rows": rows, "table": "\n\n".join(tables)}


def _mean_report(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    first = reports[0]
    per_class = {}
    for c in first.class_names:
        vals = [r.per_class_dice[c] for r in reports if r.per_class_dice[c] is not None]
        per_class[c] = float(np.mean(vals)) if vals else None
    return EvaluationReport(
        class_names=first.class_names,
        per_class_dice=per_class,
        overall_dice=float(np.mean([r.overall_dice for r in reports])),
        pooled_per_class_dice={},
        pooled_overall_dice=None,
    )
