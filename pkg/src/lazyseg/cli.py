"""Command-line entry point: ``lazyseg {synth,train,infer,eval,baseline,compare}``.

Every command reads an optional YAML (or JSON) config file, prints the fully
resolved config, and writes a snapshot of it into its output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import yaml

from . import experiment
from .baselines import BASELINE_KINDS, BaselineConfigError, BaselineSpec, RegionGrowConfig
from .data_model import (
    TASKS,
    EncodingError,
    ManifestError,
    ShapeError,
    load_manifest,
    read_image,
    read_label,
    write_label,
)
from .evaluation import EvalConfig, evaluate_dataset, evaluate_predictions, save_report
from .inference import InferenceError, predict_image
from .network import ArchitectureConfig, ConfigError, build_model
from .objective import DegenerateBatchError, LossConfig
from .synthetic import GenerationError
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("lazyseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigKeyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# experiment config

@dataclass(frozen=True)
class BaselineSection:
    kind: str = "single_task_SL"
    pl_generator: str = "region_grow"
    region_grow: RegionGrowConfig = field(default_factory=RegionGrowConfig)

    def __post_init__(self) -> None:
        self.spec()

    def spec(self) -> BaselineSpec:
        return BaselineSpec(self.kind, self.pl_generator, self.region_grow)


@dataclass(frozen=True)
class CompareSection:
    ratios: tuple[float, ...] = (0.05, 0.1, 1.0)
    methods: tuple[str, ...] = experiment.METHODS
    seeds: tuple[int, ...] = (0,)


# Desk-scale defaults: 64x64 training patches from 128x128 synthetic scenes.
DEFAULT_ARCHITECTURE = ArchitectureConfig(input_size=64, levels=5, base_width=16)
DEFAULT_TRAINING = TrainConfig(lr=1e-3, iterations=1200, patch_size=64)
DEFAULT_LOSS = LossConfig(alphas=(1.0, 3.0, 1.0))


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one experiment. ``seed`` drives corpus synthesis, initialisation and sampling."""

    seed: int = 0
    output: str = "runs/experiment"
    architecture: ArchitectureConfig = DEFAULT_ARCHITECTURE
    loss: LossConfig = DEFAULT_LOSS
    training: TrainConfig = DEFAULT_TRAINING
    tiling: EvalConfig = field(default_factory=EvalConfig)
    corpus: experiment.CorpusConfig = field(default_factory=experiment.CorpusConfig)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    compare: CompareSection = field(default_factory=CompareSection)

    def seeded(self) -> "ExperimentConfig":
        """Copy with ``seed`` pushed into the sections that carry their own."""
        return dataclasses.replace(
            self,
            training=dataclasses.replace(self.training, seed=self.seed),
            corpus=dataclasses.replace(self.corpus, seed=self.seed),
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


# seeds inside these sections are set from the top-level seed only
_HIDDEN = {("training", "seed"), ("corpus", "seed")}


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(v: Any) -> Any:
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigKeyError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    section = path.split(".")[-1] if path else ""
    kwargs = {}
    for key, value in data.items():
        if key not in known or (section, key) in _HIDDEN:
            where = f"{path}.{key}" if path else key
            hint = " (set the top-level 'seed' instead)" if (section, key) in _HIDDEN else ""
            raise ConfigKeyError(f"unknown config key {where!r}{hint}; allowed: {sorted(k for k in known if (section, k) not in _HIDDEN)}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}.{key}" if path else key)
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = _tuplify(value)
        else:
            kwargs[key] = value
    try:
        return dataclasses.replace(cls(), **kwargs)
    except (TypeError, ValueError, ConfigError, BaselineConfigError) as exc:
        raise ConfigKeyError(f"{path or 'config'}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config, merge ``overrides`` over it, validate, and return it."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigKeyError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigKeyError(f"{p}: cannot parse config ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigKeyError(f"{p}: top level must be a mapping")
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            if v:
                data[k] = {**(data.get(k) or {}), **v}
        elif v is not None:
            data[k] = v
    cfg = _build(ExperimentConfig, data, "")
    for m in cfg.compare.methods:
        if m not in experiment.METHODS:
            raise ConfigKeyError(f"compare.methods: unknown method {m!r}; choose from {experiment.METHODS}")
    return cfg.seeded()


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for section, key in _HIDDEN:
        d[section].pop(key, None)
    return yaml.safe_dump(d, sort_keys=False)


# ---------------------------------------------------------------------------
# commands

def _prepare(cfg: ExperimentConfig, out: Path) -> None:
    text = dump_config(cfg)
    print(f"# resolved config (seed={cfg.seed})\n{text}", flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(text)
    torch.manual_seed(cfg.seed)


def cmd_synth(cfg: ExperimentConfig, out: Path) -> Path:
    _prepare(cfg, out)
    manifest = experiment.make_corpus(cfg.corpus, out)
    print(f"wrote {manifest.n} images to {out} ({manifest.counts()})")
    return out / "manifest.json"


def cmd_train(cfg: ExperimentConfig, manifest_path: Path, out: Path) -> Path:
    _prepare(cfg, out)
    manifest = load_manifest(manifest_path)
    model = build_model(cfg.architecture, cfg.seed)
    result = train(model, manifest, cfg.training, cfg.loss, out_dir=out)
    ckpt = save_checkpoint(result.model, out / "final", {"train_config": cfg.training.to_dict(), "seed": cfg.seed},
                           result.step)
    print(f"trained {result.step} steps; final loss {result.log[-1]['loss'] if result.log else float('nan'):.4f}; checkpoint {ckpt}")
    return ckpt


def _image_paths(images: Sequence[str] | None, directory: str | None) -> list[Path]:
    paths = [Path(p) for p in images or []]
    if directory:
        d = Path(directory)
        if not d.is_dir():
            raise FileNotFoundError(f"image directory not found: {d}")
        paths += sorted(d.glob("*.png"))
    if not paths:
        raise FileNotFoundError("no input images: pass --image or --dir")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"image not found: {p}")
    return paths


def cmd_infer(cfg: ExperimentConfig, checkpoint: Path, images: list[Path], out: Path, save_probs: bool = False) -> list[Path]:
    _prepare(cfg, out)
    model, _ = load_checkpoint(checkpoint)
    written = []
    for path in images:
        image = read_image(path, path.stem)
        pred = predict_image(model, image, cfg.tiling.patch, cfg.tiling.stride, cfg.tiling.sigma, cfg.tiling.batch_size)
        masks = {"detection": pred.detection, "separation": pred.separation, "segmentation": pred.segmentation}
        for task, mask in masks.items():
            if mask is None:
                continue
            target = out / task / f"{path.stem}.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_label(mask, target)
            written.append(target)
        if save_probs:
            (out / "probabilities").mkdir(exist_ok=True)
            arrays = {t: m.astype(np.float32) for t, m in zip(TASKS, pred.maps) if m is not None}
            np.savez_compressed(out / "probabilities" / f"{path.stem}.npz", **arrays)
    print(f"wrote predictions for {len(images)} image(s) to {out}")
    return written


def cmd_eval(cfg: ExperimentConfig, manifest_path: Path, out: Path, split: str = "test",
             checkpoint: Path | None = None, masks: Path | None = None) -> Path:
    """Score a checkpoint, or a directory of ``<id>.png`` segmentation masks, on a manifest split."""
    _prepare(cfg, out)
    manifest = load_manifest(manifest_path)
    if (checkpoint is None) == (masks is None):
        raise ConfigKeyError("pass exactly one of --checkpoint or --masks")
    if checkpoint is not None:
        model, meta = load_checkpoint(checkpoint)
        report = evaluate_dataset(model, manifest, split, cfg.tiling, metadata={"checkpoint": str(checkpoint)})
    else:
        entries = [e for e in manifest.split(split) if e.labels["segmentation"] is not None]
        if not entries:
            raise ManifestError(f"split {split!r} has no images with segmentation ground truth")
        cs = manifest.class_sets["segmentation"]
        items = []
        for e in entries:
            path = masks / f"{e.id}.png"
            if not path.is_file():
                raise FileNotFoundError(f"mask for {e.id!r} not found: {path}")
            _, labels = manifest.load_entry(e, ("segmentation",))
            items.append({"id": e.id, "pred": read_label(path, cs, "segmentation"), "gt": labels.segmentation,
                          "instances": manifest.load_instances(e)})
        report = evaluate_predictions(items, cs, cfg.tiling.match_radius,
                                      {"split": split, "masks": str(masks), "n_images": len(items)})
    path = save_report(report, out, "report")
    print((out / "report.txt").read_text())
    return path


def cmd_baseline(cfg: ExperimentConfig, manifest_path: Path, out: Path, split: str = "test") -> Path:
    _prepare(cfg, out)
    manifest = load_manifest(manifest_path)
    model, report = experiment.run_method(
        cfg.baseline.kind, manifest, cfg.architecture, cfg.training, cfg.loss, cfg.tiling,
        cfg.baseline.region_grow, cfg.baseline.pl_generator, out_dir=out, eval_split=split,
    )
    path = save_report(report, out, "report")
    print((out / "report.txt").read_text())
    return path


def cmd_compare(cfg: ExperimentConfig, out: Path, manifest_path: Path | None = None) -> dict:
    _prepare(cfg, out)
    manifest = load_manifest(manifest_path) if manifest_path is not None else None
    result = experiment.compare(
        cfg.corpus, cfg.compare.ratios, cfg.compare.methods, cfg.architecture, cfg.training, out,
        seeds=cfg.compare.seeds, loss_cfg=cfg.loss, eval_cfg=cfg.tiling,
        region_grow=cfg.baseline.region_grow, manifest=manifest,
    )
    print(result["table"])
    return result


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides config 'output')")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lazyseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus with lazy labels")

    p = sub.add_parser("train", parents=[common], help="train the multi-task network")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("infer", parents=[common], help="predict masks for whole images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", help="input image (repeatable)")
    p.add_argument("--dir", help="directory of .png images")
    p.add_argument("--stride", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--save-probs", action="store_true", help="also write raw probability maps (.npz)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a mask directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--masks", help="directory of <id>.png segmentation masks")

    p = sub.add_parser("baseline", parents=[common], help="train and evaluate a single-task baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=BASELINE_KINDS)
    p.add_argument("--pl-generator", help="region_grow or external:<dir>")
    p.add_argument("--split", default="test")

    p = sub.add_parser("compare", parents=[common], help="all methods across strong-label ratios")
    p.add_argument("--manifest", help="subsample strong labels of an existing corpus instead of synthesising")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {"seed": args.seed, "output": args.out}
    if args.command == "infer":
        over["tiling"] = {k: v for k, v in {"stride": args.stride, "sigma": args.sigma}.items() if v is not None}
    if args.command == "baseline":
        over["baseline"] = {k: v for k, v in {"kind": args.kind, "pl_generator": args.pl_generator}.items() if v is not None}
    return over


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.output)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, Path(args.manifest), out)
        elif args.command == "infer":
            cmd_infer(cfg, Path(args.checkpoint), _image_paths(args.image, args.dir), out, args.save_probs)
        elif args.command == "eval":
            cmd_eval(cfg, Path(args.manifest), out, args.split,
                     Path(args.checkpoint) if args.checkpoint else None, Path(args.masks) if args.masks else None)
        elif args.command == "baseline":
            cmd_baseline(cfg, Path(args.manifest), out, args.split)
        elif args.command == "compare":
            cmd_compare(cfg, out, Path(args.manifest) if args.manifest else None)
    except (ConfigKeyError, ConfigError, BaselineConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, EncodingError, ShapeError, FileNotFoundError, CheckpointError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, InferenceError, DegenerateBatchError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
