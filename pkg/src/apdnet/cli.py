"""Command-line interface: phantom generation, training, evaluation, sweeps,
and reconstruction visualizations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch
import yaml

from .bench.baselines import BASELINE_METHODS, load_baseline_predictor, run_baseline
from .bench.evaluation import APDNetPredictor, evaluate_on_volumes
from .bench.sweep import ABLATION_FLAGS, BenchmarkSuite, run_sweep
from .bench.visuals import emit_visuals
from .config import ExperimentConfig, config_hash, dataclass_from_mapping, load_config
from .networks import load_checkpoint
from .phantom import (
    DatasetSplit,
    PhantomConfig,
    apply_split,
    generate_phantom,
    load_dataset,
    make_split,
    serialize_dataset,
)
from .training import run_training

log = logging.getLogger("apdnet")


def _add_phantom(sub) -> None:
    p = sub.add_parser("phantom", help="synthetic dataset commands")
    psub = p.add_subparsers(dest="phantom_command", required=True)
    gen = psub.add_parser("gen", help="generate a phantom dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    defaults = PhantomConfig()
    gen.add_argument("--volumes", type=int, default=defaults.volumes)
    gen.add_argument("--slices", type=int, default=defaults.slices_per_volume)
    gen.add_argument("--height", type=int, default=defaults.height)
    gen.add_argument("--width", type=int, default=defaults.width)
    gen.add_argument("--prevalence", type=float, default=defaults.infarct_prevalence,
                     help="fraction of slices with an infarct")
    gen.add_argument("--background-level", type=float, default=defaults.background_level)
    gen.add_argument("--blood-pool-level", type=float, default=defaults.blood_pool_level)
    gen.add_argument("--myocardium-level", type=float, default=defaults.myocardium_level)
    gen.add_argument("--infarct-delta", type=float, default=defaults.infarct_delta)
    gen.add_argument("--noise-sigma", type=float, default=defaults.noise_sigma)
    gen.add_argument("--center-jitter", type=int, default=defaults.center_jitter)
    two = dict(type=float, nargs=2, metavar=("LO", "HI"))
    gen.add_argument("--outer-radius", default=defaults.outer_radius_range, **two)
    gen.add_argument("--wall-thickness", default=defaults.wall_thickness_range, **two)
    gen.add_argument("--infarct-extent-deg", default=defaults.infarct_extent_deg, **two)
    gen.add_argument("--transmurality", default=defaults.transmurality_range, **two)
    gen.add_argument("--gain", default=defaults.gain_range, **two)
    gen.add_argument("--offset", default=defaults.offset_range, **two)
    gen.add_argument("--gamma", default=defaults.gamma_range, **two)
    gen.add_argument("--delta-jitter", default=defaults.infarct_delta_jitter, **two)
    gen.add_argument("--seed", type=int, default=defaults.seed)


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train the model or a baseline")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--method", default="apdnet",
                   choices=("apdnet",) + BASELINE_METHODS)
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--annotation-fraction", type=float)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--device")
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", action="store_true",
                       default=None)


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="evaluation report JSON path")
    p.add_argument("--split", help="split.json restricting evaluation to its test volumes")
    p.add_argument("--device", default="cpu")


def _add_sweep(sub) -> None:
    p = sub.add_parser("sweep", help="run a benchmark suite")
    p.add_argument("--suite", required=True, help="suite YAML file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads-per-job", type=int, default=1)
    p.add_argument("--no-resume", action="store_true")


def _add_visualize(sub) -> None:
    p = sub.add_parser("visualize", help="emit reconstruction panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="split.json: visualize its test volumes only")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--device", default="cpu")


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    training_overrides = {}
    for name in ("annotation_fraction", "seed", "epochs", "batch_size",
                 "learning_rate", "device"):
        value = getattr(args, name, None)
        if value is not None:
            training_overrides[name] = value
    for flag in ABLATION_FLAGS:
        if getattr(args, flag, None):
            training_overrides[flag] = True
    if training_overrides:
        cfg = replace(cfg, training=replace(cfg.training, **training_overrides))
    if getattr(args, "test_fraction", None) is not None:
        cfg = replace(cfg, test_fraction=args.test_fraction)
    return cfg


def _cmd_phantom_gen(args) -> int:
    cfg = PhantomConfig(
        height=args.height, width=args.width, volumes=args.volumes,
        slices_per_volume=args.slices, infarct_prevalence=args.prevalence,
        background_level=args.background_level,
        blood_pool_level=args.blood_pool_level,
        myocardium_level=args.myocardium_level,
        infarct_delta=args.infarct_delta, noise_sigma=args.noise_sigma,
        center_jitter=args.center_jitter,
        outer_radius_range=tuple(args.outer_radius),
        wall_thickness_range=tuple(args.wall_thickness),
        infarct_extent_deg=tuple(args.infarct_extent_deg),
        transmurality_range=tuple(args.transmurality),
        gain_range=tuple(args.gain), offset_range=tuple(args.offset),
        gamma_range=tuple(args.gamma),
        infarct_delta_jitter=tuple(args.delta_jitter), seed=args.seed)
    samples = generate_phantom(cfg)
    serialize_dataset(samples, args.out)
    with open(Path(args.out) / "phantom_config.json", "w") as f:
        json.dump(asdict(cfg), f, indent=2)
    print(f"wrote {len(samples)} slices across {cfg.volumes} volumes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = make_split(samples, cfg.training.annotation_fraction,
                       cfg.test_fraction, cfg.training.seed)
    (out / "split.json").write_text(json.dumps(asdict(split), indent=2))
    train, test = apply_split(samples, split)
    run_hash = config_hash({"method": args.method, "training": asdict(cfg.training),
                            "test_fraction": cfg.test_fraction})
    if args.method == "apdnet":
        result = run_training(cfg.training, train, out)
        model, _, _ = load_checkpoint(result.checkpoint_path)
        report = evaluate_on_volumes(
            APDNetPredictor(model, cfg.training.device), test, method="apdnet",
            annotation_fraction=cfg.training.annotation_fraction,
            seed=cfg.training.seed, config_hash=run_hash)
        report.save(out / "eval.json")
    else:
        _, report = run_baseline(args.method, cfg.training, train, test, out,
                                 config_hash=run_hash)
    print(f"{args.method}: test pathology Dice "
          f"{report.dice_pathology_mean:.3f} +/- {report.dice_pathology_std:.3f}")
    return 0


def _test_samples(args, samples):
    if args.split:
        split = DatasetSplit(**json.loads(Path(args.split).read_text()))
        return [s for s in samples if s.volume_id in set(split.test_volumes)]
    return samples


def _cmd_eval(args) -> int:
    samples = _test_samples(args, load_dataset(args.data))
    payload = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
    if "model_state" in payload:
        model, _, _ = load_checkpoint(args.checkpoint)
        predictor = APDNetPredictor(model, args.device)
        method = "apdnet"
    else:
        predictor, _ = load_baseline_predictor(args.checkpoint)
        method = payload["method"]
    report = evaluate_on_volumes(predictor, samples, method=method,
                                 annotation_fraction=float("nan"), seed=-1,
                                 config_hash="")
    report.save(args.out)
    print(f"{method}: pathology Dice {report.dice_pathology_mean:.3f} "
          f"+/- {report.dice_pathology_std:.3f} over {len(report.volumes)} volumes")
    return 0


def _cmd_sweep(args) -> int:
    with open(args.suite) as f:
        suite = dataclass_from_mapping(BenchmarkSuite, yaml.safe_load(f) or {})
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    samples = load_dataset(args.data)
    rows = run_sweep(suite, samples, cfg.training, args.out, jobs=args.jobs,
                     resume=not args.no_resume,
                     threads_per_job=args.threads_per_job)
    failures = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failures)}/{len(rows)} cells completed; "
          f"results in {args.out}")
    return 1 if failures else 0


def _cmd_visualize(args) -> int:
    samples = _test_samples(args, load_dataset(args.data))
    model, _, _ = load_checkpoint(args.checkpoint)
    written = emit_visuals(model, samples, args.out, count=args.count,
                           device=args.device)
    print(f"wrote {len(written)} images to {args.out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="apdnet",
        description="Semi-supervised pathology segmentation with disentangled "
                    "anatomy, modality, and pathology factors")
    parser.add_argument("--threads", type=int,
                        help="torch intra-op thread count")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_phantom(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_sweep(sub)
    _add_visualize(sub)
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    handlers = {
        "phantom": _cmd_phantom_gen,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "sweep": _cmd_sweep,
        "visualize": _cmd_visualize,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
