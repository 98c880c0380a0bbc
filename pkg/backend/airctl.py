"""
Command-line entry point: gen | train | infer | eval | check.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 training aborted,
4 checkpoint or image shape mismatch.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from app.air_model import AIRModel, free_energy
from app.check_suite import run_checks
from app.checkpoint import CheckpointMismatch
from app.config import (
    RUN_CONFIG_FILE,
    ConfigError,
    RunConfig,
    load_run_config,
    save_run_config,
)
from app.datagen import (
    Dataset,
    dataset_is_current,
    generate,
    load_dataset,
    save_dataset,
    split_specs,
    two_object_labels,
)
from app.image_io import PGMFormatError, read_pgm, write_pgm
from app.raster_inverse import compare_methods, supervised_train
from app.runs import ImageShapeMismatch, infer_image, load_run, overlay, write_reconstruction_grid
from app.tensor import ShapeError
from app.trainer import (
    TrainingAborted,
    attention_hit_rate,
    build_model,
    eval_counts,
    eval_generalization,
    measure_speed,
    pose_error,
    probe_comparison,
    raster_summary,
    raster_truth_scenes,
    scan_policy_heatmap,
    total_variation,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_MISMATCH = 4
GRID_IMAGES = 8


def _overrides(args) -> Dict:
    return {
        "variant": getattr(args, "variant", None),
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
    }


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_run_config(args.config, _overrides(args))


def _ensure_dataset(config: RunConfig, name: str, verbose: bool) -> Optional[Dataset]:
    """Load the run's dataset, generating it when missing or stale."""
    spec = config.dataset if name == "data" else config.eval_dataset
    if spec is None:
        return None
    directory = os.path.join(config.out_dir, name)
    if dataset_is_current(directory, spec):
        if verbose:
            print(f"🔧 Using existing dataset {directory}")
        return load_dataset(directory)
    if verbose:
        print(f"🔧 Generating {spec.n_images} {spec.kind} images (seed {spec.seed})")
    dataset = generate(spec, config.render)
    save_dataset(dataset, directory, spec, verbose=verbose)
    return dataset


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _load_config(args)
    os.makedirs(config.out_dir, exist_ok=True)
    for name in ("data", "eval_data"):
        _ensure_dataset(config, name, verbose=True)
    save_run_config(config, os.path.join(config.out_dir, RUN_CONFIG_FILE))
    return EXIT_OK


def _evaluator(dataset: Optional[Dataset]):
    if dataset is None:
        return None

    def evaluate(model) -> Dict[str, float]:
        return {
            "count_acc": eval_counts(model, dataset.images, dataset.counts()),
            "pose_err": pose_error(model, dataset.images, dataset.truths),
        }

    return evaluate


def cmd_train(args) -> int:
    config = _load_config(args)
    os.makedirs(config.out_dir, exist_ok=True)
    save_run_config(config, os.path.join(config.out_dir, RUN_CONFIG_FILE))
    dataset = _ensure_dataset(config, "data", verbose=True)
    eval_set = _ensure_dataset(config, "eval_data", verbose=True)
    model = build_model(config)
    grid_images = (eval_set or dataset).images[:GRID_IMAGES]

    def on_eval(trained, step):
        path = os.path.join(config.out_dir, "recon", f"step_{step:06d}.pgm")
        write_reconstruction_grid(trained, grid_images, path)

    print(f"🔧 Training {config.mode} model ({config.model.variant if config.mode == '2d' else 'raster'}) "
          f"for {config.train.steps} steps")
    result = train(
        model,
        dataset.images,
        config.train,
        out_dir=config.out_dir,
        evaluate=_evaluator(eval_set),
        on_eval=on_eval,
        verbose=True,
    )
    print(f"✓ Checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _run_dir(path: str) -> str:
    return path if os.path.isdir(path) else os.path.dirname(path)


def _intensity_scale(run_dir: str) -> float:
    """PGM scale recorded with the run's training data (1.0 when unknown)."""
    path = os.path.join(run_dir, "data", "manifest.json")
    if not os.path.exists(path):
        return 1.0
    with open(path, "r", encoding="utf-8") as handle:
        return float(json.load(handle).get("intensity_scale", 1.0))


def cmd_infer(args) -> int:
    if not args.checkpoint or not args.image:
        raise ConfigError("infer needs --checkpoint RUN_DIR and --image FILE.pgm")
    run_dir = _run_dir(args.checkpoint)
    config, model = load_run(run_dir)
    pixels = read_pgm(args.image, _intensity_scale(run_dir))
    result = infer_image(model, pixels)
    out_path = os.path.join(args.out, "overlay.pgm") if args.out else f"{os.path.splitext(args.image)[0]}.overlay.pgm"
    write_pgm(out_path, overlay(pixels, result, model))
    payload = {
        "mode": config.mode,
        "count": result["count"],
        "objects": result["objects"],
        "ms": result["ms"],
        "overlay": out_path,
    }
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def _generalization(config: RunConfig, verbose: bool) -> Dict:
    table: Dict[str, Dict[str, float]] = {}
    for split in ("extrapolation", "interpolation"):
        train_spec, test_spec = split_specs(config.dataset, split)
        model_cfg = replace(config.model, max_steps=max(config.model.max_steps, 3))
        train_set = generate(train_spec)
        test_set = generate(test_spec)
        models = {}
        for variant in ("air", "dair"):
            if verbose:
                print(f"🔧 {split}: training {variant} on counts {train_spec.counts}")
            model = AIRModel(replace(model_cfg, variant=variant), np.random.default_rng(config.train.seed))
            train(model, train_set.images, config.train, verbose=verbose)
            models[variant] = model
        table.update(eval_generalization(models, {split: (test_set.images, test_set.counts())}))
    return table


def _probe(config: RunConfig, model: AIRModel) -> Dict:
    spec = replace(config.eval_dataset or config.dataset, counts=[2], count_probs=None)
    dataset = generate(spec)
    labels = two_object_labels(dataset.truths)
    task = config.eval.probe_task
    num_classes = 19 if task == "sum" else 2
    images = dataset.images[labels["index"]]
    return probe_comparison(
        model, images, labels[task], num_classes, config.eval.probe_fractions, config.eval.probe_steps,
        seed=config.train.seed,
    )


def cmd_eval(args) -> int:
    run_dir = _run_dir(args.checkpoint) if args.checkpoint else _load_config(args).out_dir
    config, model = load_run(run_dir)
    tasks: List[str] = config.eval.tasks
    eval_set = _ensure_dataset(config, "eval_data", verbose=True) or _ensure_dataset(config, "data", verbose=True)
    report: Dict = {}
    rng = np.random.default_rng(config.train.seed)

    if "counts" in tasks:
        report["counts"] = {
            "count_acc": eval_counts(model, eval_set.images, eval_set.counts()),
            "pose_err_px": pose_error(model, eval_set.images, eval_set.truths),
            "attention_hit_rate": attention_hit_rate(
                model, eval_set.images, eval_set.truths, config.eval.hit_radius_px
            ),
        }
        if config.mode == "raster":
            report["counts"].update(raster_summary(model, eval_set.images, eval_set.truths))
    if "heatmaps" in tasks and config.mode == "2d":
        maps = scan_policy_heatmap(model, eval_set.images)
        for i, heatmap in enumerate(maps):
            write_pgm(os.path.join(config.out_dir, "heatmaps", f"step_{i + 1}.pgm"), heatmap / max(heatmap.max(), 1e-12))
        report["heatmaps"] = {
            "steps": len(maps),
            "tv_step1_step2": total_variation(maps[0], maps[1]) if len(maps) > 1 else None,
        }
    if "free_energy" in tasks and config.mode == "2d":
        report["free_energy"] = free_energy(model, eval_set.images, rng, samples=config.eval.free_energy_samples)
    if "speed" in tasks:
        report["speed"] = measure_speed(model, eval_set.images[:64])
    if "generalization" in tasks and config.mode == "2d":
        report["generalization"] = _generalization(config, verbose=True)
    if "probe" in tasks and config.mode == "2d":
        report["probe"] = _probe(config, model)
    if "raster_baselines" in tasks and config.mode == "raster":
        train_set = _ensure_dataset(config, "data", verbose=True)
        supervised = supervised_train(
            train_set.images, raster_truth_scenes(train_set.truths), config.render,
            steps=config.train.steps, rng=rng, batch_size=config.train.batch_size, verbose=True,
        )
        n = config.eval.baseline_scenes
        report["raster_baselines"] = compare_methods(
            model, supervised, eval_set.images[:n], raster_truth_scenes(eval_set.truths[:n]),
            config.render, config.eval.direct_restarts, rng,
        )

    path = os.path.join(config.out_dir, "eval.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, default=float)
    print(json.dumps(report, indent=2, default=float))
    print(f"📝 Wrote {path}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(verbose=True)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"❌ {len(failed)} of {len(results)} checks failed")
        return EXIT_CHECK_FAILED
    print(f"✓ All {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Scene inference engine: data, training, inference, evaluation.")
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("--config", help="Run configuration JSON")
    parser.add_argument("--variant", choices=["air", "dair"], help="Inference recurrence (2d mode)")
    parser.add_argument("--mode", choices=["2d", "raster"], help="Model family")
    parser.add_argument("--seed", type=int, help="Training seed override")
    parser.add_argument("--out", help="Output directory override")
    parser.add_argument("--checkpoint", help="Run directory (or checkpoint file inside it)")
    parser.add_argument("--image", help="PGM image for `infer`")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"❌ Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"❌ Training aborted: {exc} (last good checkpoint: {exc.checkpoint_path})", file=sys.stderr)
        return EXIT_ABORTED
    except (CheckpointMismatch, ShapeError, ImageShapeMismatch, PGMFormatError) as exc:
        print(f"❌ Mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
