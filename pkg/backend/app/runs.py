"""
Run directories: loading a trained model back, single-image inference as JSON and
the image artifacts (reconstruction grids, overlays, heatmaps) written next to it.

Layout of a run directory:
    run_config.json   the validated RunConfig
    checkpoint.airt   model + baseline parameters
    optimizer.airt    Adam moments for resuming
    metrics.csv       step, elbo, count_acc, pose_err, seconds
    data/, eval_data/ generated datasets
"""

import os
import time
from typing import Dict, Tuple

import numpy as np

from .air_model import AIRModel, load_model
from .config import CHECKPOINT_FILE, RUN_CONFIG_FILE, RunConfig, load_run_config
from .image_io import draw_box, image_grid, write_pgm
from .raster_inverse import IDENTITIES, RasterAIR, rasterize
from .spatial_transformer import window_boxes
from .trainer import Model, build_model


class ImageShapeMismatch(ValueError):
    """An input image whose shape differs from the model canvas."""


def load_run(run_dir: str) -> Tuple[RunConfig, Model]:
    """
    Rebuild the model of a finished (or interrupted) run.

    Raises:
        ConfigError: if run_config.json is missing or invalid
        CheckpointMismatch: if the checkpoint does not fit the configured model
    """
    config = load_run_config(os.path.join(run_dir, RUN_CONFIG_FILE))
    model = build_model(config)
    load_model(model, os.path.join(run_dir, CHECKPOINT_FILE))
    return config, model


def infer_image(model: Model, pixels: np.ndarray) -> Dict:
    """
    Deterministic inference on one image.

    Returns:
        {"count", "objects": [{"step", "x", "y", "scale", "theta", "identity"}],
         "ms", "reconstruction"} with the same keys in both modes (unused ones None)

    Raises:
        ImageShapeMismatch: if the image does not match the model canvas
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != tuple(model.canvas):
        raise ImageShapeMismatch(f"image shape {pixels.shape} does not match model canvas {tuple(model.canvas)}")
    started = time.perf_counter()
    objects = []
    if isinstance(model, RasterAIR):
        scene = model.infer_scene(pixels[None], deterministic=True).scenes[0]
        for i, (present, identity, pose) in enumerate(zip(scene.present, scene.identity, scene.pose)):
            if present:
                objects.append(
                    {"step": i, "x": pose[0], "y": pose[1], "scale": None, "theta": pose[2],
                     "identity": IDENTITIES[identity]}
                )
        reconstruction = rasterize(scene, model.cfg)
        count = scene.count
    else:
        latent = model.infer(pixels[None], deterministic=True)
        height, width = model.canvas
        for i, step in enumerate(latent.steps):
            if step.mask[0] > 0:
                s, tx, ty = step.pose.data[0]
                objects.append(
                    {"step": i, "x": (tx + 1.0) * 0.5 * (width - 1), "y": (ty + 1.0) * 0.5 * (height - 1),
                     "scale": s, "theta": None, "identity": None}
                )
        reconstruction = latent.canvas.data[0]
        count = int(latent.counts[0])
    elapsed_ms = 1000.0 * (time.perf_counter() - started)
    return {
        "count": int(count),
        "objects": [{k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in o.items()} for o in objects],
        "ms": elapsed_ms,
        "reconstruction": reconstruction,
    }


def overlay(pixels: np.ndarray, result: Dict, model: Model) -> np.ndarray:
    """Input and reconstruction side by side with attention boxes burned into the latter."""
    recon = np.clip(result["reconstruction"], 0.0, 1.0)
    height, width = pixels.shape
    for obj in result["objects"]:
        if obj["scale"] is not None:
            tx = 2.0 * obj["x"] / (width - 1) - 1.0
            ty = 2.0 * obj["y"] / (height - 1) - 1.0
            box = window_boxes(np.array([obj["scale"], tx, ty]), height, width)[0]
        else:
            half = model.cfg.object_size
            box = (obj["x"] - half, obj["y"] - half, obj["x"] + half, obj["y"] + half)
        recon = draw_box(recon, box, 1.0)
    return image_grid([[np.clip(pixels, 0.0, 1.0), recon]])


def reconstruction_grid(model: AIRModel, images: np.ndarray) -> np.ndarray:
    """Data row above reconstruction row, attention windows of live steps outlined."""
    latent = model.infer(images, deterministic=True)
    height, width = model.canvas
    recons = []
    for b in range(len(images)):
        recon = np.clip(latent.canvas.data[b], 0.0, 1.0)
        for step in latent.steps:
            if step.mask[b] > 0:
                recon = draw_box(recon, window_boxes(step.pose.data[b], height, width)[0], 1.0)
        recons.append(recon)
    return image_grid([list(np.clip(images, 0.0, 1.0)), recons])


def write_reconstruction_grid(model: Model, images: np.ndarray, path: str) -> None:
    if isinstance(model, RasterAIR):
        scenes = model.infer_scene(images, deterministic=True).scenes
        grid = image_grid([list(images), [rasterize(s, model.cfg) for s in scenes]])
    else:
        grid = reconstruction_grid(model, images)
    write_pgm(path, grid)
