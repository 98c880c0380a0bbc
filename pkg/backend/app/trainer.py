"""
Training loop and evaluations for both modes.

The unsupervised path takes pixels only: `train` never receives truth records, so
labels cannot leak into the bound. Evaluations take truth separately.
"""

import csv
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .air_model import AIRModel, load_model, save_model
from .checkpoint import load_parameters, save_parameters
from .config import CHECKPOINT_FILE, METRICS_FILE, OPTIMIZER_FILE, RunConfig, TrainConfig
from .image_io import normalize_histogram
from .nn import MLP, Adam, clip_grad_norm
from .raster_inverse import RasterAIR, SceneSpec, scene_errors
from .spatial_transformer import window_centers
from .tensor import Tensor, log_softmax

Model = Union[AIRModel, RasterAIR]
METRIC_FIELDS = ("step", "elbo", "count_acc", "pose_err", "seconds")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; `checkpoint_path` is the last good checkpoint (or None)."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class Metrics:
    step: int
    elbo: float
    count_acc: float = float("nan")
    pose_err: float = float("nan")
    seconds: float = 0.0


class MetricsLog:
    """Append-only CSV of Metrics rows with steps strictly increasing."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.rows: List[Metrics] = []
        if path and os.path.exists(path):
            with open(path, "r", newline="", encoding="utf-8") as handle:
                for raw in csv.DictReader(handle):
                    self.rows.append(
                        Metrics(
                            step=int(raw["step"]),
                            elbo=float(raw["elbo"]),
                            count_acc=float(raw["count_acc"]),
                            pose_err=float(raw["pose_err"]),
                            seconds=float(raw["seconds"]),
                        )
                    )

    @property
    def last_step(self) -> int:
        return self.rows[-1].step if self.rows else 0

    def append(self, row: Metrics) -> None:
        if row.step <= self.last_step and self.rows:
            raise ValueError(f"metrics step {row.step} is not after {self.last_step}")
        self.rows.append(row)
        if self.path is None:
            return
        new_file = not os.path.exists(self.path)
        with open(self.path, "a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            if new_file:
                writer.writerow(METRIC_FIELDS)
            writer.writerow([row.step] + [f"{getattr(row, k):.6g}" for k in METRIC_FIELDS[1:]])


@dataclass
class TrainResult:
    metrics: List[Metrics]
    checkpoint_path: Optional[str]
    smoothed_elbo: List[float]


def build_model(config: RunConfig, seed: Optional[int] = None) -> Model:
    """Fresh model for the run's mode, initialized from the training seed."""
    rng = np.random.default_rng(config.train.seed if seed is None else seed)
    if config.mode == "raster":
        return RasterAIR(config.render, rng)
    return AIRModel(config.model, rng)


def _save_training_state(model: Model, groups: Dict[str, Adam], out_dir: str) -> str:
    path = os.path.join(out_dir, CHECKPOINT_FILE)
    save_model(model, path)
    state = {}
    for name, optimizer in groups.items():
        state.update(optimizer.state_dict(name))
    save_parameters(os.path.join(out_dir, OPTIMIZER_FILE), state)
    return path


def _restore_training_state(model: Model, groups: Dict[str, Adam], out_dir: str) -> None:
    load_model(model, os.path.join(out_dir, CHECKPOINT_FILE))
    optimizer_path = os.path.join(out_dir, OPTIMIZER_FILE)
    if os.path.exists(optimizer_path):
        state = load_parameters(optimizer_path)
        for name, optimizer in groups.items():
            optimizer.load_state_dict(state, name)


def train(
    model: Model,
    images: np.ndarray,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    evaluate: Optional[Callable[[Model], Dict[str, float]]] = None,
    on_eval: Optional[Callable[[Model, int], None]] = None,
    verbose: bool = False,
) -> TrainResult:
    """
    Maximize the bound with Adam: model parameters at lr_model, baselines at
    lr_baseline, both clipped to clip_norm.

    Step t draws its batch and noise from default_rng([seed, t]), so a run resumed
    from its last checkpoint continues exactly as an uninterrupted one.

    Args:
        model: AIRModel or RasterAIR
        images: [M, H, W] pixels only
        cfg: training settings
        out_dir: where checkpoint, optimizer state and metrics go (None keeps it in memory)
        evaluate: called every eval_every steps; may return count_acc / pose_err
        on_eval: extra artifact hook (reconstruction grids) called after evaluate

    Raises:
        TrainingAborted: when the surrogate or the bound becomes non-finite
    """
    images = np.asarray(images, dtype=np.float64)
    groups = {
        "model": Adam(model.model_parameters(), cfg.lr_model, cfg.beta1, cfg.beta2, cfg.adam_eps),
        "baseline": Adam(model.baseline_parameters(), cfg.lr_baseline, cfg.beta1, cfg.beta2, cfg.adam_eps),
    }
    log = MetricsLog(os.path.join(out_dir, METRICS_FILE) if out_dir else None)
    checkpoint_path = None
    start = 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if os.path.exists(os.path.join(out_dir, CHECKPOINT_FILE)) and log.rows:
            _restore_training_state(model, groups, out_dir)
            start = log.last_step
            checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILE)
            if verbose:
                print(f"🔧 Resuming from step {start}")

    recent: List[float] = []
    smoothed: List[float] = []
    started = time.perf_counter()
    for step in range(start + 1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        batch = images[rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)]

        for optimizer in groups.values():
            optimizer.zero_grad()
        result = model.elbo_and_surrogate(batch, rng)
        loss = result.surrogate.item()
        if not np.isfinite(loss) or not np.all(np.isfinite(result.elbo)):
            message = f"non-finite loss at step {step}"
            if verbose:
                print(f"❌ {message}; last good checkpoint: {checkpoint_path}")
            raise TrainingAborted(message, checkpoint_path)
        result.surrogate.backward()
        result.baseline_loss.backward()
        clip_grad_norm(groups["model"].params, cfg.clip_norm)
        clip_grad_norm(groups["baseline"].params, cfg.clip_norm)
        for optimizer in groups.values():
            optimizer.step()

        recent.append(float(np.mean(result.elbo)))
        recent = recent[-cfg.smoothing_window:]
        smoothed.append(float(np.mean(recent)))

        if step % cfg.eval_every == 0 or step == cfg.steps:
            scores = evaluate(model) if evaluate else {}
            row = Metrics(
                step=step,
                elbo=smoothed[-1],
                count_acc=float(scores.get("count_acc", float("nan"))),
                pose_err=float(scores.get("pose_err", float("nan"))),
                seconds=time.perf_counter() - started,
            )
            log.append(row)
            if out_dir:
                checkpoint_path = _save_training_state(model, groups, out_dir)
            if on_eval:
                on_eval(model, step)
            if verbose:
                print(f"   ✓ step {step}: elbo={row.elbo:.2f} count_acc={row.count_acc:.3f}")

    return TrainResult(metrics=log.rows, checkpoint_path=checkpoint_path, smoothed_elbo=smoothed)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def infer_counts_and_centres(model: Model, images: np.ndarray, batch_size: int = 64):
    """
    Deterministic inference over a set.

    Returns:
        counts [M] and, per image, the list of (x, y) pixel centres of live steps
    """
    counts: List[int] = []
    centres: List[List[np.ndarray]] = []
    for chunk in _batches(len(images), batch_size):
        if isinstance(model, RasterAIR):
            for scene in model.infer_scene(images[chunk], deterministic=True).scenes:
                counts.append(scene.count)
                centres.append([np.array(pose[:2]) for p, pose in zip(scene.present, scene.pose) if p])
            continue
        scene = model.infer(images[chunk], deterministic=True)
        height, width = model.canvas
        masks = scene.masks()
        poses = scene.poses()
        for b in range(masks.shape[0]):
            live = masks[b] > 0
            counts.append(int(live.sum()))
            centres.append(list(window_centers(poses[b][live], height, width)))
    return np.array(counts, dtype=np.int64), centres


def eval_counts(model: Model, images: np.ndarray, counts: Sequence[int]) -> float:
    """Fraction of images whose inferred count equals the truth."""
    predicted, _ = infer_counts_and_centres(model, images)
    return float(np.mean(predicted == np.asarray(counts)))


def _truth_centres(truth: Dict) -> List[np.ndarray]:
    return [np.array([o["x"], o["y"]]) for o in truth.get("objects", [])]


def _matched_distances(predicted: List[np.ndarray], truth: List[np.ndarray]) -> List[float]:
    if not predicted or not truth:
        return []
    cost = np.array([[np.linalg.norm(p - t) for t in truth] for p in predicted])
    rows, cols = linear_sum_assignment(cost)
    return [float(cost[r, c]) for r, c in zip(rows, cols)]


def pose_error(model: Model, images: np.ndarray, truths: Sequence[Dict]) -> float:
    """Mean pixel distance between optimally matched inferred and true centres."""
    _, centres = infer_counts_and_centres(model, images)
    distances = [d for c, t in zip(centres, truths) for d in _matched_distances(c, _truth_centres(t))]
    return float(np.mean(distances)) if distances else float("nan")


def attention_hit_rate(model: Model, images: np.ndarray, truths: Sequence[Dict], radius_px: float = 3.0) -> float:
    """
    Over two-object scenes: fraction where the first two steps' centres land within
    radius_px of two distinct planted objects.
    """
    index = [i for i, t in enumerate(truths) if t["count"] == 2]
    if not index:
        return float("nan")
    _, centres = infer_counts_and_centres(model, images[index])
    hits = 0
    for c, i in zip(centres, index):
        distances = _matched_distances(c[:2], _truth_centres(truths[i]))
        hits += int(len(distances) == 2 and max(distances) <= radius_px)
    return hits / len(index)


def scan_policy_heatmap(model: AIRModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """
    Per-step histograms of live attention centres, [N, H, W], each summing to 1
    (all-zero for a step that never fires).
    """
    height, width = model.canvas
    histograms = np.zeros((model.cfg.max_steps, height, width))
    for chunk in _batches(len(images), batch_size):
        scene = model.infer(images[chunk], deterministic=True)
        for i, step in enumerate(scene.steps):
            centres = window_centers(step.pose.data, height, width)
            live = step.mask > 0
            xs = np.clip(np.round(centres[live, 0]).astype(int), 0, width - 1)
            ys = np.clip(np.round(centres[live, 1]).astype(int), 0, height - 1)
            np.add.at(histograms[i], (ys, xs), 1.0)
    return np.stack([normalize_histogram(h) for h in histograms])


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(p - q).sum())


def eval_generalization(models: Dict[str, Model], test_sets: Dict[str, tuple]) -> Dict[str, Dict[str, float]]:
    """
    Count accuracy of each model on each held-out set.

    Args:
        models: variant name -> model trained on the split's training counts
        test_sets: split name -> (images, counts)
    """
    table: Dict[str, Dict[str, float]] = {}
    for split, (images, counts) in test_sets.items():
        table[split] = {name: eval_counts(model, images, counts) for name, model in models.items()}
    return table


def measure_speed(model: Model, images: np.ndarray, repeats: int = 1) -> Dict[str, float]:
    """Informational wall-clock of deterministic inference: ms per image and per step."""
    steps = model.cfg.max_steps if isinstance(model, AIRModel) else model.cfg.max_objects
    started = time.perf_counter()
    for _ in range(repeats):
        infer_counts_and_centres(model, images)
    elapsed = (time.perf_counter() - started) / repeats
    per_image = 1000.0 * elapsed / max(len(images), 1)
    return {"ms_per_image": per_image, "ms_per_step": per_image / steps}


# ----------------------------------------------------------------------
# Downstream probes
# ----------------------------------------------------------------------


def representations(model: AIRModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Concatenated per-step (z_what, z_where, z_pres) from deterministic inference."""
    parts = [model.infer(images[chunk], deterministic=True).representation() for chunk in _batches(len(images), batch_size)]
    return np.concatenate(parts, axis=0)


def _standardize(train: np.ndarray, test: np.ndarray):
    mean = train.mean(axis=0)
    std = train.std(axis=0) + 1e-6
    return (train - mean) / std, (test - mean) / std


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    steps: int,
    rng: np.random.Generator,
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> MLP:
    """Small MLP classifier trained with softmax cross-entropy."""
    head = MLP([features.shape[1], hidden, num_classes], rng, "probe")
    optimizer = Adam(head.parameters(), lr)
    one_hot = np.eye(num_classes)
    for _ in range(steps):
        index = rng.choice(len(features), size=min(batch_size, len(features)), replace=False)
        optimizer.zero_grad()
        log_probs = log_softmax(head(Tensor(features[index])), axis=-1)
        loss = -(log_probs * one_hot[labels[index]]).sum(axis=1).mean()
        loss.backward()
        optimizer.step()
    return head


def probe_accuracy(head: MLP, features: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.argmax(head(Tensor(features)).data, axis=1)
    return float(np.mean(predictions == labels))


def downstream_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    fractions: Sequence[float],
    steps: int,
    seed: int = 0,
    test_share: float = 0.5,
) -> List[Dict[str, float]]:
    """
    Accuracy curve of probes trained on growing labeled fractions.

    The last `test_share` of the rows is held out; a fraction f trains on the
    first f of the remainder (at least one row).
    """
    split = int(round(len(features) * (1.0 - test_share)))
    train_x, test_x = _standardize(features[:split], features[split:])
    train_y, test_y = labels[:split], labels[split:]
    curve = []
    for fraction in fractions:
        n = max(1, int(round(fraction * len(train_x))))
        rng = np.random.default_rng([seed, n])
        head = fit_probe(train_x[:n], train_y[:n], num_classes, steps, rng)
        curve.append({"fraction": float(fraction), "n_labeled": n, "accuracy": probe_accuracy(head, test_x, test_y)})
    return curve


def probe_comparison(
    model: AIRModel,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    fractions: Sequence[float],
    steps: int,
    seed: int = 0,
) -> Dict[str, List[Dict[str, float]]]:
    """Probe curves on frozen model representations and on raw pixels (same head)."""
    before = model.checksum()
    features = representations(model, images)
    if model.checksum() != before:
        raise RuntimeError("model parameters changed while extracting representations")
    return {
        "representation": downstream_probe(features, labels, num_classes, fractions, steps, seed),
        "pixels": downstream_probe(images.reshape(len(images), -1), labels, num_classes, fractions, steps, seed),
    }


def raster_truth_scenes(truths: Sequence[Dict]) -> List[SceneSpec]:
    return [SceneSpec(t["scene"]["present"], t["scene"]["identity"], t["scene"]["pose"]) for t in truths]


def raster_summary(model: RasterAIR, images: np.ndarray, truths: Sequence[Dict]) -> Dict[str, float]:
    """Identity accuracy, median position error and median quotient/raw angle errors."""
    scenes = model.infer_scene(images, deterministic=True).scenes
    errors = [scene_errors(p, t) for p, t in zip(scenes, raster_truth_scenes(truths))]

    def median(key):
        values = [v for e in errors for v in e[key]]
        return float(np.median(values)) if values else float("nan")

    identities = [v for e in errors for v in e["identity"]]
    return {
        "count_acc": float(np.mean([e["count_correct"] for e in errors])),
        "identity_acc": float(np.mean(identities)) if identities else float("nan"),
        "median_position_px": median("position"),
        "median_angle_quotient": median("angle_quotient"),
        "median_angle_raw": median("angle_raw"),
    }


def metrics_as_dicts(rows: Sequence[Metrics]) -> List[Dict]:
    return [asdict(r) for r in rows]
