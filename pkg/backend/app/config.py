"""
Configuration for data generation, models, training and evaluation.

Process-level settings (worker caps, default directories) come from environment
variables so they can differ per machine. Run-level settings come from a JSON
RunConfig document that is validated up front; unknown keys are rejected so a
typo never silently falls back to a default.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

# Load environment variables from .env files if present.
# Priority: backend/app/.env, backend/.env, then repo-root/.env
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
load_dotenv(os.path.join(CURRENT_DIR, ".env"))
load_dotenv(os.path.join(CURRENT_DIR, "..", ".env"))
load_dotenv(os.path.join(CURRENT_DIR, "..", "..", ".env"))

AIR_THREADS = int(os.environ.get("AIR_THREADS", min(8, os.cpu_count() or 1)))
RUNS_DIR = os.environ.get("AIR_RUNS_DIR", "runs")
CHECKPOINT_DIR = os.environ.get("AIR_CHECKPOINT_DIR", os.path.join(RUNS_DIR, "sprites"))
DEFAULT_SEED = int(os.environ.get("AIR_DEFAULT_SEED", 0))

CHECKPOINT_FILE = "checkpoint.airt"
OPTIMIZER_FILE = "optimizer.airt"
RUN_CONFIG_FILE = "run_config.json"
METRICS_FILE = "metrics.csv"

DATASET_KINDS = ("sprites", "glyphs", "strokes", "raster")
VARIANTS = ("air", "dair")
MODES = ("2d", "raster")
EVAL_TASKS = (
    "counts",
    "heatmaps",
    "free_energy",
    "speed",
    "generalization",
    "probe",
    "raster_baselines",
)


class ConfigError(ValueError):
    """Raised when a run configuration is malformed or inconsistent."""


def worker_count() -> int:
    """Number of worker threads allowed by AIR_THREADS (at least one)."""
    return max(1, AIR_THREADS)


@dataclass
class DatasetSpec:
    """What to generate: kind, canvas, count distribution and placement rules."""

    kind: str = "sprites"
    canvas_h: int = 28
    canvas_w: int = 28
    counts: List[int] = field(default_factory=lambda: [0, 1, 2])
    count_probs: Optional[List[float]] = None
    n_images: int = 3000
    seed: int = 7
    overlap_allowed: bool = False
    repetition_allowed: bool = True
    object_size: float = 9.0
    scale_jitter: float = 0.2
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None

    def probabilities(self) -> List[float]:
        """Count probabilities, uniform when none were given."""
        if self.count_probs is None:
            return [1.0 / len(self.counts)] * len(self.counts)
        return list(self.count_probs)

    def validate(self, max_objects: Optional[int] = None) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got '{self.kind}'")
        if self.canvas_h < 4 or self.canvas_w < 4:
            raise ConfigError("dataset canvas must be at least 4x4")
        if not self.counts or any(c < 0 for c in self.counts):
            raise ConfigError("dataset.counts must be a non-empty list of non-negative ints")
        if self.count_probs is not None:
            if len(self.count_probs) != len(self.counts):
                raise ConfigError("dataset.count_probs must match dataset.counts in length")
            if any(p < 0 for p in self.count_probs) or abs(sum(self.count_probs) - 1.0) > 1e-9:
                raise ConfigError("dataset.count_probs must be non-negative and sum to 1")
        if max_objects is not None and max(self.counts) > max_objects:
            raise ConfigError(
                f"dataset.counts allows {max(self.counts)} objects but the model has "
                f"only {max_objects} steps"
            )
        if self.n_images < 1:
            raise ConfigError("dataset.n_images must be positive")
        if self.object_size <= 0 or not 0 <= self.scale_jitter < 1:
            raise ConfigError("dataset.object_size must be > 0 and scale_jitter in [0, 1)")
        if (self.mnist_images is None) != (self.mnist_labels is None):
            raise ConfigError("dataset.mnist_images and dataset.mnist_labels go together")


@dataclass
class ModelConfig:
    """Shape and prior settings of the 2D model and its inference network."""

    max_steps: int = 3
    code_size: int = 50
    canvas_h: int = 28
    canvas_w: int = 28
    glimpse_h: int = 12
    glimpse_w: int = 12
    sigma_x: float = 0.3
    rho: float = 0.5
    variant: str = "air"
    hidden_size: int = 256
    mlp_hidden: int = 256
    baseline_hidden: int = 128
    # z_where is (log s, tx, ty); prior N(mean, diag(std^2))
    where_prior_mean: List[float] = field(default_factory=lambda: [-0.9, 0.0, 0.0])
    where_prior_std: List[float] = field(default_factory=lambda: [0.2, 0.6, 0.6])
    pres_init_bias: float = 2.0

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ConfigError("model.max_steps must be >= 1")
        if self.sigma_x <= 0:
            raise ConfigError("model.sigma_x must be > 0")
        if not 0 < self.rho < 1:
            raise ConfigError("model.rho must be in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}")
        if min(self.code_size, self.glimpse_h, self.glimpse_w, self.hidden_size) < 1:
            raise ConfigError("model sizes must be positive")
        if len(self.where_prior_mean) != 3 or len(self.where_prior_std) != 3:
            raise ConfigError("model.where_prior_mean/std must have 3 entries")
        if min(self.where_prior_std) <= 0:
            raise ConfigError("model.where_prior_std entries must be > 0")


@dataclass
class RenderConfig:
    """Rasterizer, likelihood and renderer-mode network settings."""

    canvas_h: int = 32
    canvas_w: int = 32
    max_objects: int = 1
    blur_sigma: float = 1.0
    sigma_x: float = 0.3
    fd_eps: float = 1e-4
    alpha: float = 0.5
    object_size: float = 4.5
    hidden_size: int = 256
    baseline_hidden: int = 128
    # pose latent is (u, v, a, b) with theta = atan2(a, b); the last entry is the std of a and b
    where_prior_std: List[float] = field(default_factory=lambda: [0.6, 0.6, 1.0])
    position_range: float = 0.7
    opt_steps: int = 60
    opt_lr: float = 0.5

    def validate(self) -> None:
        if self.fd_eps <= 0:
            raise ConfigError("render.fd_eps must be > 0")
        if self.sigma_x <= 0 or self.blur_sigma <= 0:
            raise ConfigError("render.sigma_x and render.blur_sigma must be > 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("render.alpha must be in (0, 1)")
        if self.max_objects < 1:
            raise ConfigError("render.max_objects must be >= 1")
        if len(self.where_prior_std) != 3 or min(self.where_prior_std) <= 0:
            raise ConfigError("render.where_prior_std must have 3 positive entries")
        if not 0 < self.position_range <= 1:
            raise ConfigError("render.position_range must be in (0, 1]")


@dataclass
class TrainConfig:
    """Optimization settings. Learning rates default to 1e-4 (model) / 1e-3 (baselines)."""

    batch_size: int = 64
    lr_model: float = 1e-4
    lr_baseline: float = 1e-3
    steps: int = 20000
    seed: int = 0
    eval_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    smoothing_window: int = 200

    def validate(self) -> None:
        if self.batch_size < 1 or self.steps < 1 or self.eval_every < 1:
            raise ConfigError("train.batch_size, train.steps and train.eval_every must be positive")
        if self.lr_model <= 0 or self.lr_baseline <= 0 or self.clip_norm <= 0:
            raise ConfigError("train learning rates and clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must be in [0, 1)")


@dataclass
class EvalConfig:
    """Which evaluation tasks `eval` runs and their knobs."""

    tasks: List[str] = field(default_factory=lambda: ["counts", "heatmaps"])
    probe_task: str = "order"
    probe_fractions: List[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    probe_steps: int = 2000
    hit_radius_px: float = 3.0
    free_energy_samples: int = 1
    baseline_scenes: int = 100
    direct_restarts: int = 1

    def validate(self) -> None:
        unknown = [t for t in self.tasks if t not in EVAL_TASKS]
        if unknown:
            raise ConfigError(f"eval.tasks has unknown entries {unknown}; allowed {EVAL_TASKS}")
        if self.probe_task not in ("sum", "order"):
            raise ConfigError("eval.probe_task must be 'sum' or 'order'")
        if any(not 0 < f <= 1 for f in self.probe_fractions):
            raise ConfigError("eval.probe_fractions must lie in (0, 1]")
        if self.direct_restarts < 1:
            raise ConfigError("eval.direct_restarts must be >= 1")


@dataclass
class RunConfig:
    """A whole run: data, model, renderer, training, evaluation and output dir."""

    mode: str = "2d"
    out_dir: str = os.path.join(RUNS_DIR, "default")
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_dataset: Optional[DatasetSpec] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        self.model.validate()
        self.render.validate()
        self.train.validate()
        self.eval.validate()
        max_objects = self.model.max_steps if self.mode == "2d" else self.render.max_objects
        for name, spec in (("dataset", self.dataset), ("eval_dataset", self.eval_dataset)):
            if spec is None:
                continue
            spec.validate(max_objects)
            if self.mode == "raster" and spec.kind != "raster":
                raise ConfigError(f"{name}.kind must be 'raster' in raster mode")
            if self.mode == "2d" and spec.kind == "raster":
                raise ConfigError(f"{name}.kind 'raster' requires mode 'raster'")
            canvas = (
                (self.model.canvas_h, self.model.canvas_w)
                if self.mode == "2d"
                else (self.render.canvas_h, self.render.canvas_w)
            )
            if (spec.canvas_h, spec.canvas_w) != canvas:
                raise ConfigError(f"{name} canvas {spec.canvas_h}x{spec.canvas_w} != model canvas")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "dataset": DatasetSpec,
    "eval_dataset": DatasetSpec,
    "model": ModelConfig,
    "render": RenderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{path}' must be a JSON object")
    allowed = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{path}': {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"'{path}.{key}' must be true/false")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{path}.{key}' must be a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"'{path}.{key}' must be an integer")
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"'{path}.{key}' must be finite")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"'{path}.{key}' must be a string")
        if isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"'{path}.{key}' must be a list")
        values[key] = value
    return cls(**values)


def run_config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """
    Build and validate a RunConfig from a parsed JSON document.

    Raises:
        ConfigError: on unknown keys, wrong types or inconsistent values
    """
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    allowed = {"mode", "out_dir"} | set(_SECTIONS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    config = RunConfig()
    if "mode" in raw:
        if not isinstance(raw["mode"], str):
            raise ConfigError("'mode' must be a string")
        config.mode = raw["mode"]
    if "out_dir" in raw:
        if not isinstance(raw["out_dir"], str):
            raise ConfigError("'out_dir' must be a string")
        config.out_dir = raw["out_dir"]
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            setattr(config, name, _build_section(cls, raw[name], name))
    config.validate()
    return config


def load_run_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read a RunConfig JSON file and apply CLI overrides.

    Args:
        path: JSON file path
        overrides: optional flat overrides: variant, mode, seed, out_dir

    Returns:
        Validated RunConfig
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc

    config = run_config_from_dict(raw)
    apply_overrides(config, overrides or {})
    return config


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply `--variant/--mode/--seed/--out` style overrides and re-validate."""
    if overrides.get("variant") is not None:
        config.model.variant = overrides["variant"]
    if overrides.get("mode") is not None:
        config.mode = overrides["mode"]
    if overrides.get("seed") is not None:
        config.train.seed = int(overrides["seed"])
    if overrides.get("out_dir") is not None:
        config.out_dir = overrides["out_dir"]
    config.validate()
    return config


def config_hash(section: Any) -> str:
    """Stable sha256 of a dataclass (or plain dict) rendered as canonical JSON."""
    payload = asdict(section) if hasattr(section, "__dataclass_fields__") else section
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)


def canvas_of(config: RunConfig) -> Tuple[int, int]:
    """Canvas (H, W) the run's model operates on."""
    if config.mode == "2d":
        return config.model.canvas_h, config.model.canvas_w
    return config.render.canvas_h, config.render.canvas_w
