"""
Inverse graphics against a fixed 2D rasterizer.

Scenes hold up to N primitives (disc, square, triangle), each with a pixel position
and a rotation angle. The renderer is treated as a black box: its log-likelihood is
computed on blurred images and differentiated with forward finite differences.

Three ways of recovering scenes live here:
    RasterAIR          amortized recurrent inference trained on the bound
    direct_optimize    per-image search: enumerate identities, ascend on poses
    supervised_train   the same recurrent body fitted to ground-truth labels
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .config import RenderConfig, worker_count
from .count_prior import binomial
from .estimators import (
    Baseline,
    BernoulliParams,
    CategoricalParams,
    GaussianParams,
    baseline_loss,
    bernoulli_sample,
    categorical_sample,
    discrete_log_pmf,
    gaussian_log_pdf,
    gaussian_sample_reparam,
    score_function_surrogate,
)
from .nn import Adam, Linear, Module, RNNCell, clip_grad_norm, flatten_images, join
from .tensor import Tensor, atan2, cos, sin, stack

IDENTITIES = ("disc", "square", "triangle")
# Rotational symmetry order; 0 means continuous (any rotation maps the shape to itself).
SYMMETRY_ORDER = {"disc": 0, "square": 4, "triangle": 3}
# Half-extent relative to the disc radius so that all three primitives share one area.
_SQUARE_APOTHEM = np.sqrt(np.pi) / 2.0
_TRIANGLE_APOTHEM = np.sqrt(np.pi / (3.0 * np.sqrt(3.0)))
LOG_TWO_PI = np.log(2.0 * np.pi)


@dataclass
class SceneSpec:
    """Up to N object slots: presence bit, identity index and (x_px, y_px, theta)."""

    present: List[int]
    identity: List[int]
    pose: List[List[float]]

    def __post_init__(self):
        if not len(self.present) == len(self.identity) == len(self.pose):
            raise ValueError("present, identity and pose must have one entry per slot")
        self.present = [int(p) for p in self.present]
        self.identity = [int(k) for k in self.identity]
        self.pose = [[float(v) for v in row] for row in self.pose]

    @classmethod
    def empty(cls, slots: int) -> "SceneSpec":
        return cls([0] * slots, [0] * slots, [[0.0, 0.0, 0.0] for _ in range(slots)])

    @property
    def count(self) -> int:
        return sum(self.present)

    def validate(self, cfg: RenderConfig) -> None:
        """
        Raises:
            ValueError: if a present object is off canvas or has an unknown identity
        """
        for p, k, (x, y, _) in zip(self.present, self.identity, self.pose):
            if p not in (0, 1):
                raise ValueError(f"presence must be 0/1, got {p}")
            if not 0 <= k < len(IDENTITIES):
                raise ValueError(f"identity {k} outside 0..{len(IDENTITIES) - 1}")
            if p and not (0 <= x <= cfg.canvas_w - 1 and 0 <= y <= cfg.canvas_h - 1):
                raise ValueError(f"object at ({x}, {y}) is off the {cfg.canvas_h}x{cfg.canvas_w} canvas")

    def present_objects(self) -> List[Tuple[int, List[float]]]:
        return [(k, pose) for p, k, pose in zip(self.present, self.identity, self.pose) if p]

    def to_json(self) -> str:
        return json.dumps({"present": self.present, "identity": self.identity, "pose": self.pose})

    @classmethod
    def from_json(cls, line: str) -> "SceneSpec":
        raw = json.loads(line)
        return cls(raw["present"], raw["identity"], raw["pose"])

    def canonical(self) -> "SceneSpec":
        """Present objects sorted by x, then absent slots: the label ordering convention."""
        objects = sorted(self.present_objects(), key=lambda item: (item[1][0], item[1][1]))
        slots = len(self.present)
        spec = SceneSpec.empty(slots)
        for i, (k, pose) in enumerate(objects):
            spec.present[i] = 1
            spec.identity[i] = k
            spec.pose[i] = list(pose)
        return spec


# ----------------------------------------------------------------------
# Rendering and likelihood
# ----------------------------------------------------------------------


def _reduced_angle(identity: int, theta: float) -> float:
    order = SYMMETRY_ORDER[IDENTITIES[identity]]
    if order == 0:
        return 0.0
    return float(np.mod(theta, 2.0 * np.pi / order))


def _signed_distance(identity: int, pose: Sequence[float], xs: np.ndarray, ys: np.ndarray, radius: float) -> np.ndarray:
    """Signed distance (px) to the primitive boundary; negative inside."""
    x, y, theta = pose
    dx, dy = xs - x, ys - y
    name = IDENTITIES[identity]
    if name == "disc":
        return np.hypot(dx, dy) - radius
    theta = _reduced_angle(identity, theta)
    if name == "square":
        normals = theta + np.arange(4) * (np.pi / 2.0)
        apothem = radius * _SQUARE_APOTHEM
    else:
        normals = theta - np.pi / 2.0 + np.arange(3) * (2.0 * np.pi / 3.0)
        apothem = radius * _TRIANGLE_APOTHEM
    projections = [np.cos(a) * dx + np.sin(a) * dy for a in normals]
    return np.max(projections, axis=0) - apothem


def object_coverage(scene: SceneSpec, cfg: RenderConfig) -> np.ndarray:
    """[n_present, H, W] anti-aliased coverage of each present object on its own."""
    ys, xs = np.mgrid[0:cfg.canvas_h, 0:cfg.canvas_w].astype(np.float64)
    layers = [
        np.clip(0.5 - _signed_distance(k, pose, xs, ys, cfg.object_size), 0.0, 1.0)
        for k, pose in scene.present_objects()
    ]
    return np.stack(layers) if layers else np.zeros((0, cfg.canvas_h, cfg.canvas_w))


def objects_touch(scene: SceneSpec, cfg: RenderConfig) -> bool:
    """True when two present objects cover a common pixel."""
    occupied = object_coverage(scene, cfg) > 0.0
    return bool(np.any(occupied.sum(axis=0) > 1))


def rasterize(scene: SceneSpec, cfg: RenderConfig) -> np.ndarray:
    """
    Deterministic grayscale render: anti-aliased coverage per object, per-pixel max.

    Absent objects contribute nothing; the background is 0.
    """
    image = np.zeros((cfg.canvas_h, cfg.canvas_w))
    for coverage in object_coverage(scene, cfg):
        np.maximum(image, coverage, out=image)
    return image


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian kernel of radius ceil(3 sigma)."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    profile = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def blur(img: np.ndarray, cfg: RenderConfig, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Convolve with the blur kernel, reflect padding."""
    kernel = blur_kernel(cfg.blur_sigma) if kernel is None else kernel
    return ndimage.convolve(np.asarray(img, dtype=np.float64), kernel, mode="reflect")


def _gaussian_log_density(blurred_x: np.ndarray, blurred_y: np.ndarray, sigma: float) -> float:
    residual = (blurred_x - blurred_y) / sigma
    return float(-0.5 * np.sum(residual * residual) - blurred_x.size * (np.log(sigma) + 0.5 * LOG_TWO_PI))


def renderer_log_likelihood(x: np.ndarray, scene: SceneSpec, cfg: RenderConfig, blurred_x: Optional[np.ndarray] = None) -> float:
    """log N(blur(x); blur(rasterize(scene)), sigma_x^2 I)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.canvas_h, cfg.canvas_w):
        raise ValueError(f"image shape {x.shape} != render canvas {(cfg.canvas_h, cfg.canvas_w)}")
    if blurred_x is None:
        blurred_x = blur(x, cfg)
    return _gaussian_log_density(blurred_x, blur(rasterize(scene, cfg), cfg), cfg.sigma_x)


def fd_pose_grad(
    x: np.ndarray,
    scene: SceneSpec,
    cfg: RenderConfig,
    eps: Optional[float] = None,
    blurred_x: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Forward-difference gradient of the blurred log-likelihood w.r.t. every pose entry.

    Returns:
        [N, 3] array in (px, px, rad) units; rows of absent objects are exactly 0
    """
    eps = cfg.fd_eps if eps is None else eps
    if eps <= 0:
        raise ValueError("finite-difference step must be > 0")
    if blurred_x is None:
        blurred_x = blur(np.asarray(x, dtype=np.float64), cfg)
    base = renderer_log_likelihood(x, scene, cfg, blurred_x)
    grad = np.zeros((len(scene.present), 3))
    for i, present in enumerate(scene.present):
        if not present:
            continue
        for k in range(3):
            pose = [list(row) for row in scene.pose]
            pose[i][k] += eps
            moved = SceneSpec(scene.present, scene.identity, pose)
            grad[i, k] = (renderer_log_likelihood(x, moved, cfg, blurred_x) - base) / eps
    return grad


def _pool_map(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def normalized_to_pixels(pose: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """(u, v, theta) with u, v in [-1, 1] -> (x_px, y_px, theta)."""
    pose = np.array(pose, dtype=np.float64)
    pose[..., 0] = (pose[..., 0] + 1.0) * 0.5 * (cfg.canvas_w - 1)
    pose[..., 1] = (pose[..., 1] + 1.0) * 0.5 * (cfg.canvas_h - 1)
    return pose


def pixels_to_normalized(pose: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    pose = np.array(pose, dtype=np.float64)
    pose[..., 0] = 2.0 * pose[..., 0] / (cfg.canvas_w - 1) - 1.0
    pose[..., 1] = 2.0 * pose[..., 1] / (cfg.canvas_h - 1) - 1.0
    return pose


def renderer_log_likelihood_op(
    images: np.ndarray,
    present: np.ndarray,
    identity: np.ndarray,
    pose: Tensor,
    cfg: RenderConfig,
) -> Tensor:
    """
    [B] blurred log-likelihoods as a tape op over normalized poses [B, N, 3].

    The backward pass runs fd_pose_grad per image and chains pixel units back to
    normalized coordinates.
    """
    blurred = [blur(img, cfg) for img in images]
    pixel_pose = normalized_to_pixels(pose.data, cfg)
    scenes = [
        SceneSpec(present[b].tolist(), identity[b].tolist(), pixel_pose[b].tolist())
        for b in range(len(images))
    ]
    values = np.array(
        _pool_map(lambda b: renderer_log_likelihood(images[b], scenes[b], cfg, blurred[b]), range(len(images)))
    )
    chain = np.array([0.5 * (cfg.canvas_w - 1), 0.5 * (cfg.canvas_h - 1), 1.0])

    def backward(g):
        grads = _pool_map(lambda b: fd_pose_grad(images[b], scenes[b], cfg, blurred_x=blurred[b]), range(len(images)))
        return (g[:, None, None] * np.stack(grads) * chain,)

    return Tensor.from_op(values, (pose,), backward, "renderer_log_likelihood")


# ----------------------------------------------------------------------
# Symmetry-aware metrics
# ----------------------------------------------------------------------


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


def angular_error(predicted: float, truth: float, identity: int, quotient: bool = True) -> float:
    """
    |predicted - truth| on the circle, optionally modulo the shape's symmetry group.

    Discs have continuous symmetry, so their quotient error is 0.
    """
    if not quotient:
        return float(abs(_wrap(predicted - truth)))
    order = SYMMETRY_ORDER[IDENTITIES[identity]]
    if order == 0:
        return 0.0
    period = 2.0 * np.pi / order
    diff = np.mod(predicted - truth, period)
    return float(min(diff, period - diff))


def match_objects(predicted: SceneSpec, truth: SceneSpec) -> List[Tuple[int, int, float]]:
    """Optimal pairing of present objects by pixel distance: (pred slot, truth slot, distance)."""
    pred = [i for i, p in enumerate(predicted.present) if p]
    true = [j for j, p in enumerate(truth.present) if p]
    if not pred or not true:
        return []
    cost = np.array(
        [[np.hypot(*(np.array(predicted.pose[i][:2]) - np.array(truth.pose[j][:2]))) for j in true] for i in pred]
    )
    rows, cols = linear_sum_assignment(cost)
    return [(pred[r], true[c], float(cost[r, c])) for r, c in zip(rows, cols)]


def scene_errors(predicted: SceneSpec, truth: SceneSpec) -> Dict[str, object]:
    """Count hit, per-object position errors, identity hits and angular errors."""
    pairs = match_objects(predicted, truth)
    return {
        "count_correct": predicted.count == truth.count,
        "position": [d for _, _, d in pairs],
        "identity": [predicted.identity[i] == truth.identity[j] for i, j, _ in pairs],
        "angle_quotient": [
            angular_error(predicted.pose[i][2], truth.pose[j][2], truth.identity[j], quotient=True)
            for i, j, _ in pairs
        ],
        "angle_raw": [
            angular_error(predicted.pose[i][2], truth.pose[j][2], truth.identity[j], quotient=False)
            for i, j, _ in pairs
        ],
    }


# ----------------------------------------------------------------------
# Amortized inference network
# ----------------------------------------------------------------------


@dataclass
class RasterStep:
    pres: np.ndarray
    identity: np.ndarray
    z_where: Tensor
    pose: Tensor
    log_q_pres: Tensor
    log_q_identity: Tensor
    log_q_where: Tensor
    pres_prob: np.ndarray
    identity_probs: np.ndarray

    def history_row(self) -> np.ndarray:
        one_hot = np.eye(len(IDENTITIES))[self.identity] * self.pres[:, None]
        return np.concatenate([self.pres[:, None], one_hot, self.z_where.data * self.pres[:, None]], axis=1)


@dataclass
class RasterInference:
    steps: List[RasterStep]
    scenes: List[SceneSpec]

    @property
    def present(self) -> np.ndarray:
        return np.stack([s.pres for s in self.steps], axis=1).astype(np.int64)

    @property
    def identity(self) -> np.ndarray:
        return np.stack([s.identity for s in self.steps], axis=1)

    @property
    def pose(self) -> Tensor:
        return stack([s.pose for s in self.steps], axis=1)

    @property
    def log_q(self) -> Tensor:
        total = None
        for s in self.steps:
            term = s.log_q_pres + (s.log_q_identity + s.log_q_where) * s.pres
            total = term if total is None else total + term
        return total


@dataclass
class RasterElbo:
    elbo: np.ndarray
    surrogate: Tensor
    baseline_loss: Tensor
    inference: RasterInference


class RasterAIR(Module):
    """
    Plain tanh recurrence over (image, previous step's latents).

    Each step emits a presence logit, identity logits and a Gaussian over the pose
    latent (u, v, a, b): normalized position plus a rotation vector whose direction
    gives theta = atan2(a, b). Angles either side of +-pi share one neighbourhood of
    the latent, so the posterior never straddles the wrap.
    """

    def __init__(self, cfg: RenderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.canvas = (cfg.canvas_h, cfg.canvas_w)
        pixels = cfg.canvas_h * cfg.canvas_w
        k = len(IDENTITIES)
        self.feedback_size = 1 + k + 4
        self.history_size = 1 + k + 4
        self.core = RNNCell(pixels + self.feedback_size, cfg.hidden_size, rng, "core")
        self.pres_head = Linear(cfg.hidden_size, 1, rng, "pres_head")
        self.identity_head = Linear(cfg.hidden_size, k, rng, "identity_head")
        self.where_head = Linear(cfg.hidden_size, 8, rng, "where_head")
        self.baseline = Baseline(pixels, self.history_size, cfg.max_objects, rng, cfg.baseline_hidden)
        self.where_head.weight.data = self.where_head.weight.data * 0.01
        self.where_head.bias.data = np.concatenate([[0.0, 0.0, 0.0, 1.0], np.log(np.full(4, 0.3))])
        self.count_prior = binomial(cfg.max_objects, cfg.alpha)

    def model_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("baseline.")]

    def baseline_parameters(self):
        return self.baseline.parameters()

    def _step(self, image: Tensor, feedback: Tensor, h: Tensor):
        h = self.core(join(flatten_images(image), feedback), h)
        where_out = self.where_head(h)
        return (
            BernoulliParams(self.pres_head(h)[:, 0]),
            CategoricalParams(self.identity_head(h)),
            GaussianParams(where_out[:, :4], where_out[:, 4:]),
            h,
        )

    @staticmethod
    def pose_from_where(z_where: Tensor) -> Tensor:
        """[B, 4] (u, v, a, b) -> [B, 3] (u, v, theta)."""
        return join(z_where[:, 0:2], atan2(z_where[:, 2:3], z_where[:, 3:4]))

    @staticmethod
    def where_from_pose(pose: np.ndarray) -> np.ndarray:
        """[..., 3] normalized (u, v, theta) -> [..., 4] with a unit rotation vector."""
        pose = np.asarray(pose, dtype=np.float64)
        return np.concatenate([pose[..., 0:2], np.sin(pose[..., 2:3]), np.cos(pose[..., 2:3])], axis=-1)

    def _feedback(self, pres: np.ndarray, identity: np.ndarray, pose: Tensor) -> Tensor:
        one_hot = np.eye(len(IDENTITIES))[identity] * pres[:, None]
        theta = pose[:, 2:3]
        return join(
            Tensor(np.concatenate([pres[:, None], one_hot], axis=1)),
            pose[:, 0:2] * pres[:, None],
            sin(theta) * pres[:, None],
            cos(theta) * pres[:, None],
        )

    def infer_scene(
        self,
        x,
        rng: Optional[np.random.Generator] = None,
        deterministic: bool = False,
        forced: Optional[Sequence[SceneSpec]] = None,
    ) -> RasterInference:
        """
        Sample a scene per image.

        Args:
            x: [B, H, W] images
            rng: noise source (unused when deterministic)
            deterministic: presence prob > 0.5, most likely identity, mean pose
            forced: ground-truth scenes used instead of samples (supervised fitting);
                log q terms are then evaluated at the true latents

        Returns:
            RasterInference with per-step samples, log q terms and SceneSpecs in pixels
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != self.canvas:
            raise ValueError(f"image shape {x.shape[1:]} does not match render canvas {self.canvas}")
        if rng is None and not deterministic and forced is None:
            raise ValueError("stochastic inference needs an rng")
        batch, slots = x.shape[0], cfg.max_objects
        image = Tensor(x)
        h = self.core.initial_state(batch)
        feedback = Tensor(np.zeros((batch, self.feedback_size)))
        if forced is not None:
            true_where = self.where_from_pose(np.stack([pixels_to_normalized(np.array(t.pose), cfg) for t in forced]))
            true_pres = np.array([t.present for t in forced], dtype=np.float64)
            true_identity = np.array([t.identity for t in forced], dtype=np.int64)

        steps: List[RasterStep] = []
        for i in range(slots):
            pres_p, identity_p, where_p, h = self._step(image, feedback, h)
            if forced is not None:
                pres = true_pres[:, i]
                identity = true_identity[:, i]
                z_where = Tensor(true_where[:, i])
            elif deterministic:
                pres = (pres_p.probability > 0.5).astype(np.float64)
                identity = np.argmax(identity_p.probabilities, axis=-1)
                z_where = where_p.mean
            else:
                pres = bernoulli_sample(pres_p, rng.random(batch))
                identity = categorical_sample(identity_p, rng.random(batch))
                z_where = gaussian_sample_reparam(where_p, rng.standard_normal((batch, 4)))
            pose = self.pose_from_where(z_where)
            steps.append(
                RasterStep(
                    pres=pres,
                    identity=identity,
                    z_where=z_where,
                    pose=pose,
                    log_q_pres=discrete_log_pmf(pres, pres_p),
                    log_q_identity=discrete_log_pmf(identity, identity_p),
                    log_q_where=gaussian_log_pdf(z_where, where_p),
                    pres_prob=pres_p.probability,
                    identity_probs=identity_p.probabilities,
                )
            )
            feedback = self._feedback(pres, identity, pose)

        pixel_pose = normalized_to_pixels(np.stack([s.pose.data for s in steps], axis=1), cfg)
        scenes = []
        for b in range(batch):
            scene = SceneSpec(
                [int(s.pres[b]) for s in steps],
                [int(s.identity[b]) for s in steps],
                pixel_pose[b].tolist(),
            )
            for row in scene.pose:
                row[0] = float(np.clip(row[0], 0.0, cfg.canvas_w - 1))
                row[1] = float(np.clip(row[1], 0.0, cfg.canvas_h - 1))
            scenes.append(scene)
        return RasterInference(steps=steps, scenes=scenes)

    def log_prior(self, inference: RasterInference) -> Tensor:
        """[B] log p(z): per-slot Bernoulli(alpha), uniform identity, Gaussian pose latent."""
        cfg = self.cfg
        batch = inference.steps[0].pres.shape[0]
        # isotropic in (a, b), so theta is uniform a priori
        std = np.tile(np.asarray(cfg.where_prior_std, dtype=np.float64)[[0, 1, 2, 2]], (batch, 1))
        where_prior = GaussianParams(Tensor(np.zeros((batch, 4))), Tensor(np.log(std)))
        total = Tensor(np.zeros(batch))
        for s in inference.steps:
            log_pres = s.pres * np.log(cfg.alpha) + (1.0 - s.pres) * np.log(1.0 - cfg.alpha)
            log_identity = -np.log(len(IDENTITIES))
            total = total + Tensor(log_pres) + (gaussian_log_pdf(s.z_where, where_prior) + log_identity) * s.pres
        return total

    def elbo_and_surrogate(self, x, rng: np.random.Generator) -> RasterElbo:
        """
        Single-sample bound with the renderer likelihood.

        Pose gradients come from finite differences through the renderer op; presence
        and identity use score-function terms with per-step learned baselines.
        """
        x = np.asarray(x, dtype=np.float64)
        inference = self.infer_scene(x, rng)
        log_lik = renderer_log_likelihood_op(x, inference.present, inference.identity, inference.pose, self.cfg)
        ell = log_lik + self.log_prior(inference) - inference.log_q

        history = [s.history_row() for s in inference.steps]
        baseline_values = self.baseline(x, history)
        score_terms = None
        for i, s in enumerate(inference.steps):
            log_q_discrete = s.log_q_pres + s.log_q_identity * s.pres
            term = score_function_surrogate(log_q_discrete, ell, baseline_values[:, i])
            score_terms = term if score_terms is None else score_terms + term
        surrogate = -ell.mean() - score_terms.mean()
        return RasterElbo(
            elbo=ell.data.copy(),
            surrogate=surrogate,
            baseline_loss=baseline_loss(baseline_values, ell),
            inference=inference,
        )

    def supervised_loss(self, x, truths: Sequence[SceneSpec]) -> Tensor:
        """Negative conditional log-likelihood of canonicalized ground-truth scenes."""
        inference = self.infer_scene(x, forced=[t.canonical() for t in truths])
        return -inference.log_q.mean()


# ----------------------------------------------------------------------
# Baselines
# ----------------------------------------------------------------------


@dataclass
class DirectResult:
    scene: SceneSpec
    log_likelihood: float
    evaluations: int = 0
    history: List[float] = field(default_factory=list)


def _ascend_poses(
    x: np.ndarray,
    scene: SceneSpec,
    cfg: RenderConfig,
    blurred_x: np.ndarray,
) -> Tuple[SceneSpec, float, int]:
    """
    Normalized gradient ascent on all present poses with backtracking.

    A trial step is accepted only if the likelihood improves; otherwise the step
    halves. Starting at a stationary point therefore leaves the pose in place.
    """
    current = SceneSpec(scene.present, scene.identity, [list(r) for r in scene.pose])
    best = renderer_log_likelihood(x, current, cfg, blurred_x)
    step = cfg.opt_lr
    evaluations = 1
    scale = np.array([1.0, 1.0, 1.0 / max(cfg.object_size, 1.0)])
    for _ in range(cfg.opt_steps):
        if step < 1e-3:
            break
        grad = fd_pose_grad(x, current, cfg, blurred_x=blurred_x)
        evaluations += 1 + 3 * current.count
        peak = np.max(np.abs(grad))
        if peak == 0.0:
            break
        trial_pose = np.array(current.pose) + step * scale * grad / peak
        trial_pose[:, 0] = np.clip(trial_pose[:, 0], 0.0, cfg.canvas_w - 1)
        trial_pose[:, 1] = np.clip(trial_pose[:, 1], 0.0, cfg.canvas_h - 1)
        trial = SceneSpec(current.present, current.identity, trial_pose.tolist())
        value = renderer_log_likelihood(x, trial, cfg, blurred_x)
        evaluations += 1
        if value > best:
            current, best = trial, value
            step *= 1.2
        else:
            step *= 0.5
    return current, best, evaluations


def _configurations(slots: int):
    """Presence/identity multisets: each slot is absent or one of the identities."""
    options = range(len(IDENTITIES) + 1)
    for combo in combinations_with_replacement(options, slots):
        present = [1 if c > 0 else 0 for c in combo]
        identity = [c - 1 if c > 0 else 0 for c in combo]
        yield present, identity


def direct_optimize(
    x: np.ndarray,
    cfg: RenderConfig,
    restarts: int,
    rng: np.random.Generator,
    init: Optional[SceneSpec] = None,
) -> DirectResult:
    """
    Per-image maximum-likelihood search.

    Every presence/identity configuration is tried; per restart its poses start at
    random (or at `init` when it matches the configuration) and climb the
    finite-difference gradient. The best likelihood found wins.

    Raises:
        ValueError: if restarts < 1
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    blurred_x = blur(x, cfg)
    slots = cfg.max_objects
    best: Optional[DirectResult] = None
    evaluations = 0
    history: List[float] = []

    for present, identity in _configurations(slots):
        for r in range(restarts):
            if init is not None and r == 0 and sorted(zip(init.present, init.identity)) == sorted(zip(present, identity)):
                start = SceneSpec(init.present, init.identity, init.pose)
            else:
                half = cfg.position_range
                u = rng.uniform(-half, half, size=(slots, 2))
                theta = rng.uniform(-np.pi, np.pi, size=(slots, 1))
                start = SceneSpec(present, identity, normalized_to_pixels(np.hstack([u, theta]), cfg).tolist())
            if sum(start.present) == 0:
                scene, value, used = start, renderer_log_likelihood(x, start, cfg, blurred_x), 1
            else:
                scene, value, used = _ascend_poses(x, start, cfg, blurred_x)
            evaluations += used
            if best is None or value > best.log_likelihood:
                best = DirectResult(scene=scene, log_likelihood=value)
            history.append(value)
    best.evaluations = evaluations
    best.history = history
    return best


def supervised_train(
    images: np.ndarray,
    truths: Sequence[SceneSpec],
    cfg: RenderConfig,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    lr: float = 1e-3,
    clip_norm: float = 10.0,
    verbose: bool = False,
) -> RasterAIR:
    """
    Fit the recurrent body to ground-truth scenes by maximum conditional likelihood.

    Labels follow the canonical ordering (present objects sorted by x, then absent).
    """
    model = RasterAIR(cfg, rng)
    optimizer = Adam(model.model_parameters(), lr=lr)
    for step in range(1, steps + 1):
        index = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        optimizer.zero_grad()
        loss = model.supervised_loss(images[index], [truths[i] for i in index])
        loss.backward()
        clip_grad_norm(optimizer.params, clip_norm)
        optimizer.step()
        if verbose and step % 100 == 0:
            print(f"   ✓ supervised step {step}: nll={loss.item():.3f}")
    return model


def compare_methods(
    amortized: RasterAIR,
    supervised: Optional[RasterAIR],
    images: np.ndarray,
    truths: Sequence[SceneSpec],
    cfg: RenderConfig,
    restarts: int,
    rng: np.random.Generator,
    failure_px: float = 5.0,
) -> Dict[str, Dict[str, float]]:
    """
    Head-to-head harness: count accuracy, pose failure rate (> failure_px), median
    angular errors and mean seconds per image for each method.
    """
    def summarize(predicted: List[SceneSpec], seconds: float) -> Dict[str, float]:
        errors = [scene_errors(p, t) for p, t in zip(predicted, truths)]
        positions = [d for e in errors for d in e["position"]]
        failures = [
            1.0 if (not e["position"] or max(e["position"]) > failure_px) else 0.0
            for e, t in zip(errors, truths)
            if t.count > 0
        ]
        identities = [h for e in errors for h in e["identity"]]
        return {
            "count_accuracy": float(np.mean([e["count_correct"] for e in errors])),
            "pose_failure_rate": float(np.mean(failures)) if failures else 0.0,
            "median_position_px": float(np.median(positions)) if positions else 0.0,
            "identity_accuracy": float(np.mean(identities)) if identities else 0.0,
            "median_angle_quotient": float(np.median([a for e in errors for a in e["angle_quotient"]] or [0.0])),
            "median_angle_raw": float(np.median([a for e in errors for a in e["angle_raw"]] or [0.0])),
            "seconds_per_image": seconds / max(len(predicted), 1),
        }

    report = {}
    started = time.perf_counter()
    predicted = amortized.infer_scene(images, deterministic=True).scenes
    report["amortized"] = summarize(predicted, time.perf_counter() - started)

    started = time.perf_counter()
    predicted = [direct_optimize(img, cfg, restarts, rng).scene for img in images]
    report["direct"] = summarize(predicted, time.perf_counter() - started)

    if supervised is not None:
        started = time.perf_counter()
        predicted = supervised.infer_scene(images, deterministic=True).scenes
        report["supervised"] = summarize(predicted, time.perf_counter() - started)
    return report
