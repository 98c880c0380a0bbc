"""
The 2D scene model and its recurrent inference networks.

Generative side: a count n from the truncated-geometric prior, one appearance code
z_what ~ N(0, I) and one pose z_where ~ N(mu, diag(sigma^2)) per object, each code
decoded into a glimpse, written onto the canvas at its pose and summed. Pixels are
Gaussian around the (unclamped) sum.

Inference side: AIR runs a gated recurrent core on the image and the previous step's
latents; DAIR instead feeds the core the error canvas between the partial
reconstruction and the image. Both run all N steps; the cumulative presence mask
m_i = m_{i-1} * z_pres^i switches off every step after the first zero.
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import CheckpointMismatch, load_parameters, save_parameters
from .config import ModelConfig
from .count_prior import CountPrior, truncated_geometric
from .estimators import (
    Baseline,
    BernoulliParams,
    GaussianParams,
    baseline_loss,
    bernoulli_sample,
    discrete_log_pmf,
    gaussian_log_pdf,
    gaussian_sample_reparam,
    score_function_surrogate,
)
from .nn import GRUCell, Linear, MLP, Module, flatten_images, join
from .spatial_transformer import attend, pose_from_where, write
from .tensor import Tensor, sigmoid, stack

LOG_TWO_PI = np.log(2.0 * np.pi)


@dataclass
class StepParams:
    """What one recurrent step emits before sampling."""

    pres: BernoulliParams
    where: GaussianParams
    h: Tensor


@dataclass
class StepLatent:
    """Samples and log-densities of one inference step, for a batch."""

    z_pres: np.ndarray
    live: np.ndarray
    mask: np.ndarray
    pres_prob: np.ndarray
    z_where: Tensor
    z_what: Tensor
    pose: Tensor
    log_q_pres: Tensor
    log_q_what: Tensor
    log_q_where: Tensor
    patch: Tensor
    written: Tensor

    def history_row(self) -> np.ndarray:
        """Detached [B, 1 + 3 + C] record (pres, where, what) for baselines; zero after the stop."""
        keep = self.mask[:, None]
        return np.concatenate([keep, self.z_where.data * keep, self.z_what.data * keep], axis=1)


@dataclass
class SceneLatent:
    """A batch of variable-length scenes: N executed steps plus the composed canvas."""

    steps: List[StepLatent]
    canvas: Tensor
    log_q: Tensor = field(repr=False)

    @property
    def counts(self) -> np.ndarray:
        return sum(step.mask for step in self.steps).astype(np.int64)

    @property
    def log_q_pres(self) -> Tensor:
        return sum_tensors([step.log_q_pres for step in self.steps])

    def poses(self) -> np.ndarray:
        """[B, N, 3] pose rows (s, tx, ty) of every step."""
        return np.stack([step.pose.data for step in self.steps], axis=1)

    def masks(self) -> np.ndarray:
        """[B, N] cumulative presence mask."""
        return np.stack([step.mask for step in self.steps], axis=1)

    def representation(self) -> np.ndarray:
        """Per-image features: concatenated (z_what, z_where, z_pres) of every step."""
        parts = []
        for step in self.steps:
            parts.extend([step.z_what.data, step.z_where.data, step.mask[:, None]])
        return np.concatenate(parts, axis=1)


@dataclass
class ElboResult:
    elbo: np.ndarray
    surrogate: Tensor
    baseline_loss: Tensor
    scene: SceneLatent


def sum_tensors(items: List[Tensor]) -> Tensor:
    total = items[0]
    for item in items[1:]:
        total = total + item
    return total


def _diag_gaussian(mean, std, batch: int) -> GaussianParams:
    mean = np.tile(np.asarray(mean, dtype=np.float64), (batch, 1))
    log_std = np.tile(np.log(np.asarray(std, dtype=np.float64)), (batch, 1))
    return GaussianParams(Tensor(mean), Tensor(log_std))


class AIRModel(Module):
    """
    Decoder, glimpse encoder, recurrent core and per-step baselines.

    `model_parameters()` and `baseline_parameters()` split the two optimizer groups.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.canvas = (cfg.canvas_h, cfg.canvas_w)
        self.glimpse = (cfg.glimpse_h, cfg.glimpse_w)
        pixels = cfg.canvas_h * cfg.canvas_w
        glimpse_pixels = cfg.glimpse_h * cfg.glimpse_w
        self.latent_size = 1 + 3 + cfg.code_size
        core_input = pixels if cfg.variant == "dair" else pixels + self.latent_size

        self.core = GRUCell(core_input, cfg.hidden_size, rng, "core")
        self.pres_head = Linear(cfg.hidden_size, 1, rng, "pres_head")
        self.where_head = Linear(cfg.hidden_size, 6, rng, "where_head")
        self.encoder = MLP([glimpse_pixels, cfg.mlp_hidden, 2 * cfg.code_size], rng, "encoder")
        self.decoder = MLP([cfg.code_size, cfg.mlp_hidden, glimpse_pixels], rng, "decoder")
        self.baseline = Baseline(pixels, self.latent_size, cfg.max_steps, rng, cfg.baseline_hidden)

        # Start near "object present" and near the pose prior.
        self.pres_head.bias.data = np.full(1, cfg.pres_init_bias)
        self.where_head.weight.data = self.where_head.weight.data * 0.01
        self.where_head.bias.data = np.concatenate(
            [np.asarray(cfg.where_prior_mean, dtype=np.float64), np.log(np.full(3, 0.1))]
        )
        self.prior: CountPrior = truncated_geometric(cfg.rho, cfg.max_steps)

    def model_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("baseline.")]

    def baseline_parameters(self):
        return self.baseline.parameters()

    def encode_patch(self, x_att: Tensor) -> GaussianParams:
        """Glimpse [B, gh, gw] -> Gaussian over the C-dim appearance code."""
        c = self.cfg.code_size
        out = self.encoder(flatten_images(x_att))
        return GaussianParams(out[:, :c], out[:, c:])

    def decode_patch(self, z_what: Tensor) -> Tensor:
        """Code [B, C] -> glimpse [B, gh, gw] with intensities in [0, 1]."""
        return sigmoid(self.decoder(z_what)).reshape(z_what.shape[0], *self.glimpse)

    def _heads(self, h: Tensor) -> StepParams:
        where_out = self.where_head(h)
        return StepParams(
            pres=BernoulliParams(self.pres_head(h)[:, 0]),
            where=GaussianParams(where_out[:, :3], where_out[:, 3:]),
            h=h,
        )

    def air_step(self, x: Tensor, h: Tensor, prev_latent: Tensor) -> StepParams:
        """One AIR recurrence: (omega_i, h_i) = R(x, z_{i-1}, h_{i-1})."""
        return self._heads(self.core(join(flatten_images(x), prev_latent), h))

    def dair_step(self, x: Tensor, partial_canvas: Tensor, h: Tensor) -> StepParams:
        """One DAIR recurrence on the error canvas partial_canvas - x."""
        delta = partial_canvas - x
        return self._heads(self.core(flatten_images(delta), h))

    def infer(
        self,
        x,
        rng: Optional[np.random.Generator] = None,
        deterministic: bool = False,
        forced_pres: Optional[np.ndarray] = None,
    ) -> SceneLatent:
        """
        Run all N steps and sample a scene for every image in the batch.

        Args:
            x: [B, H, W] images
            rng: noise source; all noise is drawn up front so forcing presence bits
                leaves the continuous samples unchanged
            deterministic: posterior mode for presence (prob > 0.5) and means for codes
            forced_pres: optional [B, N] presence bits overriding the sampled ones

        Returns:
            SceneLatent with masked log q terms and the composed canvas
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        batch = x.shape[0]
        steps = cfg.max_steps
        if x.shape[1:] != self.canvas:
            raise ValueError(f"image shape {x.shape[1:]} does not match model canvas {self.canvas}")
        if rng is None and not deterministic:
            raise ValueError("stochastic inference needs an rng")
        if deterministic:
            noise_where = np.zeros((steps, batch, 3))
            noise_what = np.zeros((steps, batch, cfg.code_size))
            uniforms = np.full((steps, batch), 0.5)
        else:
            noise_where = rng.standard_normal((steps, batch, 3))
            noise_what = rng.standard_normal((steps, batch, cfg.code_size))
            uniforms = rng.random((steps, batch))

        image = Tensor(x)
        h = self.core.initial_state(batch)
        canvas = Tensor(np.zeros_like(x))
        prev_latent = Tensor(np.zeros((batch, self.latent_size)))
        live = np.ones(batch)
        results: List[StepLatent] = []
        log_q_terms: List[Tensor] = []

        for i in range(steps):
            if cfg.variant == "dair":
                params = self.dair_step(image, canvas, h)
                source = image - canvas
            else:
                params = self.air_step(image, h, prev_latent)
                source = image
            h = params.h

            z_where = gaussian_sample_reparam(params.where, noise_where[i])
            pose = pose_from_where(z_where)
            what_params = self.encode_patch(attend(source, pose, *self.glimpse))
            z_what = gaussian_sample_reparam(what_params, noise_what[i])

            prob = params.pres.probability
            if forced_pres is not None:
                bits = np.asarray(forced_pres, dtype=np.float64)[:, i]
            elif deterministic:
                bits = (prob > 0.5).astype(np.float64)
            else:
                bits = bernoulli_sample(params.pres, uniforms[i])
            mask = live * bits

            log_q_pres = discrete_log_pmf(bits, params.pres) * live
            log_q_where = gaussian_log_pdf(z_where, params.where) * mask
            log_q_what = gaussian_log_pdf(z_what, what_params) * mask

            patch = self.decode_patch(z_what)
            written = write(patch, pose, *self.canvas)
            canvas = canvas + written * mask[:, None, None]

            results.append(
                StepLatent(
                    z_pres=bits,
                    live=live,
                    mask=mask,
                    pres_prob=prob,
                    z_where=z_where,
                    z_what=z_what,
                    pose=pose,
                    log_q_pres=log_q_pres,
                    log_q_what=log_q_what,
                    log_q_where=log_q_where,
                    patch=patch,
                    written=written,
                )
            )
            log_q_terms.extend([log_q_pres, log_q_where, log_q_what])
            prev_latent = join(Tensor(mask[:, None]), z_where, z_what)
            live = mask

        return SceneLatent(steps=results, canvas=canvas, log_q=sum_tensors(log_q_terms))

    def compose_scene(self, scene: SceneLatent) -> Tensor:
        """y = sum_i m_i * write(decode(z_what_i), pose_i); additive, unclamped."""
        batch = scene.steps[0].mask.shape[0]
        canvas = Tensor(np.zeros((batch,) + self.canvas))
        for step in scene.steps:
            written = write(self.decode_patch(step.z_what), step.pose, *self.canvas)
            canvas = canvas + written * step.mask[:, None, None]
        return canvas

    def log_likelihood(self, x, canvas: Tensor) -> Tensor:
        """[B] Gaussian log-density of x around the canvas with std sigma_x."""
        x = np.asarray(x, dtype=np.float64)
        sigma = self.cfg.sigma_x
        residual = (canvas - x).reshape(x.shape[0], -1)
        pixels = residual.shape[1]
        constant = -0.5 * pixels * (LOG_TWO_PI + 2.0 * np.log(sigma))
        return (residual * (1.0 / sigma)).square().sum(axis=1) * -0.5 + constant

    def log_joint(self, x, scene: SceneLatent) -> Tensor:
        """
        [B] log p(x, z, n): count prior + masked code/pose priors + pixel likelihood.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        terms = [Tensor(self.prior.log_pmf(scene.counts))]
        what_prior = _diag_gaussian(np.zeros(cfg.code_size), np.ones(cfg.code_size), batch)
        where_prior = _diag_gaussian(cfg.where_prior_mean, cfg.where_prior_std, batch)
        for step in scene.steps:
            prior_terms = gaussian_log_pdf(step.z_what, what_prior) + gaussian_log_pdf(
                step.z_where, where_prior
            )
            terms.append(prior_terms * step.mask)
        terms.append(self.log_likelihood(x, scene.canvas))
        return sum_tensors(terms)

    def elbo_and_surrogate(self, x, rng: np.random.Generator) -> ElboResult:
        """
        Single-sample ELBO and the two losses.

        The surrogate is -mean(l) - mean(sum_i log q(z_pres^i) * (l - b_i)) with
        l = log p(x, z, n) - log q(z, n | x); its gradient is the estimator of -dL.
        The baseline loss regresses b_i onto l wherever step i made a live decision.
        """
        x = np.asarray(x, dtype=np.float64)
        scene = self.infer(x, rng)
        ell = self.log_joint(x, scene) - scene.log_q

        history = [step.history_row() for step in scene.steps]
        baseline_values = self.baseline(x, history)
        score_terms = [
            score_function_surrogate(step.log_q_pres, ell, baseline_values[:, i])
            for i, step in enumerate(scene.steps)
        ]
        surrogate = -ell.mean() - sum_tensors(score_terms).mean()
        live = np.stack([step.live for step in scene.steps], axis=1)
        b_loss = baseline_loss(baseline_values, ell, weights=live)
        return ElboResult(elbo=ell.data.copy(), surrogate=surrogate, baseline_loss=b_loss, scene=scene)


def sample_scenes(model: AIRModel, n_samples: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Ancestral samples from the learned generative model.

    Returns:
        dict with "images" [S, H, W] (mean canvases), "counts" [S] and "poses" [S, N, 3]
    """
    cfg = model.cfg
    counts = model.prior.sample(rng, size=n_samples)
    canvas = np.zeros((n_samples,) + model.canvas)
    poses = np.zeros((n_samples, cfg.max_steps, 3))
    for i in range(cfg.max_steps):
        mask = (counts > i).astype(np.float64)
        z_what = Tensor(rng.standard_normal((n_samples, cfg.code_size)))
        z_where = np.asarray(cfg.where_prior_mean) + np.asarray(cfg.where_prior_std) * rng.standard_normal(
            (n_samples, 3)
        )
        pose = pose_from_where(Tensor(z_where))
        written = write(model.decode_patch(z_what), pose, *model.canvas)
        canvas += written.data * mask[:, None, None]
        poses[:, i] = pose.data
    return {"images": canvas, "counts": counts, "poses": poses}


def free_energy(
    model: AIRModel,
    images: np.ndarray,
    rng: np.random.Generator,
    samples: int = 1,
    batch_size: int = 64,
) -> float:
    """Monte Carlo estimate of -ELBO per image (nats), averaged over the set."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        for _ in range(samples):
            scene = model.infer(chunk, rng)
            ell = model.log_joint(chunk, scene).data - scene.log_q.data
            total += float(ell.sum())
    return -total / (len(images) * samples)


def save_model(model: Module, path: str) -> None:
    save_parameters(path, model.state_dict())


def load_model(model: Module, path: str) -> Module:
    """
    Load parameters saved by `save_model` into `model`.

    Raises:
        CheckpointMismatch: if names or shapes do not fit the model
    """
    state = load_parameters(path)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    return model


def write_latent_csv(path: str, scene: SceneLatent, first_index: int = 0) -> None:
    """One row per (image, step): pres, s, tx, ty, then the appearance code."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    code_size = scene.steps[0].z_what.shape[1]
    header = ["image", "step", "pres", "s", "tx", "ty"] + [f"what_{k}" for k in range(code_size)]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for b in range(scene.canvas.shape[0]):
            for i, step in enumerate(scene.steps):
                row = [first_index + b, i, int(step.mask[b])]
                row += [f"{v:.6g}" for v in step.pose.data[b]]
                row += [f"{v:.6g}" for v in step.z_what.data[b]]
                writer.writerow(row)


def stack_patches(scene: SceneLatent) -> np.ndarray:
    """[B, N, gh, gw] decoded glimpses."""
    return stack([step.patch for step in scene.steps], axis=1).data
