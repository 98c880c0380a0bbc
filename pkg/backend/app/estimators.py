"""
Sampling distributions and stochastic gradient estimators.

Continuous latents use the path-wise (reparameterization) estimator: a sample is a
differentiable function of fixed noise. Discrete latents use the likelihood-ratio
(score-function) estimator through a surrogate whose gradient is
d log q * (learning_signal - baseline); learned baselines reduce its variance.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit, log_softmax as np_log_softmax

from .nn import MLP, Module
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    exp,
    log_softmax,
    mul,
    softplus,
    square,
    stop_gradient,
)

HALF_LOG_TWO_PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class GaussianParams:
    """Diagonal Gaussian; std = exp(log_std) so it is positive by construction."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ValueError(f"mean shape {self.mean.shape} != log_std shape {self.log_std.shape}")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


@dataclass
class BernoulliParams:
    """Bernoulli with probability sigmoid(logit)."""

    logit: Tensor

    def __post_init__(self):
        self.logit = as_tensor(self.logit)

    @property
    def probability(self) -> np.ndarray:
        return expit(self.logit.data)


@dataclass
class CategoricalParams:
    """Categorical over the last axis of `logits`."""

    logits: Tensor

    def __post_init__(self):
        self.logits = as_tensor(self.logits)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(np_log_softmax(self.logits.data, axis=-1))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]


def gaussian_sample_reparam(p: GaussianParams, noise) -> Tensor:
    """
    z = mean + exp(log_std) * noise, differentiable in mean and log_std.

    Raises:
        ValueError: if noise does not have the shape of the mean
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != p.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != mean shape {p.mean.shape}")
    return p.mean + exp(p.log_std) * noise


def gaussian_log_pdf(z, p: GaussianParams, axis: Optional[int] = -1) -> Tensor:
    """
    Log density summed over components.

    Args:
        z: sample, same shape as p.mean
        p: distribution parameters
        axis: axis summed over (-1 gives one value per row); None sums everything

    Returns:
        Sum of -0.5 log(2 pi) - log_std - 0.5 ((z - mean) / std)^2
    """
    z = as_tensor(z)
    if z.shape != p.mean.shape:
        raise ValueError(f"sample shape {z.shape} != mean shape {p.mean.shape}")
    standardized = (z - p.mean) * exp(-p.log_std)
    per_component = -HALF_LOG_TWO_PI - p.log_std - 0.5 * square(standardized)
    if axis is None or per_component.ndim == 0:
        return per_component.sum()
    return per_component.sum(axis=axis)


def bernoulli_sample(p: BernoulliParams, u) -> np.ndarray:
    """1 where u < sigmoid(logit), else 0; no gradient path through the sample."""
    u = np.asarray(u, dtype=np.float64)
    return (u < p.probability).astype(np.float64)


def categorical_sample(p: CategoricalParams, u) -> np.ndarray:
    """Inverse-CDF draw per row from uniform u in [0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    cdf = np.cumsum(p.probabilities, axis=-1)
    draws = (np.expand_dims(u, -1) >= cdf).sum(axis=-1)
    return np.minimum(draws, p.num_classes - 1).astype(np.int64)


def discrete_log_pmf(z, p: Union[BernoulliParams, CategoricalParams]) -> Tensor:
    """
    Differentiable log-mass of a discrete sample.

    Bernoulli: z * logit - softplus(logit). Categorical: log_softmax(logits)[z].

    Raises:
        ValueError: if z lies outside the support
    """
    z = np.asarray(z)
    if isinstance(p, BernoulliParams):
        if not np.all((z == 0) | (z == 1)):
            raise ValueError("Bernoulli sample must be 0 or 1")
        return mul(z.astype(np.float64), p.logit) - softplus(p.logit)
    if isinstance(p, CategoricalParams):
        k = p.num_classes
        if not np.all((z >= 0) & (z < k) & (z == np.floor(z))):
            raise ValueError(f"categorical sample outside support 0..{k - 1}")
        one_hot = np.eye(k)[z.astype(np.int64)]
        return (log_softmax(p.logits) * one_hot).sum(axis=-1)
    raise TypeError(f"unsupported distribution parameters {type(p).__name__}")


def score_function_surrogate(log_q: Tensor, learning_signal, baseline_value) -> Tensor:
    """
    log_q * (learning_signal - baseline_value) with both reals detached.

    The surrogate's value has no meaning; its gradient with respect to the parameters
    of q is the likelihood-ratio estimator term.
    """
    signal = stop_gradient(learning_signal).data
    baseline = stop_gradient(baseline_value).data
    return log_q * (signal - baseline)


class Baseline(Module):
    """
    Learned per-step estimate of the learning signal.

    Input is the image through a small feature MLP, concatenated with the latents
    sampled before the current step (zeros for steps not yet taken). All inputs are
    detached so the main objective never reaches these parameters.
    """

    def __init__(
        self,
        image_size: int,
        latent_size: int,
        steps: int,
        rng: np.random.Generator,
        hidden: int = 128,
    ):
        self.steps = steps
        self.latent_size = latent_size
        self.features = MLP([image_size, hidden], rng, "baseline.features")
        self.head = MLP([hidden + steps * latent_size, hidden, 1], rng, "baseline.head")

    def __call__(self, images: np.ndarray, step_latents: Sequence[np.ndarray]) -> Tensor:
        """
        Args:
            images: [B, H, W] pixels
            step_latents: one [B, latent_size] array per executed step

        Returns:
            [B, steps] baseline values, column i conditioned on steps < i
        """
        batch = images.shape[0]
        features = self.features(Tensor(images.reshape(batch, -1))).relu()
        history = np.zeros((batch, self.steps * self.latent_size))
        columns = []
        for i in range(self.steps):
            inputs = concat([features, Tensor(history)], axis=1)
            columns.append(self.head(inputs))
            if i < len(step_latents):
                start = i * self.latent_size
                history = history.copy()
                history[:, start:start + self.latent_size] = step_latents[i]
        return concat(columns, axis=1)


def baseline_loss(baseline_output: Tensor, learning_signal, weights=None) -> Tensor:
    """
    Mean squared error between baseline outputs and the detached learning signal.

    Args:
        baseline_output: [B] or [B, steps] baseline values
        learning_signal: [B] signal (broadcast across steps)
        weights: optional same-shape 0/1 mask of entries that count
    """
    signal = np.asarray(stop_gradient(learning_signal).data, dtype=np.float64)
    if baseline_output.ndim == 2 and signal.ndim == 1:
        signal = np.repeat(signal[:, None], baseline_output.shape[1], axis=1)
    residual = square(baseline_output - signal)
    if weights is None:
        return residual.mean()
    weights = np.asarray(weights, dtype=np.float64)
    return (residual * weights).sum() * (1.0 / max(1.0, float(weights.sum())))
