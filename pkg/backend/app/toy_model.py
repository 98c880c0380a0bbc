"""
Models with exactly known evidence, used as oracles for the variational bound.

EnumerableToyModel: 2x2 canvas, at most one object, two glyph types, no pose. The
latent space is {empty, glyph 0, glyph 1}, so log p(x) and the exact posterior are
finite sums.

blank_decoder_model: a real one-step AIRModel whose decoder draws nothing, so the
canvas is empty whatever the latents and log p(x) is the pixel likelihood of a
blank canvas.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.special import expit, log_expit, log_softmax, logsumexp

from .air_model import AIRModel
from .config import ModelConfig
from .count_prior import truncated_geometric
from .tensor import Tensor

GLYPHS = np.array(
    [
        [[1.0, 0.0], [0.0, 1.0]],
        [[0.0, 1.0], [1.0, 0.0]],
    ]
)


@dataclass
class ToyPosterior:
    """q(n, k | x): presence logit and glyph-type logits."""

    pres_logit: float
    what_logits: np.ndarray

    def log_prob(self, n: int, k: int) -> float:
        if n == 0:
            return float(log_expit(-self.pres_logit))
        return float(log_expit(self.pres_logit) + log_softmax(self.what_logits)[k])

    def sample(self, rng: np.random.Generator) -> Tuple[int, int]:
        n = int(rng.random() < expit(self.pres_logit))
        if n == 0:
            return 0, -1
        k = int(rng.choice(len(self.what_logits), p=np.exp(log_softmax(self.what_logits))))
        return 1, k


class EnumerableToyModel:
    def __init__(self, rho: float = 0.5, sigma_x: float = 0.3):
        self.prior = truncated_geometric(rho, 1)
        self.sigma_x = sigma_x

    def outcomes(self) -> List[Tuple[int, int]]:
        return [(0, -1)] + [(1, k) for k in range(len(GLYPHS))]

    def render(self, n: int, k: int) -> np.ndarray:
        return GLYPHS[k].copy() if n else np.zeros((2, 2))

    def log_joint(self, x: np.ndarray, n: int, k: int) -> float:
        """log p(n) + log p(k | n) + log N(x; render, sigma^2 I)."""
        x = np.asarray(x, dtype=np.float64)
        residual = x - self.render(n, k)
        sigma = self.sigma_x
        log_lik = -0.5 * np.sum(residual ** 2) / sigma ** 2 - x.size * (
            np.log(sigma) + 0.5 * np.log(2.0 * np.pi)
        )
        log_what = -np.log(len(GLYPHS)) if n else 0.0
        return float(self.prior.log_pmf(n) + log_what + log_lik)

    def log_evidence(self, x: np.ndarray) -> float:
        """Exact log p(x) by summing over every latent configuration."""
        return float(logsumexp([self.log_joint(x, n, k) for n, k in self.outcomes()]))

    def exact_posterior(self, x: np.ndarray) -> ToyPosterior:
        """The ToyPosterior equal to p(n, k | x)."""
        log_p = self.log_evidence(x)
        p_empty = np.exp(self.log_joint(x, 0, -1) - log_p)
        what = np.array([self.log_joint(x, 1, k) for k in range(len(GLYPHS))])
        pres_logit = float(np.log1p(-p_empty) - np.log(p_empty))
        return ToyPosterior(pres_logit=pres_logit, what_logits=what - what.max())

    def elbo_samples(self, x: np.ndarray, q: ToyPosterior, count: int, rng: np.random.Generator) -> np.ndarray:
        """Single-sample bound values log p(x, z) - log q(z | x), one per draw."""
        values = np.empty(count)
        for i in range(count):
            n, k = q.sample(rng)
            values[i] = self.log_joint(x, n, k) - q.log_prob(n, k)
        return values

    def exact_elbo(self, x: np.ndarray, q: ToyPosterior) -> float:
        total = 0.0
        for n, k in self.outcomes():
            log_q = q.log_prob(n, k)
            total += np.exp(log_q) * (self.log_joint(x, n, k) - log_q)
        return float(total)


def blank_decoder_model(cfg: ModelConfig, rng: np.random.Generator, prior_matched: bool = False) -> AIRModel:
    """
    One-step AIRModel with a decoder that writes (numerically) zero.

    With prior_matched the presence, pose and code posteriors are set to their priors,
    so every single-sample bound equals log p(x) exactly. Otherwise the inference
    heads keep their random weights and the bound sits strictly below log p(x).
    """
    if cfg.max_steps != 1:
        raise ValueError("the blank-decoder oracle needs max_steps == 1")
    model = AIRModel(cfg, rng)
    last = model.decoder.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.full_like(last.bias.data, -60.0)
    if prior_matched:
        encoder = model.encoder.layers[-1]
        encoder.weight.data = np.zeros_like(encoder.weight.data)
        encoder.bias.data = np.zeros_like(encoder.bias.data)
        model.where_head.weight.data = np.zeros_like(model.where_head.weight.data)
        model.where_head.bias.data = np.concatenate(
            [np.asarray(cfg.where_prior_mean, dtype=np.float64), np.log(np.asarray(cfg.where_prior_std))]
        )
        p_empty, p_one = model.prior.pmf
        model.pres_head.weight.data = np.zeros_like(model.pres_head.weight.data)
        model.pres_head.bias.data = np.array([np.log(p_one) - np.log(p_empty)])
    return model


def blank_log_evidence(model: AIRModel, x: np.ndarray) -> np.ndarray:
    """[B] exact log p(x) of a blank_decoder_model."""
    x = np.asarray(x, dtype=np.float64)
    return model.log_likelihood(x, Tensor(np.zeros_like(x))).data
