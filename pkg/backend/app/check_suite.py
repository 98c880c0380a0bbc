"""
Fast oracle suite behind `airctl.py check`.

Each check measures one property against an exact or numerical oracle and reports
the measured value next to its tolerance.
"""

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .air_model import AIRModel
from .config import ModelConfig, RenderConfig
from .count_prior import CountPrior, log_prob_unary, unary_code
from .estimators import (
    BernoulliParams,
    CategoricalParams,
    discrete_log_pmf,
    score_function_surrogate,
)
from .raster_inverse import SceneSpec, blur, fd_pose_grad, rasterize, renderer_log_likelihood
from .spatial_transformer import affine_grid, attend, bilinear_sample, write
from .tensor import Parameter, Tensor, elementwise, grad_check, log_softmax, matmul
from .toy_model import GLYPHS, EnumerableToyModel, ToyPosterior, blank_decoder_model, blank_log_evidence


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""


def _run(name: str, fn: Callable[[], tuple]) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, measured, tolerance, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        return CheckResult(name, False, float("nan"), float("nan"), time.perf_counter() - started, f"error: {exc}")
    return CheckResult(name, bool(passed), float(measured), float(tolerance), time.perf_counter() - started, detail)


# ----------------------------------------------------------------------
# Individual checks
# ----------------------------------------------------------------------


def check_op_gradients(seed: int = 0):
    rng = np.random.default_rng(seed)
    tolerance = 1e-6
    worst = 0.0
    for name in ("exp", "tanh", "sigmoid", "square", "sin", "cos"):
        x = Parameter(rng.normal(size=(3, 4)))
        worst = max(worst, grad_check(lambda t, n=name: elementwise(n, t).sum(), x))
    x = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    worst = max(worst, grad_check(lambda t: elementwise("log", t).sum(), x))
    run = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    worst = max(worst, grad_check(lambda t: elementwise("atan2", t, run).sum(), Parameter(rng.normal(size=(3, 4)))))
    worst = max(worst, grad_check(lambda t: elementwise("atan2", run, t).sum(), Parameter(rng.normal(size=(3, 4)))))
    a = Parameter(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 2))
    worst = max(worst, grad_check(lambda t: (matmul(t, b) * matmul(t, b)).sum(), a))
    logits = Parameter(rng.normal(size=(2, 5)))
    weights = rng.normal(size=(2, 5))
    worst = max(worst, grad_check(lambda t: (log_softmax(t) * weights).sum(), logits))
    return worst < tolerance, worst, tolerance, "elementwise, matmul, log_softmax"


def _tiny_config(variant: str = "air", max_steps: int = 2) -> ModelConfig:
    return ModelConfig(
        max_steps=max_steps,
        code_size=3,
        canvas_h=8,
        canvas_w=8,
        glimpse_h=4,
        glimpse_w=4,
        hidden_size=6,
        mlp_hidden=6,
        baseline_hidden=4,
        variant=variant,
    )


def _tiny_model(seed: int, variant: str = "air") -> AIRModel:
    return AIRModel(_tiny_config(variant), np.random.default_rng(seed))


def check_model_gradients(seeds: int = 20):
    """Pathwise gradients of the bound (presence fixed on) against central differences."""
    tolerance = 1e-3
    worst = 0.0
    for seed in range(seeds):
        model = _tiny_model(seed, "air" if seed % 2 == 0 else "dair")
        data_rng = np.random.default_rng(1000 + seed)
        x = data_rng.uniform(0.0, 1.0, size=(2, 8, 8))
        forced = np.ones((2, 2))

        def bound(_):
            scene = model.infer(x, np.random.default_rng(seed), forced_pres=forced)
            return (model.log_joint(x, scene) - scene.log_q).mean()

        for param in (
            model.decoder.layers[0].weight,
            model.encoder.layers[0].weight,
            model.core.input_map.weight,
            model.where_head.weight,
        ):
            worst = max(worst, grad_check(bound, param, floor=1e-4, max_entries=24, rng=data_rng))
    return worst < tolerance, worst, tolerance, f"{seeds} seeds, decoder/encoder/core/where"


def check_unary_codes(priors: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    tolerance = 1e-12
    worst = 0.0
    for _ in range(priors):
        max_count = int(rng.integers(1, 9))
        pmf = rng.dirichlet(np.ones(max_count + 1))
        pmf[-1] = 1.0 - pmf[:-1].sum()
        prior = CountPrior.from_pmf(pmf)
        probabilities = np.array([np.exp(log_prob_unary(unary_code(n, max_count), prior)) for n in range(max_count + 1)])
        worst = max(worst, float(np.max(np.abs(probabilities - prior.pmf))), abs(probabilities.sum() - 1.0))
    return worst < tolerance, worst, tolerance, f"{priors} random priors, N <= 8"


def _score_gradient_samples(kind: str, logits: np.ndarray, f: Callable, samples: int, rng, baseline: float):
    """Per-sample score-function gradients w.r.t. the logits, shape [samples, K]."""
    batch_logits = Tensor(np.tile(logits, (samples, 1)), requires_grad=True)
    # Stratified uniforms: each draw is still marginally uniform.
    u = rng.permutation((np.arange(samples) + rng.random(samples)) / samples)
    if kind == "bernoulli":
        params = BernoulliParams(batch_logits[:, 0])
        z = (u < params.probability).astype(np.float64)
    else:
        params = CategoricalParams(batch_logits)
        cdf = np.cumsum(params.probabilities, axis=1)
        z = np.minimum((u[:, None] >= cdf).sum(axis=1), logits.size - 1)
    values = f(z)
    surrogate = score_function_surrogate(discrete_log_pmf(z, params), values, np.full(samples, baseline))
    surrogate.sum().backward()
    return batch_logits.grad, values


def _exact_gradient(kind: str, logits: np.ndarray, f: Callable) -> np.ndarray:
    if kind == "bernoulli":
        p = 1.0 / (1.0 + np.exp(-logits[0]))
        return np.array([p * (1.0 - p) * (f(np.array([1.0]))[0] - f(np.array([0.0]))[0])])
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    values = f(np.arange(logits.size))
    expected = float(np.sum(probs * values))
    return probs * (values - expected)


TEST_FUNCTIONS = [
    ("bernoulli", np.array([-0.8]), lambda z: (z - 0.45) ** 2),
    ("bernoulli", np.array([0.4]), lambda z: 10.0 + 3.0 * z),
    ("bernoulli", np.array([1.2]), lambda z: np.exp(z)),
    ("categorical", np.array([0.3, -0.5, 1.0]), lambda z: np.array([1.0, 5.0, -2.0])[z.astype(int)] + 20.0),
    ("categorical", np.array([0.0, 0.7, -1.1, 0.2]), lambda z: (z - 1.0) ** 2 + 5.0),
]


def check_estimator_unbiasedness(samples: int = 20000, seed: int = 0):
    """Score-function means within 3 standard errors; baselines cut variance on >= 4 of 5."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    reduced = 0
    for kind, logits, f in TEST_FUNCTIONS:
        exact = _exact_gradient(kind, logits, f)
        plain, values = _score_gradient_samples(kind, logits, f, samples, rng, 0.0)
        standard_error = plain.std(axis=0) / np.sqrt(samples) + 1e-12
        worst = max(worst, float(np.max(np.abs(plain.mean(axis=0) - exact) / standard_error)))
        baseline = float(np.mean(values))
        with_baseline, _ = _score_gradient_samples(kind, logits, f, samples, rng, baseline)
        standard_error = with_baseline.std(axis=0) / np.sqrt(samples) + 1e-12
        worst = max(worst, float(np.max(np.abs(with_baseline.mean(axis=0) - exact) / standard_error)))
        reduced += int(with_baseline.var(axis=0).sum() < plain.var(axis=0).sum())
    passed = worst < 3.0 and reduced >= 4
    return passed, worst, 3.0, f"max deviation in standard errors; baseline reduced variance on {reduced}/5"


def check_elbo_bound(samples: int = 10000, seed: int = 0):
    rng = np.random.default_rng(seed)
    toy = EnumerableToyModel()
    x = GLYPHS[0] + rng.normal(0.0, 0.2, size=(2, 2))
    log_px = toy.log_evidence(x)
    q = ToyPosterior(pres_logit=0.3, what_logits=np.array([0.2, -0.1]))
    draws = toy.elbo_samples(x, q, samples, rng)
    standard_error = draws.std() / np.sqrt(samples)
    excess = (draws.mean() - log_px) / max(standard_error, 1e-12)
    exact_draws = toy.elbo_samples(x, toy.exact_posterior(x), 200, rng)
    gap = float(np.max(np.abs(exact_draws - log_px)))
    worst_excess, worst_gap = excess, gap
    for variant in ("air", "dair"):
        model_excess, model_gap = _blank_decoder_bound(variant, seed)
        worst_excess, worst_gap = max(worst_excess, model_excess), max(worst_gap, model_gap)
    passed = worst_excess <= 3.0 and worst_gap < 1e-9
    return passed, worst_excess, 3.0, f"bound excess in standard errors (toy, air, dair); exact-posterior gap {worst_gap:.2e}"


def _blank_decoder_bound(variant: str, seed: int, samples: int = 500):
    """Bound excess and exact-posterior gap of the full AIRModel with a blank decoder."""
    cfg = _tiny_config(variant, max_steps=1)
    x = np.repeat(np.random.default_rng(seed).uniform(size=(1, 8, 8)), samples, axis=0)
    loose = blank_decoder_model(cfg, np.random.default_rng(seed))
    log_px = float(blank_log_evidence(loose, x[:1])[0])
    draws = loose.elbo_and_surrogate(x, np.random.default_rng(seed + 1)).elbo
    standard_error = draws.std() / np.sqrt(samples)
    excess = (draws.mean() - log_px) / max(standard_error, 1e-12)
    matched = blank_decoder_model(cfg, np.random.default_rng(seed), prior_matched=True)
    exact_draws = matched.elbo_and_surrogate(x[:50], np.random.default_rng(seed + 2)).elbo
    gap = float(np.max(np.abs(exact_draws - log_px)))
    return float(excess), gap


def check_presence_bookkeeping(seed: int = 0):
    """exp(log q of the presence code) summed over all counts is 1 with fixed noise."""
    tolerance = 1e-9
    model = _tiny_model(seed)
    x = np.random.default_rng(seed).uniform(size=(1, 8, 8))
    steps = model.cfg.max_steps
    total = 0.0
    for n in range(steps + 1):
        forced = np.array([[1.0] * n + [0.0] * (steps - n)])
        scene = model.infer(x, np.random.default_rng(seed), forced_pres=forced)
        total += float(np.exp(scene.log_q_pres.data[0]))
    error = abs(total - 1.0)
    return error < tolerance, error, tolerance, f"N={steps}"


def check_transformer_identities(seed: int = 0):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(1, 9, 9))
    identity = np.array([[1.0, 0.0, 0.0]])
    worst = float(np.max(np.abs(attend(image, identity, 9, 9).data - image)))

    delta = np.zeros((1, 9, 9))
    delta[0, 4, 4] = 1.0
    shifted = bilinear_sample(delta, affine_grid(np.array([[1.0, -0.25, 0.0]]), 9, 9)).data
    expected = np.zeros((1, 9, 9))
    expected[0, 4, 5] = 1.0
    worst = max(worst, float(np.max(np.abs(shifted - expected))))

    smooth = np.exp(-0.05 * ((np.arange(12)[:, None] - 5.5) ** 2 + (np.arange(12)[None, :] - 5.0) ** 2))[None]
    pose = Parameter(np.array([[0.6, 0.1, -0.15]]))
    weights = rng.normal(size=(1, 5, 5))
    grad_error = grad_check(lambda p: (attend(smooth, p, 5, 5) * weights).sum(), pose)

    a = write(np.zeros((1, 4, 4)), np.array([[0.5, 0.0, 0.0]]), 9, 9).data
    worst = max(worst, float(np.max(np.abs(a))))
    passed = worst < 1e-12 and grad_error < 1e-3
    return passed, max(worst, grad_error), 1e-3, f"identity/shift max error {worst:.1e}, pose grad {grad_error:.1e}"


def check_renderer(seed: int = 0):
    cfg = RenderConfig(canvas_h=24, canvas_w=24, max_objects=2)
    square = SceneSpec([1, 0], [1, 0], [[11.3, 12.1, 0.0], [0.0, 0.0, 0.0]])
    turned = SceneSpec([1, 0], [1, 0], [[11.3, 12.1, np.pi / 2.0], [0.0, 0.0, 0.0]])
    x = rasterize(SceneSpec([1, 0], [1, 0], [[10.0, 12.0, 0.3], [0.0, 0.0, 0.0]]), cfg)
    symmetry = abs(renderer_log_likelihood(x, square, cfg) - renderer_log_likelihood(x, turned, cfg))
    rng = np.random.default_rng(seed)
    for identity, period in ((0, 1.9), (1, np.pi / 2.0), (2, 2.0 * np.pi / 3.0)):
        for theta in rng.uniform(-np.pi, np.pi, size=3):
            base = SceneSpec([1, 0], [identity, 0], [[11.3, 12.1, theta], [0.0, 0.0, 0.0]])
            spun = SceneSpec([1, 0], [identity, 0], [[11.3, 12.1, theta + period], [0.0, 0.0, 0.0]])
            symmetry = max(symmetry, float(np.max(np.abs(rasterize(base, cfg) - rasterize(spun, cfg)))))
    absent = float(np.max(np.abs(fd_pose_grad(x, square, cfg)[1])))
    constant = float(np.max(np.abs(blur(np.ones((24, 24)), cfg) - 1.0)))
    worst = max(symmetry, absent, constant)
    return worst < 1e-10, worst, 1e-10, "disc/square/triangle symmetry at random angles, absent-object gradient, blur normalization"


CHECKS = [
    ("op gradients", check_op_gradients),
    ("model pathwise gradients", check_model_gradients),
    ("unary code probabilities", check_unary_codes),
    ("score-function unbiasedness", check_estimator_unbiasedness),
    ("ELBO bound on exact-evidence models", check_elbo_bound),
    ("presence code bookkeeping", check_presence_bookkeeping),
    ("spatial transformer identities", check_transformer_identities),
    ("renderer properties", check_renderer),
]


def run_checks(names: Optional[List[str]] = None, verbose: bool = False) -> List[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        result = _run(name, fn)
        results.append(result)
        if verbose:
            mark = "✓" if result.passed else "❌"
            print(f"{mark} {name}: measured {result.measured:.3e} (tol {result.tolerance:.1e}, {result.seconds:.1f}s) {result.detail}")
    return results
