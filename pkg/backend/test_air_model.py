"""
Tests for the 2D scene model: recurrent steps, presence masking, composition, the
joint density, the bound and checkpoints. Also covers the enumerable toy model.
"""

import csv
import os
import tempfile
from dataclasses import replace

import numpy as np

from app.air_model import (
    AIRModel,
    SceneLatent,
    free_energy,
    load_model,
    sample_scenes,
    save_model,
    write_latent_csv,
)
from app.checkpoint import CheckpointMismatch
from app.config import ModelConfig
from app.tensor import Tensor
from app.toy_model import GLYPHS, EnumerableToyModel, ToyPosterior, blank_decoder_model, blank_log_evidence

TINY = ModelConfig(
    max_steps=3,
    code_size=3,
    canvas_h=8,
    canvas_w=8,
    glimpse_h=4,
    glimpse_w=4,
    hidden_size=6,
    mlp_hidden=6,
    baseline_hidden=4,
)


def _model(variant: str = "air", seed: int = 0) -> AIRModel:
    return AIRModel(replace(TINY, variant=variant), np.random.default_rng(seed))


def _images(batch: int = 2, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(batch, 8, 8))


def test_encode_patch_shapes_and_determinism():
    model = _model()
    glimpse = Tensor(np.random.default_rng(0).uniform(size=(5, 4, 4)))
    first, second = model.encode_patch(glimpse), model.encode_patch(glimpse)
    assert first.mean.shape == (5, 3) and first.log_std.shape == (5, 3)
    assert np.array_equal(first.mean.data, second.mean.data)


def test_decode_patch_is_squashed():
    model = _model()
    patches = model.decode_patch(Tensor(np.random.default_rng(2).normal(0.0, 3.0, size=(1000, 3)))).data
    assert patches.shape == (1000, 4, 4)
    assert patches.min() >= 0.0 and patches.max() <= 1.0


def test_bound_gradient_reaches_encoder():
    model = _model()
    result = model.elbo_and_surrogate(_images(4), np.random.default_rng(3))
    result.surrogate.backward()
    grad = model.encoder.layers[0].weight.grad
    assert grad is not None and np.any(grad != 0.0)
    assert all(p.grad is None for p in model.baseline_parameters())


def test_air_step_keeps_width_and_depends_on_previous_latents():
    model = _model()
    x = Tensor(_images(1))
    h = model.core.initial_state(1)
    before = model.air_step(x, h, Tensor(np.zeros((1, model.latent_size))))
    after = model.air_step(x, h, Tensor(np.ones((1, model.latent_size))))
    assert before.h.shape == (1, TINY.hidden_size)
    assert not np.allclose(before.pres.logit.data, after.pres.logit.data)
    assert not np.allclose(before.where.mean.data, after.where.mean.data)


def test_dair_step_sees_only_the_error_canvas():
    model = _model("dair")
    x = _images(1)
    h = model.core.initial_state(1)
    empty = model.dair_step(Tensor(x), Tensor(np.zeros_like(x)), h)
    doubled = model.dair_step(Tensor(2.0 * x), Tensor(x), h)
    assert np.allclose(empty.pres.logit.data, doubled.pres.logit.data)
    explained = model.dair_step(Tensor(x), Tensor(x), h)
    blank = model.dair_step(Tensor(np.zeros_like(x)), Tensor(np.zeros_like(x)), h)
    assert np.allclose(explained.where.mean.data, blank.where.mean.data)


def test_saturated_absence_gives_empty_scene():
    model = _model()
    model.pres_head.weight.data = np.zeros_like(model.pres_head.weight.data)
    model.pres_head.bias.data = np.array([-50.0])
    scene = model.infer(_images(3), np.random.default_rng(4))
    assert np.array_equal(scene.counts, [0, 0, 0])
    assert not np.any(scene.canvas.data)


def test_first_step_absent_keeps_only_first_presence_factor():
    model = _model()
    scene = model.infer(_images(2), np.random.default_rng(5), forced_pres=np.zeros((2, 3)))
    assert np.array_equal(scene.counts, [0, 0])
    assert not np.any(scene.canvas.data)
    assert np.allclose(scene.log_q.data, np.log(1.0 - scene.steps[0].pres_prob))


def test_full_budget_has_no_terminating_factor():
    model = _model()
    scene = model.infer(_images(2), np.random.default_rng(6), forced_pres=np.ones((2, 3)))
    expected = sum(np.log(step.pres_prob) for step in scene.steps)
    assert np.array_equal(scene.counts, [3, 3])
    assert np.allclose(scene.log_q_pres.data, expected, atol=1e-12)


def test_presence_masses_sum_to_one():
    for variant in ("air", "dair"):
        model = _model(variant, seed=7)
        x = _images(1, seed=8)
        total = 0.0
        for n in range(4):
            forced = np.array([[1.0] * n + [0.0] * (3 - n)])
            total += np.exp(model.infer(x, np.random.default_rng(9), forced_pres=forced).log_q_pres.data[0])
        assert abs(total - 1.0) < 1e-9, (variant, total)


def test_steps_after_first_absence_contribute_nothing():
    model = _model("dair")
    x = _images(2)
    a = model.infer(x, np.random.default_rng(10), forced_pres=np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]]))
    b = model.infer(x, np.random.default_rng(10), forced_pres=np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    assert np.array_equal(a.masks(), b.masks())
    assert np.array_equal(a.canvas.data, b.canvas.data)
    assert np.array_equal(a.log_q.data, b.log_q.data)
    assert np.array_equal(model.log_joint(x, a).data, model.log_joint(x, b).data)


def test_history_rows_are_empty_after_the_stop():
    model = _model()
    scene = model.infer(_images(), np.random.default_rng(27), forced_pres=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    rows = [step.history_row() for step in scene.steps]
    assert all(row.shape == (2, 1 + 3 + 3) for row in rows)
    assert np.any(rows[0][0, 1:])
    assert not np.any(rows[0][1]) and not np.any(rows[1]) and not np.any(rows[2])


def test_inference_is_reproducible():
    model = _model()
    x = _images(3)
    a = model.infer(x, np.random.default_rng(11))
    b = model.infer(x, np.random.default_rng(11))
    assert np.array_equal(a.canvas.data, b.canvas.data)
    assert np.array_equal(a.log_q.data, b.log_q.data)
    assert np.array_equal(a.poses(), b.poses())


def test_forced_presence_leaves_continuous_samples_unchanged():
    model = _model()
    x = _images(2)
    free = model.infer(x, np.random.default_rng(12))
    forced = model.infer(x, np.random.default_rng(12), forced_pres=np.ones((2, 3)))
    assert np.array_equal(free.steps[0].z_where.data, forced.steps[0].z_where.data)
    assert np.array_equal(free.steps[0].z_what.data, forced.steps[0].z_what.data)


def test_compose_scene():
    model = _model()
    x = _images(2)
    empty = model.infer(x, np.random.default_rng(13), forced_pres=np.zeros((2, 3)))
    assert not np.any(model.compose_scene(empty).data)

    single = model.infer(x, np.random.default_rng(13), forced_pres=np.array([[1.0, 0.0, 0.0]] * 2))
    assert np.allclose(model.compose_scene(single).data, single.steps[0].written.data)

    full = model.infer(x, np.random.default_rng(13), forced_pres=np.ones((2, 3)))
    composed = model.compose_scene(full).data
    assert np.allclose(composed, full.canvas.data)
    reversed_scene = SceneLatent(steps=full.steps[::-1], canvas=full.canvas, log_q=full.log_q)
    assert np.allclose(model.compose_scene(reversed_scene).data, composed)


def test_log_likelihood_at_zero_residual():
    model = _model()
    canvas = Tensor(_images(2))
    expected = -(64 / 2.0) * np.log(2.0 * np.pi * 0.3 ** 2)
    assert np.allclose(model.log_likelihood(canvas.data, canvas).data, expected)


def test_log_joint_of_empty_scene():
    model = _model()
    x = np.zeros((1, 8, 8))
    scene = model.infer(x, np.random.default_rng(14), forced_pres=np.zeros((1, 3)))
    expected = model.prior.log_pmf(0) - (64 / 2.0) * np.log(2.0 * np.pi * 0.3 ** 2)
    assert np.allclose(model.log_joint(x, scene).data, expected)


def test_elbo_and_surrogate_outputs():
    model = _model("dair")
    result = model.elbo_and_surrogate(_images(4), np.random.default_rng(15))
    assert result.elbo.shape == (4,)
    assert np.all(np.isfinite(result.elbo))
    assert result.surrogate.data.shape == ()
    assert result.baseline_loss.item() >= 0.0
    result.baseline_loss.backward()
    assert all(p.grad is not None for p in model.baseline_parameters())
    assert all(p.grad is None for p in model.model_parameters())


def test_deterministic_inference_needs_no_rng():
    model = _model()
    a = model.infer(_images(2), deterministic=True)
    b = model.infer(_images(2), deterministic=True)
    assert np.array_equal(a.canvas.data, b.canvas.data)
    for step in a.steps:
        assert np.array_equal(step.z_pres, (step.pres_prob > 0.5).astype(np.float64))


def test_infer_rejects_bad_inputs():
    model = _model()
    for call in (
        lambda: model.infer(np.zeros((1, 9, 8)), np.random.default_rng(0)),
        lambda: model.infer(np.zeros((1, 8, 8))),
    ):
        try:
            call()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


def test_sample_scenes():
    model = _model()
    samples = sample_scenes(model, 20, np.random.default_rng(16))
    assert samples["images"].shape == (20, 8, 8)
    assert samples["poses"].shape == (20, 3, 3)
    assert samples["counts"].max() <= 3
    assert not np.any(samples["images"][samples["counts"] == 0])


def test_free_energy_is_finite():
    model = _model()
    value = free_energy(model, _images(5), np.random.default_rng(17), samples=2, batch_size=2)
    assert np.isfinite(value)


def test_checkpoint_round_trip_and_mismatch():
    model = _model(seed=18)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "checkpoint.airt")
        save_model(model, path)
        restored = load_model(_model(seed=19), path)
        assert restored.checksum() == model.checksum()
        wider = AIRModel(replace(TINY, hidden_size=7), np.random.default_rng(0))
        try:
            load_model(wider, path)
        except CheckpointMismatch as exc:
            assert "shape" in str(exc)
        else:
            raise AssertionError("expected CheckpointMismatch")


def test_latent_csv_has_one_row_per_step():
    model = _model()
    scene = model.infer(_images(2), np.random.default_rng(20))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "latents.csv")
        write_latent_csv(path, scene, first_index=10)
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    assert rows[0][:6] == ["image", "step", "pres", "s", "tx", "ty"]
    assert len(rows) == 1 + 2 * 3
    assert rows[1][0] == "10" and rows[-1][0] == "11"


def test_toy_bound_never_exceeds_evidence():
    toy = EnumerableToyModel()
    rng = np.random.default_rng(21)
    x = GLYPHS[1] + rng.normal(0.0, 0.2, size=(2, 2))
    log_px = toy.log_evidence(x)
    q = ToyPosterior(pres_logit=-0.4, what_logits=np.array([0.5, 0.1]))
    assert toy.exact_elbo(x, q) <= log_px
    draws = toy.elbo_samples(x, q, 10000, rng)
    assert draws.mean() <= log_px + 3.0 * draws.std() / np.sqrt(len(draws))


def test_toy_exact_posterior_closes_the_gap():
    toy = EnumerableToyModel()
    x = np.array([[0.1, 0.9], [1.1, -0.05]])
    posterior = toy.exact_posterior(x)
    assert abs(toy.exact_elbo(x, posterior) - toy.log_evidence(x)) < 1e-9
    draws = toy.elbo_samples(x, posterior, 200, np.random.default_rng(22))
    assert np.max(np.abs(draws - toy.log_evidence(x))) < 1e-9


def _blank(variant: str, prior_matched: bool) -> AIRModel:
    return blank_decoder_model(replace(TINY, max_steps=1, variant=variant), np.random.default_rng(4), prior_matched)


def test_blank_decoder_model_with_prior_posteriors_attains_the_evidence():
    x = np.repeat(_images(1, seed=23), 40, axis=0)
    for variant in ("air", "dair"):
        model = _blank(variant, prior_matched=True)
        log_px = blank_log_evidence(model, x)
        assert np.allclose(log_px, log_px[0])
        result = model.elbo_and_surrogate(x, np.random.default_rng(24))
        assert 0 < result.scene.counts.sum() < len(x)
        assert np.max(np.abs(result.elbo - log_px)) < 1e-9


def test_blank_decoder_model_bound_stays_below_the_evidence():
    x = np.repeat(_images(1, seed=25), 600, axis=0)
    for variant in ("air", "dair"):
        model = _blank(variant, prior_matched=False)
        log_px = float(blank_log_evidence(model, x[:1])[0])
        draws = model.elbo_and_surrogate(x, np.random.default_rng(26)).elbo
        assert draws.mean() <= log_px + 3.0 * draws.std() / np.sqrt(len(draws))


def test_blank_decoder_model_needs_a_single_step():
    try:
        blank_decoder_model(TINY, np.random.default_rng(0))
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def main():
    tests = [value for name, value in sorted(globals().items()) if name.startswith("test_") and callable(value)]
    print("=" * 80)
    print(f"SCENE MODEL: {len(tests)} tests")
    print("=" * 80)
    for test in tests:
        test()
        print(f"  ✓ {test.__name__}")
    print("✅ ALL TESTS COMPLETE")


if __name__ == "__main__":
    main()
