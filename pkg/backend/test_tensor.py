"""
Tests for the autodiff core, the network blocks and the AIRT parameter format.
"""

import os
import tempfile

import numpy as np

from app.checkpoint import CheckpointMismatch, load_parameters, save_parameters
from app.nn import MLP, Adam, GRUCell, clip_grad_norm
from app.tensor import (
    Parameter,
    ShapeError,
    Tensor,
    elementwise,
    exp,
    grad_check,
    log,
    matmul,
    relu,
    sigmoid,
    stop_gradient,
)


def test_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    y = sigmoid(x)
    y.backward()
    assert y.item() == 0.5
    assert abs(x.grad - 0.25) < 1e-15


def test_log_exp_inverse():
    assert abs(log(exp(Tensor(1.7))).item() - 1.7) < 1e-12


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    other = Tensor(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    error = grad_check(lambda t: elementwise("mul", t, other).sum(), x)
    assert error < 1e-6, error


def test_matmul_values():
    m = Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), m).data, m.data)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradients():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert grad_check(lambda t: matmul(t, b).square().sum(), a) < 1e-6
    assert grad_check(lambda t: matmul(a, t).square().sum(), b) < 1e-6


def test_matmul_rejects_mismatched_inner_dimension():
    try:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    except ShapeError as exc:
        assert "inner" in str(exc)
    else:
        raise AssertionError("expected ShapeError")


def test_elementwise_rejects_incompatible_shapes():
    try:
        elementwise("add", Tensor(np.ones((3, 4))), Tensor(np.ones((4, 3))))
    except ShapeError:
        pass
    else:
        raise AssertionError("expected ShapeError")


def test_polynomial_gradient_and_accumulation():
    x = Tensor(2.0, requires_grad=True)
    loss = x * x + 3.0 * x
    loss.backward()
    assert x.grad == 7.0
    (x * x + 3.0 * x).backward()
    assert x.grad == 14.0
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    try:
        (x * 2.0).backward()
    except ShapeError:
        pass
    else:
        raise AssertionError("expected ShapeError for non-scalar loss")


def test_mlp_parameter_gradients():
    rng = np.random.default_rng(11)
    mlp = MLP([4, 5, 3], rng, "mlp")
    x = Tensor(rng.normal(size=(6, 4)))
    for name, param in mlp.named_parameters():
        error = grad_check(lambda _: mlp(x).square().sum(), param, floor=1e-6)
        assert error < 1e-4, (name, error)


def test_gru_cell_gradients():
    rng = np.random.default_rng(2)
    cell = GRUCell(3, 4, rng, "core")
    x = Tensor(rng.normal(size=(2, 3)))
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    assert grad_check(lambda t: cell(x, cell(x, t)).square().sum(), h, floor=1e-6) < 1e-4


def test_grad_check_on_simple_functions():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8
    y = Tensor(rng.uniform(-2.0, 2.0, size=(5,)), requires_grad=True)
    assert grad_check(lambda t: sigmoid(sigmoid(t) * 2.0).sum(), y) < 1e-5


def test_grad_check_rejects_bad_eps():
    x = Tensor(np.ones(2), requires_grad=True)
    try:
        grad_check(lambda t: t.sum(), x, eps=0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def test_dead_relu_region_has_zero_gradient():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])


def test_stop_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (stop_gradient(x) * x).sum().backward()
    assert np.array_equal(x.grad, x.data)

    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    stop_gradient(y).sum().backward()
    assert y.grad is None or not np.any(y.grad)


def test_backward_is_linear():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(3, 2))

    def grad_of(build):
        x = Tensor(data, requires_grad=True)
        build(x).backward()
        return x.grad

    f = lambda x: sigmoid(x).sum()
    g = lambda x: (x * x * x).sum()
    combined = grad_of(lambda x: 2.0 * f(x) + 3.0 * g(x))
    assert np.allclose(combined, 2.0 * grad_of(f) + 3.0 * grad_of(g), rtol=1e-14, atol=1e-14)


def test_backward_is_deterministic():
    rng = np.random.default_rng(9)
    data = rng.normal(size=(4, 4))

    def run():
        x = Tensor(data, requires_grad=True)
        (matmul(sigmoid(x), x).square().mean()).backward()
        return x.grad

    assert np.array_equal(run(), run())


def test_bias_row_broadcasting():
    x = Tensor(np.ones((3, 2)))
    b = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    (x + b).sum().backward()
    assert np.array_equal(b.grad, [3.0, 3.0])


def test_clip_grad_norm():
    p = Parameter(np.zeros(2), "p")
    p.grad = np.array([3.0, 4.0])
    norm = clip_grad_norm([p], 1.0)
    assert norm == 5.0
    assert abs(np.linalg.norm(p.grad) - 1.0) < 1e-9


def test_adam_moves_against_gradient():
    p = Parameter(np.array([1.0, -1.0]), "p")
    optimizer = Adam([p], lr=0.1)
    p.grad = np.array([2.0, -2.0])
    optimizer.step()
    assert np.allclose(p.data, [0.9, -0.9])


def test_parameter_file_round_trip_and_corruption():
    arrays = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([1.25])}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "params.airt")
        save_parameters(path, arrays)
        loaded = load_parameters(path)
        assert sorted(loaded) == sorted(arrays)
        assert np.array_equal(loaded["a.weight"], arrays["a.weight"])

        with open(path, "r+b") as handle:
            handle.write(b"XXXX")
        try:
            load_parameters(path)
        except CheckpointMismatch as exc:
            assert "magic" in str(exc)
        else:
            raise AssertionError("expected CheckpointMismatch")

        try:
            load_parameters(os.path.join(tmp, "missing.airt"))
        except CheckpointMismatch:
            pass
        else:
            raise AssertionError("expected CheckpointMismatch for a missing file")


def main():
    tests = [value for name, value in sorted(globals().items()) if name.startswith("test_") and callable(value)]
    print("=" * 80)
    print(f"TENSOR CORE: {len(tests)} tests")
    print("=" * 80)
    for test in tests:
        test()
        print(f"  ✓ {test.__name__}")
    print("✅ ALL TESTS COMPLETE")


if __name__ == "__main__":
    main()
