"""
Network building blocks and the optimizer on top of the tensor core.
"""

from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .tensor import Parameter, Tensor, concat, relu, sigmoid, tanh


class Module:
    """Base class: collects Parameters from attributes, nested modules and module lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into parameters by name.

        Raises:
            KeyError: if a parameter is missing from `state`
            ValueError: if an array's shape does not match its parameter
        """
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter '{name}'")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"parameter '{name}' has shape {p.shape}, checkpoint has {value.shape}")
            p.data = value.copy()

    def checksum(self) -> float:
        """Cheap fingerprint of all parameter values."""
        return float(sum(np.sum(p.data * (i + 1)) for i, p in enumerate(self.parameters())))


class Linear(Module):
    """y = x W + b with x of shape [batch, in_features]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = ""):
        scale = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, scale, size=(in_features, out_features)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of Linear layers with ReLU between them and no final activation."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str = ""):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, f"{name}.{i}") for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class GRUCell(Module):
    """Gated recurrent cell: update gate z, reset gate r, candidate n."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, name: str = ""):
        self.hidden_size = hidden_size
        self.input_map = Linear(input_size, 3 * hidden_size, rng, f"{name}.input")
        self.hidden_map = Linear(hidden_size, 3 * hidden_size, rng, f"{name}.hidden")

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        k = self.hidden_size
        gi = self.input_map(x)
        gh = self.hidden_map(h)
        z = sigmoid(gi[:, :k] + gh[:, :k])
        r = sigmoid(gi[:, k:2 * k] + gh[:, k:2 * k])
        n = tanh(gi[:, 2 * k:] + r * gh[:, 2 * k:])
        return (1.0 - z) * n + z * h


class RNNCell(Module):
    """Plain recurrence h' = tanh(x W + h U + b)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, name: str = ""):
        self.hidden_size = hidden_size
        self.input_map = Linear(input_size, hidden_size, rng, f"{name}.input")
        self.hidden_map = Linear(hidden_size, hidden_size, rng, f"{name}.hidden")

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return tanh(self.input_map(x) + self.hidden_map(h))


def flatten_images(x: Tensor) -> Tensor:
    """[B, H, W] -> [B, H*W]."""
    return x.reshape(x.shape[0], -1)


def join(*parts: Tensor) -> Tensor:
    return concat(parts, axis=1)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """
    Rescale gradients in place so their joint L2 norm is at most max_norm.

    Returns:
        The norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """
    Adaptive moment estimation over a fixed parameter list.

    Parameters whose grad is None at step time are left untouched.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad * p.grad
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        state = {f"{prefix}.t": np.array([float(self.t)])}
        for i, p in enumerate(self.params):
            state[f"{prefix}.m.{i}"] = self.m[i]
            state[f"{prefix}.v.{i}"] = self.v[i]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        if f"{prefix}.t" not in state:
            return
        self.t = int(state[f"{prefix}.t"][0])
        for i, p in enumerate(self.params):
            m = state.get(f"{prefix}.m.{i}")
            v = state.get(f"{prefix}.v.{i}")
            if m is not None and m.shape == p.shape:
                self.m[i] = m.copy()
            if v is not None and v.shape == p.shape:
                self.v[i] = v.copy()


