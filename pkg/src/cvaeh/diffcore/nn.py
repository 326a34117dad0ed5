"""Parameter containers and the layers the hypernetworks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Owns named parameters and buffers; children are discovered by attribute."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.asarray(b).copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], dtype=np.float64))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, parts[-1]


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init_scale: float = 1.0):
        self.weight = parameter(init_scale * he_uniform(rng, n_in, (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Fully connected stack with ReLU between layers and a linear output."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LSTM(Module):
    """Multi-layer LSTM over (batch, time, features); returns the last top-layer hidden state."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, num_layers: int = 2):
        self.hidden = hidden
        self.cells = []
        for layer in range(num_layers):
            width = n_in if layer == 0 else hidden
            scale = 1.0 / np.sqrt(hidden)
            w_x = parameter(rng.uniform(-scale, scale, size=(width, 4 * hidden)))
            w_h = parameter(rng.uniform(-scale, scale, size=(hidden, 4 * hidden)))
            bias = np.zeros(4 * hidden)
            bias[hidden:2 * hidden] = 1.0  # forget gate starts open
            self.cells.append(_LSTMCell(w_x, w_h, parameter(bias), hidden))

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.ndim != 3:
            raise ShapeError(f"LSTM: expected (batch, time, features), got {seq.shape}")
        batch, steps, _ = seq.shape
        inputs = [seq[:, t, :] for t in range(steps)]
        for cell in self.cells:
            h = Tensor(np.zeros((batch, self.hidden)))
            c = Tensor(np.zeros((batch, self.hidden)))
            outputs = []
            for x_t in inputs:
                h, c = cell(x_t, h, c)
                outputs.append(h)
            inputs = outputs
        return inputs[-1]


class _LSTMCell(Module):
    def __init__(self, w_x: Tensor, w_h: Tensor, bias: Tensor, hidden: int):
        self.w_x, self.w_h, self.bias = w_x, w_h, bias
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        n = self.hidden
        gates = x @ self.w_x + h @ self.w_h + self.bias
        i = T.sigmoid(gates[:, :n])
        f = T.sigmoid(gates[:, n:2 * n])
        g = T.tanh(gates[:, 2 * n:3 * n])
        o = T.sigmoid(gates[:, 3 * n:])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c


def coord_channels(height: int, width: int) -> np.ndarray:
    """Per-pixel (x, y) coordinates normalized to [-1, 1], shape (H, W, 2)."""
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1)


class CoordConv2d(Module):
    """3x3 'same' convolution over the input plus two appended coordinate channels."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3):
        self.kernel = kernel
        fan_in = (c_in + 2) * kernel * kernel
        self.weight = parameter(he_uniform(rng, fan_in, (kernel, kernel, c_in + 2, c_out)))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, _ = x.shape
        coords = Tensor(np.broadcast_to(coord_channels(h, w), (n, h, w, 2)))
        return T.conv2d(T.concat([x, coords], axis=3), self.weight, self.bias,
                        padding=self.kernel // 2)


class BatchNorm(Module):
    """Normalizes the last axis; batch statistics in training, running ones at inference."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = T.mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = T.mean(T.square(centered), axis=axes, keepdims=True)
            m = self.momentum
            count = int(np.prod([x.shape[a] for a in axes]))
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            self.running_mean = m * self.running_mean + (1 - m) * mu.data.reshape(-1)
            self.running_var = m * self.running_var + (1 - m) * unbiased
            normed = centered / T.sqrt(var + self.eps)
        else:
            normed = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed * self.gamma + self.beta
