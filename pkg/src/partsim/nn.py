"""Minimal neural-network layers on numpy with explicit backward passes.

Every layer exposes ``forward(x, train)`` and ``backward(dy)``; trainable
arrays live in ``layer.params`` with matching entries in ``layer.grads``
after a backward pass, and non-trainable state (batch-norm running moments)
lives in ``layer.buffers``. Convolution and pooling delegate their inner
loops to the selected kernel backend.

Shapes follow the (batch, channels, mel, time) convention throughout.
"""

from __future__ import annotations

import numpy as np

from . import backend


class Layer:
    """Base class: stateless layers only need forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Stride-1 same-padded convolution without bias (batch norm follows)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float32):
        super().__init__()
        kh = kw = int(kernel_size)
        fan_in = in_channels * kh * kw
        scale = np.sqrt(2.0 / fan_in)  # He init for the ReLU stack
        w = rng.normal(0.0, scale, size=(out_channels, in_channels, kh, kw))
        self.params = {"w": w.astype(dtype)}
        self._x = None

    def forward(self, x, train):
        self._x = x
        return backend.conv2d_forward(x, self.params["w"])

    def backward(self, dy):
        dx, dw = backend.conv2d_backward(self._x, self.params["w"], dy)
        self.grads = {"w": dw}
        return dx


class BatchNorm2d(Layer):
    """Per-channel normalization, batch statistics in training and running
    statistics (momentum 0.1, biased variance) at evaluation time."""

    def __init__(self, num_channels, rng=None, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {
            "gamma": np.ones(num_channels, dtype=dtype),
            "beta": np.zeros(num_channels, dtype=dtype),
        }
        self.buffers = {
            "running_mean": np.zeros(num_channels, dtype=dtype),
            "running_var": np.ones(num_channels, dtype=dtype),
        }
        self._cache = None

    def forward(self, x, train):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] *= 1.0 - m
            self.buffers["running_mean"] += (m * mean).astype(x.dtype)
            self.buffers["running_var"] *= 1.0 - m
            self.buffers["running_var"] += (m * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads = {
            "gamma": (dy * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
            "beta": dy.sum(axis=(0, 2, 3)).astype(gamma.dtype),
        }
        scaled = dy * (gamma * inv_std)[None, :, None, None]
        if not train:
            return scaled
        # Batch statistics depend on x, so fold their gradients back in.
        mean_scaled = scaled.mean(axis=(0, 2, 3), keepdims=True)
        mean_proj = (scaled * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return scaled - mean_scaled - xhat * mean_proj


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Layer):
    """Non-overlapping square pooling; trailing rows/columns that do not
    fill a window are dropped."""

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)
        self._shape = None
        self._idx = None

    def forward(self, x, train):
        self._shape = x.shape
        y, self._idx = backend.maxpool2d_forward(x, self.size)
        return y

    def backward(self, dy):
        _, _, h, w = self._shape
        return backend.maxpool2d_backward(dy, self._idx, h, w)


class TimeAverage(Layer):
    """Mean over the time axis: (n, c, h, w) -> (n, c, h)."""

    def __init__(self):
        super().__init__()
        self._w = None

    def forward(self, x, train):
        self._w = x.shape[3]
        return x.mean(axis=3)

    def backward(self, dy):
        scale = np.asarray(1.0 / self._w, dtype=dy.dtype)
        return np.repeat((dy * scale)[..., None], self._w, axis=3)


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    """Affine map y = x @ w + b with Glorot-uniform init."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        limit = np.sqrt(6.0 / (in_features + out_features))
        w = rng.uniform(-limit, limit, size=(in_features, out_features))
        self.params = {
            "w": w.astype(dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }
        self._x = None

    def forward(self, x, train):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads = {
            "w": self._x.T @ dy,
            "b": dy.sum(axis=0),
        }
        return dy @ self.params["w"].T


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{name}", layer, name, value

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                state[f"{i}.{name}"] = value
            for name, value in layer.buffers.items():
                state[f"{i}.{name}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    value = state[f"{i}.{name}"]
                    if value.shape != store[name].shape:
                        raise ValueError(
                            f"shape mismatch for {i}.{name}: "
                            f"{value.shape} vs {store[name].shape}"
                        )
                    store[name] = value.astype(store[name].dtype)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, model: Sequential, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, layer, pname, param in self.model.named_params():
            grad = layer.grads.get(pname)
            if grad is None:
                raise RuntimeError(f"no gradient for parameter {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * grad * grad
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            param -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.asarray(self.t, dtype=np.int64)}
        for name, value in self.m.items():
            state[f"m.{name}"] = value
        for name, value in self.v.items():
            state[f"v.{name}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: v for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in state.items() if k.startswith("v.")}
