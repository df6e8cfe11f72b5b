"""Encoder-decoder mapping 20-channel EGM windows to Vm frames, with closed-form gradients."""

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from deapmap.errors import ShapeMismatchError

LOGGER = logging.getLogger(__name__)

MAX_PARAMETERS = 2_000_000


class ArchSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_channels: int = Field(20, ge=1)
    window: int = Field(96, ge=32)
    grid: int = Field(32, ge=8, multiple_of=8)
    temporal_channels: int = Field(8, ge=1)
    latent: int = Field(256, ge=1, le=512)
    decoder_channels: int = Field(64, ge=4)
    kernel1: int = 9
    stride1: int = 3
    kernel2: int = 5
    stride2: int = 2

    @classmethod
    def from_section(cls, section, n_channels: int = 20) -> "ArchSpec":
        return cls(
            n_channels=n_channels,
            window=section.window_ms,
            grid=section.grid,
            temporal_channels=section.temporal_channels,
            latent=section.latent,
            decoder_channels=section.decoder_channels,
        )

    @property
    def temporal_lengths(self) -> tuple[int, int]:
        l1 = (self.window - self.kernel1) // self.stride1 + 1
        l2 = (l1 - self.kernel2) // self.stride2 + 1
        return l1, l2


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.params = {"W": _glorot(rng, (n_in, n_out), n_in, n_out, dtype), "b": np.zeros(n_out, dtype=dtype)}

    def forward(self, x):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self.grads = {"W": self._x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T


class Conv1d(Layer):
    """Valid 1D convolution, input (N, C_in, L)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.params = {
            "W": _glorot(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel, dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }

    def forward(self, x):
        self._shape = x.shape
        windows = sliding_window_view(x, self.kernel, axis=2)[:, :, :: self.stride, :]
        self._windows = windows
        y = np.tensordot(windows, self.params["W"], axes=([1, 3], [1, 2]))
        return y.transpose(0, 2, 1) + self.params["b"][None, :, None]

    def backward(self, dy):
        W = self.params["W"]
        self.grads = {
            "W": np.tensordot(dy, self._windows, axes=([0, 2], [0, 2])),
            "b": dy.sum(axis=(0, 2)),
        }
        dx = np.zeros(self._shape, dtype=dy.dtype)
        n_out = dy.shape[2]
        span = self.stride * (n_out - 1) + 1
        for k in range(self.kernel):
            dx[:, :, k : k + span : self.stride] += np.tensordot(dy, W[:, :, k], axes=([1], [0])).transpose(0, 2, 1)
        return dx


class ConvTranspose2d(Layer):
    """Transposed convolution, input (N, C_in, H, W), weight (C_in, C_out, K, K)."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        kernel: int = 4,
        stride: int = 2,
        padding: int = 1,
        dtype=np.float64,
    ):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params = {
            "W": _glorot(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel, c_out * kernel * kernel, dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }

    def _full_shape(self, h: int, w: int) -> tuple[int, int]:
        return (h - 1) * self.stride + self.kernel, (w - 1) * self.stride + self.kernel

    def forward(self, x):
        self._x = x
        n, _, h, w = x.shape
        W = self.params["W"]
        fh, fw = self._full_shape(h, w)
        full = np.zeros((n, W.shape[1], fh, fw), dtype=x.dtype)
        s = self.stride
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                contrib = np.tensordot(x, W[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
                full[:, :, ki : ki + s * (h - 1) + 1 : s, kj : kj + s * (w - 1) + 1 : s] += contrib
        p = self.padding
        y = full[:, :, p : fh - p, p : fw - p]
        return y + self.params["b"][None, :, None, None]

    def backward(self, dy):
        x = self._x
        n, _, h, w = x.shape
        W = self.params["W"]
        fh, fw = self._full_shape(h, w)
        p = self.padding
        dfull = np.zeros((n, W.shape[1], fh, fw), dtype=dy.dtype)
        dfull[:, :, p : fh - p, p : fw - p] = dy
        dx = np.zeros_like(x)
        dW = np.zeros_like(W)
        s = self.stride
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                part = dfull[:, :, ki : ki + s * (h - 1) + 1 : s, kj : kj + s * (w - 1) + 1 : s]
                dx += np.tensordot(part, W[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
                dW[:, :, ki, kj] = np.tensordot(x, part, axes=([0, 2, 3], [0, 2, 3]))
        self.grads = {"W": dW, "b": dy.sum(axis=(0, 2, 3))}
        return dx


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y**2)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Reshape(Layer):
    def __init__(self, *tail: int):
        super().__init__()
        self.tail = tail

    def forward(self, x):
        self._shape = x.shape
        return x.reshape((-1,) + self.tail)

    def backward(self, dy):
        return dy.reshape(self._shape)


class DeapNet:
    """Per-electrode temporal convolutions -> cross-channel latent -> transposed-conv decoder."""

    def __init__(self, spec: ArchSpec | None = None, seed: int = 0, dtype=np.float64):
        self.spec = spec or ArchSpec()
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        s = self.spec
        # per-channel z-score statistics, filled from the training split
        self.channel_mean = np.zeros(s.n_channels)
        self.channel_std = np.ones(s.n_channels)
        self.manifest: dict = {}
        l1, l2 = s.temporal_lengths
        if l2 < 1:
            raise ValueError(f"window {s.window} too short for the temporal stack")
        start = s.grid // 8
        dc = s.decoder_channels
        self.layers: list[Layer] = [
            Reshape(1, s.window),
            Conv1d(1, s.temporal_channels, s.kernel1, s.stride1, rng, dtype),
            Tanh(),
            Conv1d(s.temporal_channels, s.temporal_channels, s.kernel2, s.stride2, rng, dtype),
            Tanh(),
            Reshape(s.n_channels * s.temporal_channels * l2),
            Dense(s.n_channels * s.temporal_channels * l2, s.latent, rng, dtype),
            Tanh(),
            Dense(s.latent, dc * start * start, rng, dtype),
            Tanh(),
            Reshape(dc, start, start),
            ConvTranspose2d(dc, dc // 2, rng, dtype=dtype),
            Tanh(),
            ConvTranspose2d(dc // 2, dc // 4, rng, dtype=dtype),
            Tanh(),
            ConvTranspose2d(dc // 4, 1, rng, dtype=dtype),
            Sigmoid(),
            Reshape(s.grid, s.grid),
        ]
        if self.n_parameters > MAX_PARAMETERS:
            raise ValueError(f"{self.n_parameters} parameters exceed the {MAX_PARAMETERS} budget")

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.spec.n_channels, self.spec.window

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{key}", layer.params[key]) for i, layer in enumerate(self.layers) for key in sorted(layer.params)]

    def named_gradients(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{key}", layer.grads[key]) for i, layer in enumerate(self.layers) for key in sorted(layer.params)]

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    @property
    def output_layer(self) -> ConvTranspose2d:
        return [layer for layer in self.layers if isinstance(layer, ConvTranspose2d)][-1]

    def zero_output_layer(self) -> None:
        for value in self.output_layer.params.values():
            value[...] = 0.0

    def normalise(self, traces: np.ndarray) -> np.ndarray:
        return (np.asarray(traces) - self.channel_mean[:, None]) / self.channel_std[:, None]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(f"expected input (batch, {self.input_shape[0]}, {self.input_shape[1]}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[start : start + batch_size]) for start in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.empty((0, self.spec.grid, self.spec.grid))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing weight blob '{name}'")
            if state[name].shape != value.shape:
                raise ShapeMismatchError(f"weight '{name}' has shape {state[name].shape}, expected {value.shape}")
            value[...] = state[name]


def forward(model: DeapNet, window: np.ndarray) -> np.ndarray:
    """One (n_channels, W) window -> one (G, G) frame in [0, 1]."""
    window = np.asarray(window)
    if window.shape != model.input_shape:
        raise ShapeMismatchError(f"expected window {model.input_shape}, got {window.shape}")
    if not np.isfinite(window).all():
        raise ValueError("input window contains non-finite values")
    return model.forward(window[None])[0]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


class Adam:
    def __init__(self, model: DeapNet, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p) for name, p in model.named_parameters()}
        self._v = {name: np.zeros_like(p) for name, p in model.named_parameters()}

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        grads = dict(self.model.named_gradients())
        for name, param in self.model.named_parameters():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def gradient_check(
    model: DeapNet,
    inputs: np.ndarray,
    targets: np.ndarray,
    n_samples: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences over sampled parameters."""
    pred = model.forward(inputs)
    _, dpred = mse_loss(pred, targets)
    model.backward(dpred)
    analytic = {name: grad.copy() for name, grad in model.named_gradients()}
    params = model.named_parameters()
    sizes = np.array([p.size for _, p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, value = params[which]
        index = np.unravel_index(int(flat - offsets[which]), value.shape)
        original = value[index]
        value[index] = original + h
        plus, _ = mse_loss(model.forward(inputs), targets)
        value[index] = original - h
        minus, _ = mse_loss(model.forward(inputs), targets)
        value[index] = original
        numeric = (plus - minus) / (2.0 * h)
        exact = analytic[name][index]
        scale = max(abs(numeric), abs(exact), 1e-7)
        worst = max(worst, abs(numeric - exact) / scale)
    return worst
