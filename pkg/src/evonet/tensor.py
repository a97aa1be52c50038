"""Dense numpy layers for the sequential conv denoisers the encoding produces.

Image batches are NCHW float64 arrays. Each layer keeps the activations it
needs for ``backward`` from the most recent ``forward`` call, so a layer
instance must not be shared between concurrently running forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class KernelTooLargeError(ShapeError):
    pass


class PadTooLargeError(ShapeError):
    pass


def conv2d_valid(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation without padding.

    Args:
        x: input batch ``[N, C, H, W]``.
        weight: filters ``[F, C, k, k]``.
        bias: per-filter offsets ``[F]``.

    Returns:
        ``[N, F, H - k + 1, W - k + 1]``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n_filters, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"weight expects {c_in} input channels, input has {x.shape[1]}")
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if bias.shape != (n_filters,):
        raise ShapeError(f"bias shape {bias.shape} does not match {n_filters} filters")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise KernelTooLargeError(f"kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, k, k
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_valid_backward(x, weight, grad_out):
    """Gradients of :func:`conv2d_valid` w.r.t. input, weight and bias."""
    k = weight.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, k, k
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k > 1:
        padded = np.pad(grad_out, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    else:
        padded = grad_out
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d_valid(padded, np.ascontiguousarray(flipped), np.zeros(weight.shape[1]))
    return grad_x, grad_w, grad_b


def reflect_pad(x: np.ndarray, p: int) -> np.ndarray:
    """Mirror-pad both spatial axes by ``p`` without repeating the edge row/column.

    Corners come from reflecting in both axes, so for a 3x3 input and
    ``p = 1`` the padded corner equals the input centre.
    """
    h, w = x.shape[2], x.shape[3]
    if p < 1:
        raise ValueError(f"pad size must be >= 1, got {p}")
    if p >= h or p >= w:
        raise PadTooLargeError(f"pad {p} requires input larger than {h}x{w}")
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def _reflect_index(n: int, p: int) -> np.ndarray:
    return np.pad(np.arange(n), p, mode="reflect")


def reflect_pad_backward(grad_out: np.ndarray, p: int) -> np.ndarray:
    """Route each padded position's gradient back to the element it copied."""
    n, c, hp, wp = grad_out.shape
    h, w = hp - 2 * p, wp - 2 * p
    rows = np.zeros((n, c, h, wp), dtype=grad_out.dtype)
    np.add.at(rows, (slice(None), slice(None), _reflect_index(h, p)), grad_out)
    grad_x = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    np.add.at(grad_x, (slice(None), slice(None), slice(None), _reflect_index(w, p)), rows)
    return grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mse_loss(denoised: np.ndarray, clean: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, and its gradient w.r.t. ``denoised``."""
    if denoised.shape != clean.shape:
        raise ShapeError(f"shape mismatch {denoised.shape} vs {clean.shape}")
    diff = denoised - clean
    count = diff.size
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def gaussian_init(shape, mean: float, std: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Normal(mean, std**2) samples; ``std == 0`` gives a constant array."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape)


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def config(self) -> dict:
        return {}


class Conv(Layer):
    kind = "conv"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise ShapeError(f"conv weight must be [F, C, k, k] with odd k, got {weight.shape}")
        if bias is None:
            bias = np.zeros(weight.shape[0])
        self.params = {"weight": weight, "bias": np.asarray(bias, dtype=np.float64)}
        self.zero_grad()
        self._x = None

    @property
    def kernel_size(self) -> int:
        return self.params["weight"].shape[2]

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_channels(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x):
        self._x = x
        return conv2d_valid(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = conv2d_valid_backward(self._x, self.params["weight"], grad)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size}


class ReflectPad(Layer):
    kind = "reflect_pad"

    def __init__(self, pad: int):
        super().__init__()
        if pad < 1:
            raise ValueError(f"pad size must be >= 1, got {pad}")
        self.pad = pad

    def forward(self, x):
        return reflect_pad(x, self.pad)

    def backward(self, grad):
        return reflect_pad_backward(grad, self.pad)

    def config(self):
        return {"pad": self.pad}


class BatchNorm(Layer):
    """Per-channel normalisation over the N, H, W axes.

    Running statistics follow ``running <- (1 - momentum) * running + momentum * batch``
    and are used in eval mode.
    """

    kind = "batch_norm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.zero_grad()
        self._cache = None

    @property
    def channels(self) -> int:
        return self.params["gamma"].shape[0]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
            self._cache = (x_hat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            x_hat = (x - self.buffers["running_mean"][None, :, None, None]) * inv_std[None, :, None, None]
            self._cache = None
        return gamma * x_hat + beta

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("batch norm backward requires a train-mode forward pass")
        x_hat, inv_std = self._cache
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        self.grads["gamma"] += np.sum(grad * x_hat, axis=(0, 2, 3))
        self.grads["beta"] += grad.sum(axis=(0, 2, 3))
        g_hat = grad * self.params["gamma"][None, :, None, None]
        mean_g = g_hat.sum(axis=(0, 2, 3))[None, :, None, None] / count
        mean_gx = np.sum(g_hat * x_hat, axis=(0, 2, 3))[None, :, None, None] / count
        return (g_hat - mean_g - x_hat * mean_gx) * inv_std[None, :, None, None]

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


LAYER_KINDS = {cls.kind: cls for cls in (Conv, ReflectPad, BatchNorm, ReLU)}


class Network:
    """Ordered layer stack with a shared train/eval mode."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self._check_chain()
        self.train()

    def _check_chain(self):
        channels = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if channels is not None and layer.in_channels != channels:
                    raise ShapeError(f"layer {i}: expects {layer.in_channels} channels, previous "
                                     f"layer produces {channels}")
                channels = layer.out_channels
            elif isinstance(layer, BatchNorm):
                if channels is not None and layer.channels != channels:
                    raise ShapeError(f"layer {i}: batch norm over {layer.channels} channels, previous "
                                     f"layer produces {channels}")
                channels = layer.channels

    @property
    def in_channels(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Conv):
                return layer.in_channels
            if isinstance(layer, BatchNorm):
                return layer.channels
        raise ValueError("network has no channel-bearing layer")

    @property
    def max_kernel(self) -> int:
        return max((l.kernel_size for l in self.layers if isinstance(l, Conv)), default=1)

    @property
    def mode(self) -> str:
        return "train" if self.layers and self.layers[0].training else "eval"

    def train(self):
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for layer in self.layers:
            layer.training = False
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """Yield ``(key, param, grad)`` for every trainable array, in layer order."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p, layer.grads[name]

    def num_trainable(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of parameters and buffers keyed ``"<layer>.<name>"``, in manifest order."""
        state = {}
        for i, layer in enumerate(self.layers):
            for name, arr in list(layer.params.items()) + list(layer.buffers.items()):
                state[f"{i}.{name}"] = arr.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    arr = np.asarray(state[f"{i}.{name}"], dtype=np.float64)
                    if arr.shape != store[name].shape:
                        raise ShapeError(f"{i}.{name}: expected {store[name].shape}, got {arr.shape}")
                    store[name] = arr.copy()
        self.zero_grad()


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``param`` in place."""
    state.step += 1
    t = state.step
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** t)
    v_hat = state.v / (1 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    network: Network
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self):
        for key, p, g in self.network.parameters():
            st = self.states.get(key)
            if st is None:
                st = self.states[key] = AdamState(np.zeros_like(p), np.zeros_like(p))
            adam_step(p, g, st, self.lr, self.beta1, self.beta2, self.eps)
