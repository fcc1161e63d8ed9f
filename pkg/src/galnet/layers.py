"""Convolution, batch norm, fully connected layers and the position
squeeze-excitation (PSE) gate. Layout is batch x height x width x channels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from galnet import autodiff as ad
from galnet.autodiff import Tensor
from galnet.errors import ContractError, DimensionError


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class Conv2dLayer:
    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if any(d < 1 for d in self.kernel.shape) or self.stride < 1 or self.padding < 0:
            raise ContractError(f"bad conv geometry: kernel {self.kernel.shape}, stride {self.stride}, padding {self.padding}")

    @classmethod
    def create(cls, rng, kh: int, kw: int, cin: int, cout: int, *, bias=True, stride=1, padding=0):
        kernel = Tensor(he_normal(rng, (kh, kw, cin, cout), kh * kw * cin), requires_grad=True)
        b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        return cls(kernel, b, stride, padding)

    def params(self) -> dict[str, Tensor]:
        out = {"kernel": self.kernel}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self)


def conv2d_forward(x: Tensor, layer: Conv2dLayer) -> Tensor:
    return ad.conv2d(x, layer.kernel, layer.bias, layer.stride, layer.padding)


@dataclass
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            epsilon,
        )

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, mode: str = "train", update_stats: bool = True) -> Tensor:
        return batchnorm_forward(x, self, mode, update_stats)


def batchnorm_forward(x: Tensor, layer: BatchNormLayer, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Train mode normalizes with batch statistics (biased variance) and,
    unless ``update_stats`` is off, folds them into the running estimates.
    Infer mode uses the running estimates and mutates nothing."""
    if x.shape[-1] != layer.gamma.shape[0]:
        raise DimensionError(f"batchnorm: input {x.shape} vs {layer.gamma.shape[0]} channels")
    if mode == "infer":
        return ad.channel_affine(x, layer.gamma, layer.beta, layer.running_mean, layer.running_var, layer.epsilon)
    if mode != "train":
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    n = x.size // x.shape[-1]
    if n < 2:
        raise ContractError("batchnorm in train mode needs at least 2 values per channel")
    out, mu, var = ad.batch_norm(x, layer.gamma, layer.beta, layer.epsilon)
    if update_stats:
        m = layer.momentum
        layer.running_mean = m * layer.running_mean + (1 - m) * mu
        layer.running_var = m * layer.running_var + (1 - m) * var * (n / (n - 1))
    return out


@dataclass
class LinearLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng, din: int, dout: int, std: float | None = None):
        scale = np.sqrt(1.0 / din) if std is None else std
        return cls(
            Tensor(rng.standard_normal((din, dout)) * scale, requires_grad=True),
            Tensor(np.zeros(dout), requires_grad=True),
        )

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self)


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {layer.weight.shape}")
    y = ad.matmul(x, layer.weight)
    return ad.add(y, ad.broadcast_to(layer.bias, y.shape))


def position_average_pool(x: Tensor) -> Tensor:
    """Mean over channels at every spatial position: B x H x W x 1."""
    if x.data.ndim != 4:
        raise DimensionError(f"position_average_pool: expected B x H x W x C, got {x.shape}")
    return ad.mean(x, axes=-1, keepdims=True)


@dataclass
class PseModule:
    """Spatial gate: channel-mean map -> conv -> relu -> conv -> sigmoid."""

    conv1: Conv2dLayer
    conv2: Conv2dLayer
    hidden: int = field(init=False)

    def __post_init__(self):
        self.hidden = self.conv1.kernel.shape[3]
        if self.conv1.kernel.shape[2] != 1 or self.conv2.kernel.shape[3] != 1:
            raise ContractError("PSE mask path must map 1 channel to 1 channel")

    @classmethod
    def create(cls, rng, hidden: int = 4, kernel: int = 3):
        pad = kernel // 2
        return cls(
            Conv2dLayer.create(rng, kernel, kernel, 1, hidden, padding=pad),
            Conv2dLayer.create(rng, kernel, kernel, hidden, 1, padding=pad),
        )

    def params(self) -> dict[str, Tensor]:
        out = {f"conv1.{k}": v for k, v in self.conv1.params().items()}
        out.update({f"conv2.{k}": v for k, v in self.conv2.params().items()})
        return out

    def mask(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.conv2(ad.relu(self.conv1(position_average_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return pse_forward(x, self)


def pse_forward(x: Tensor, module: PseModule) -> Tensor:
    m = module.mask(x)
    if m.shape[:3] != x.shape[:3]:
        raise DimensionError(f"PSE mask {m.shape} does not cover input {x.shape}")
    return ad.mul(x, ad.broadcast_to(m, x.shape))
