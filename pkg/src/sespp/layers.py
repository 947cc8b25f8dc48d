"""Parameterized layers: conv/BN/affine wrappers, SE, SPP, DenseNet and ResNet blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal container: named parameters, named buffers, train/eval flag."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def _own(self, kind: type) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, kind) and not isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._own(Tensor):
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._own(np.ndarray):
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self.children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(np.float32), tracked=True)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        fan_in = cin * k * k
        self.weight = _param(rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in))
        if bias:
            self.bias = _param(np.zeros(cout))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _param(rng.standard_normal((n_out, n_in)) * np.sqrt(1.0 / n_in))
        self.bias = _param(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.dense_affine(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# squeeze-excitation


def se_reduction(channels: int, reduction: int = 16) -> int:
    """Effective reduction ratio for ``channels``.

    Falls back to ``channels`` when the channel count is below the ratio, and
    otherwise to the largest divisor of ``channels`` not exceeding the ratio
    (which widens the bottleneck rather than truncating it).
    """
    if channels < reduction:
        return channels
    r = reduction
    while channels % r:
        r -= 1
    return r


def se_param_count(channels: int, reduction: int = 16) -> int:
    r = se_reduction(channels, reduction)
    hidden = channels // r
    return 2 * channels * hidden + channels + hidden


class SEBlock(Module):
    """Squeeze (global mean), reduce, expand, sigmoid gate, channel rescale."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16):
        self.channels = channels
        self.reduction = se_reduction(channels, reduction)
        hidden = channels // self.reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.bypass = False

    def excitation(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"SE block built for {self.channels} channels got input {x.shape}")
        z = T.global_avg_pool(x)
        return T.sigmoid(self.fc2(T.relu(self.fc1(z))))

    def forward(self, x: Tensor) -> Tensor:
        if self.bypass:
            if x.ndim != 4 or x.shape[1] != self.channels:
                raise ShapeError(f"SE block built for {self.channels} channels got input {x.shape}")
            return T.scale_channels(x, Tensor(np.ones(x.shape[:2], dtype=x.dtype)))
        return T.scale_channels(x, self.excitation(x))


# ---------------------------------------------------------------------------
# spatial pyramid pooling


@dataclass(frozen=True)
class SPPConfig:
    bins: tuple = (1, 2, 4)
    mode: str = "max"

    def __post_init__(self):
        if self.mode != "max":
            raise ValueError("only max pyramid pooling is supported")
        if not self.bins or any(b < 1 for b in self.bins):
            raise ValueError(f"invalid pyramid bins {self.bins}")

    @property
    def regions(self) -> int:
        return sum(b * b for b in self.bins)


def spp_forward(x: Tensor, cfg: SPPConfig) -> Tensor:
    """Fixed-length (B, C * sum(b^2)) vector; levels in order, channel-major within a level."""
    B, C, H, W = x.shape
    for b in cfg.bins:
        if H < b or W < b:
            raise ShapeError(f"SPP level {b}: feature map {H}x{W} has fewer than {b} rows/cols")
    levels = [T.region_max_pool(x, b) for b in cfg.bins]
    return levels[0] if len(levels) == 1 else T.concat_channels(levels)


class SPP(Module):
    def __init__(self, cfg: SPPConfig = SPPConfig()):
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        return spp_forward(x, self.cfg)


# ---------------------------------------------------------------------------
# DenseNet


class DenseLayer(Module):
    """BN-ReLU-Conv1x1(4k) then BN-ReLU-Conv3x3(k)."""

    def __init__(self, cin: int, growth: int, rng: np.random.Generator, bn_size: int = 4):
        self.norm1 = BatchNorm(cin)
        self.conv1 = Conv(cin, bn_size * growth, 1, rng)
        self.norm2 = BatchNorm(bn_size * growth)
        self.conv2 = Conv(bn_size * growth, growth, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(T.relu(self.norm1(x)))
        return self.conv2(T.relu(self.norm2(h)))


class DenseBlock(Module):
    def __init__(self, cin: int, num_layers: int, growth: int, rng: np.random.Generator):
        self.layers = [DenseLayer(cin + i * growth, growth, rng) for i in range(num_layers)]
        self.out_channels = cin + num_layers * growth

    def forward(self, x: Tensor) -> Tensor:
        features = [x]
        for layer in self.layers:
            inp = features[0] if len(features) == 1 else T.concat_channels(features)
            features.append(layer(inp))
        return T.concat_channels(features)


class Transition(Module):
    """BN-ReLU-Conv1x1 with compression 0.5, then 2x2 average pooling."""

    def __init__(self, cin: int, rng: np.random.Generator):
        self.out_channels = cin // 2
        self.norm = BatchNorm(cin)
        self.conv = Conv(cin, self.out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        if H % 2 or W % 2:
            raise ShapeError(f"transition needs even spatial dims, got {H}x{W}")
        return T.pool2d(self.conv(T.relu(self.norm(x))), "avg", 2, 2)


# ---------------------------------------------------------------------------
# ResNet


class ResidualBlock(Module):
    """Basic two-conv residual block with an optional 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        self.conv1 = Conv(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv(cout, cout, 3, rng, padding=1)
        self.bn2 = BatchNorm(cout)
        self.has_projection = stride != 1 or cin != cout
        if self.has_projection:
            self.proj_conv = Conv(cin, cout, 1, rng, stride=stride)
            self.proj_bn = BatchNorm(cout)
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        shortcut = self.proj_bn(self.proj_conv(x)) if self.has_projection else x
        if out.shape != shortcut.shape:
            raise ShapeError(f"residual branch {out.shape} vs shortcut {shortcut.shape}")
        return T.relu(T.add(out, shortcut))


def sequential(x: Tensor, modules: Sequence[Module]) -> Tensor:
    for m in modules:
        x = m(x)
    return x
