"""Dense tensors with tape-style reverse-mode differentiation.

Every differentiable primitive is a :class:`Function` subclass. Applying one to
tensors that track gradients records a node stamped with a monotonically
increasing index; :func:`backward` replays the reachable nodes in reverse
index order and then drops them.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Function",
    "Graph",
    "no_grad",
    "precision",
    "default_dtype",
    "backward",
    "grad_check",
    "add",
    "mul",
    "scale_channels",
    "relu",
    "sigmoid",
    "conv2d",
    "pool2d",
    "global_avg_pool",
    "dense_affine",
    "batchnorm2d",
    "concat_channels",
    "slice_channels",
    "region_max_pool",
    "flatten",
    "tensor_sum",
    "bce",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_state = threading.local()
_counter = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used when wrapping raw data in a Tensor."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "tracked", "_node", "name")

    def __init__(self, data, tracked: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.tracked = bool(tracked)
        self._node: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Function:
    """A recorded primitive. Subclasses implement ``forward`` and ``backward``.

    ``backward`` receives the gradient of the output and returns one gradient
    array (or None) per tensor operand, in operand order.
    """

    name = "function"

    def __init__(self, inputs: Sequence[Tensor]):
        self.inputs = tuple(inputs)
        self.index = -1

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls(tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        tracked = _grad_enabled() and any(t.tracked for t in tensors)
        result = Tensor(out, dtype=out.dtype)
        if tracked:
            result.tracked = True
            fn.index = next(_counter)
            result._node = fn
        return result


class Graph:
    """The recorded nodes reachable from one output, in execution order."""

    def __init__(self, entries: list):
        # entries: (node, output tensor) pairs sorted by node.index
        self.entries = entries

    @property
    def nodes(self) -> list:
        return [node for node, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, tuple] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen[id(node)] = (node, t)
            stack.extend(node.inputs)
        return cls(sorted(seen.values(), key=lambda e: e[0].index))

    def release(self) -> None:
        for node, out in self.entries:
            out._node = None
            node.__dict__.clear()
        self.entries = []


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf tensor.

    Intermediate tensors do not keep gradients; the graph is released
    afterwards so a second call on the same loss raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ValueError("loss does not depend on any tracked tensor")
    if graph is None:
        graph = Graph.trace(loss)
    if len(graph) == 0:
        raise ValueError("empty graph: backward was already run on this loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(graph.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.tracked:
                continue
            if t._node is None:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    graph.release()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    coords_per_input: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. Pass float64
    tensors for a stable comparison. ``coords_per_input`` samples that many
    coordinates from each input instead of checking all of them. Any NaN on
    either side yields ``inf``.
    """
    for t in inputs:
        t.tracked = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
            flat = t.data.reshape(-1)
            idx = np.arange(t.size)
            if coords_per_input is not None and t.size > coords_per_input:
                idx = np.sort(rng.choice(t.size, coords_per_input, replace=False))
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(fn(*inputs).data.reshape(-1)[0])
                flat[j] = orig - h
                fm = float(fn(*inputs).data.reshape(-1)[0])
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = analytic[j]
                if not (np.isfinite(a) and np.isfinite(numeric)):
                    return float("inf")
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b

    def backward(self, g):
        return g, g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class ScaleChannels(Function):
    """x[B,C,H,W] times a per-channel scale s[B,C] (or s[C]) broadcast over H,W."""

    name = "scale_broadcast"

    def forward(self, x, s):
        if x.ndim != 4:
            raise ShapeError(f"scale_broadcast: expected 4-d map, got {x.shape}")
        B, C = x.shape[:2]
        if s.shape == (C,):
            s4 = s.reshape(1, C, 1, 1)
        elif s.shape == (B, C):
            s4 = s.reshape(B, C, 1, 1)
        else:
            raise ShapeError(f"scale_broadcast: scale {s.shape} does not broadcast over {x.shape}")
        self.x, self.s4, self.s_shape = x, s4, s.shape
        return x * s4

    def backward(self, g):
        gx = g * self.s4
        gs = (g * self.x).sum(axis=(2, 3))
        if len(self.s_shape) == 1:
            gs = gs.sum(axis=0)
        return gx, gs


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    return ScaleChannels.apply(x, s)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# ---------------------------------------------------------------------------
# convolution and pooling


_IM2COL_MAX = 64


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


class Conv2d(Function):
    """Cross-correlation computed as a sum of kh*kw shifted channel contractions."""

    name = "conv2d"

    def forward(self, x, w, b=None, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
        B, Cin, H, W = x.shape
        Cout, Cw, kh, kw = w.shape
        if Cw != Cin:
            raise ShapeError(
                f"conv2d: input has {Cin} channels but weight {w.shape} expects {Cw}"
            )
        if b is not None and b.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({Cout},)")
        if stride < 1:
            raise ShapeError("conv2d: stride must be >= 1")
        if H + 2 * padding < kh or W + 2 * padding < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}+{padding}")
        Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp, self.w, self.has_bias = xp, w, b is not None
        self.geom = (stride, padding, Ho, Wo, H, W)
        self.cols = None
        if kh == 1 and kw == 1 and stride == 1:
            out = np.einsum("oc,bchw->bohw", w[:, :, 0, 0], xp, optimize=True)
        elif Cin * kh * kw <= _IM2COL_MAX:
            # few input channels: one matmul over an explicit patch matrix is faster
            cols = np.empty((Cin, kh, kw, B, Ho, Wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, i, j] = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                                       j : j + stride * (Wo - 1) + 1 : stride].transpose(1, 0, 2, 3)
            self.cols = cols.reshape(Cin * kh * kw, -1)
            out = (w.reshape(Cout, -1) @ self.cols).reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3)
            out = np.ascontiguousarray(out)
        else:
            out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
                    out += np.einsum("oc,bchw->bohw", w[:, :, i, j], xs, optimize=True)
        if b is not None:
            out += b.reshape(1, -1, 1, 1)
        return out

    def backward(self, g):
        stride, padding, Ho, Wo, H, W = self.geom
        xp, w = self.xp, self.w
        _, _, kh, kw = w.shape
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        if self.cols is not None:
            Cout = w.shape[0]
            gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, -1)
            gw = (gm @ self.cols.T).reshape(w.shape)
            B = g.shape[0]
            gcols = (w.reshape(Cout, -1).T @ gm).reshape(w.shape[1], kh, kw, B, Ho, Wo)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                        j : j + stride * (Wo - 1) + 1 : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
            return gx, gw, (g.sum(axis=(0, 2, 3)) if self.has_bias else None)
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + stride * (Ho - 1) + 1, stride),
                    slice(j, j + stride * (Wo - 1) + 1, stride),
                )
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
                gxp[sl] += np.einsum("oc,bohw->bchw", w[:, :, i, j], g, optimize=True)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if self.has_bias else None
        return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class Pool2d(Function):
    name = "pool2d"

    def forward(self, x, mode="max", window=2, stride=None, padding=0):
        if mode not in ("max", "avg"):
            raise ValueError(f"pool2d: unknown mode {mode!r}")
        if x.ndim != 4:
            raise ShapeError(f"pool2d: expected 4-d input, got {x.shape}")
        stride = window if stride is None else stride
        B, C, H, W = x.shape
        if window > H + 2 * padding or window > W + 2 * padding:
            raise ShapeError(f"pool2d: window {window} larger than spatial extent {H}x{W}")
        Ho, Wo = _out_size(H, window, stride, padding), _out_size(W, window, stride, padding)
        fill = -np.inf if mode == "max" else 0.0
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else x
        self.geom = (mode, window, stride, padding, Ho, Wo, x.shape, xp.shape)
        # (B, C, Ho, Wo, window*window) view in row-major window order
        win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, window * window)
        if mode == "max":
            self.arg = win.argmax(axis=-1)
            return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]
        return win.mean(axis=-1).astype(x.dtype)

    def backward(self, g):
        mode, window, stride, padding, Ho, Wo, xshape, pshape = self.geom
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + stride * (Ho - 1) + 1, stride),
                    slice(j, j + stride * (Wo - 1) + 1, stride),
                )
                if mode == "max":
                    gxp[sl] += g * (self.arg == i * window + j)
                else:
                    gxp[sl] += g / (window * window)
        H, W = xshape[2:]
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx,)


def pool2d(x: Tensor, mode: str = "max", window: int = 2, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    return Pool2d.apply(x, mode=mode, window=window, stride=stride, padding=padding)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
        self.xshape = x.shape
        return x.mean(axis=(2, 3), dtype=x.dtype)

    def backward(self, g):
        B, C, H, W = self.xshape
        return (np.broadcast_to((g / (H * W))[:, :, None, None], self.xshape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def spp_regions(n: int, bins: int) -> list:
    """Half-open [start, stop) index ranges splitting ``n`` into ``bins`` near-equal parts."""
    return [(i * n // bins, -((-(i + 1) * n) // bins)) for i in range(bins)]


class RegionMaxPool(Function):
    """Max over a bins x bins floor/ceil partition; output (B, C*bins*bins), channel-major."""

    name = "region_max_pool"

    def forward(self, x, bins=1):
        if x.ndim != 4:
            raise ShapeError(f"region_max_pool: expected 4-d input, got {x.shape}")
        B, C, H, W = x.shape
        if H < bins or W < bins:
            raise ShapeError(f"region_max_pool: {H}x{W} map is smaller than pyramid level {bins}")
        rows, cols = spp_regions(H, bins), spp_regions(W, bins)
        out = np.empty((B, C, bins, bins), dtype=x.dtype)
        self.picks = []
        for i, (h0, h1) in enumerate(rows):
            for j, (w0, w1) in enumerate(cols):
                region = x[:, :, h0:h1, w0:w1].reshape(B, C, -1)
                arg = region.argmax(axis=-1)
                out[:, :, i, j] = np.take_along_axis(region, arg[..., None], axis=-1)[..., 0]
                self.picks.append((i, j, h0 + arg // (w1 - w0), w0 + arg % (w1 - w0)))
        self.xshape, self.bins = x.shape, bins
        return out.reshape(B, C * bins * bins)

    def backward(self, g):
        B, C, H, W = self.xshape
        g4 = g.reshape(B, C, self.bins, self.bins)
        gx = np.zeros(self.xshape, dtype=g.dtype)
        bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        for i, j, r, c in self.picks:
            # regions overlap by at most one row/col, so accumulate
            np.add.at(gx, (bi, ci, r, c), g4[:, :, i, j])
        return (gx,)


def region_max_pool(x: Tensor, bins: int) -> Tensor:
    return RegionMaxPool.apply(x, bins=bins)


# ---------------------------------------------------------------------------
# affine maps and normalization


class DenseAffine(Function):
    name = "dense_affine"

    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"dense_affine: input {x.shape} incompatible with weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"dense_affine: bias {b.shape} != ({w.shape[0]},)")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, g):
        return g @ self.w, g.T @ self.x, g.sum(axis=0)


def dense_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return DenseAffine.apply(x, weight, bias)


class BatchNorm2d(Function):
    name = "batchnorm2d"

    def forward(self, x, gamma, beta, running_mean=None, running_var=None, training=True, momentum=0.1, eps=1e-5):
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
        B, C, H, W = x.shape
        n = B * H * W
        if training:
            if n < 2:
                raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean.reshape(1, C, 1, 1)
            var = (xc * xc).mean(axis=(0, 2, 3))
            if running_mean is not None:
                running_mean *= 1 - momentum
                running_mean += momentum * mean
                running_var *= 1 - momentum
                running_var += momentum * var * (n / (n - 1))
        else:
            mean, var = running_mean, running_var
            xc = x - mean.reshape(1, C, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * inv.reshape(1, C, 1, 1)
        self.xhat, self.inv, self.gamma, self.training, self.n = xhat, inv, gamma, training, n
        return xhat * gamma.reshape(1, C, 1, 1) + beta.reshape(1, C, 1, 1)

    def backward(self, g):
        C = g.shape[1]
        xhat, inv = self.xhat, self.inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * self.gamma.reshape(1, C, 1, 1)
        if self.training:
            m1 = gxhat.mean(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            gx = (gxhat - m1 - xhat * m2) * inv.reshape(1, C, 1, 1)
        else:
            gx = gxhat * inv.reshape(1, C, 1, 1)
        return gx, ggamma, gbeta


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    In training mode the running statistics (plain arrays, not tensors) are
    updated in place with the unbiased batch variance; in eval mode they are
    read and left untouched.
    """
    if not training and (running_mean is None or running_var is None):
        raise ValueError("batchnorm2d: eval mode needs running statistics")
    return BatchNorm2d.apply(
        x, gamma, beta,
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps,
    )


# ---------------------------------------------------------------------------
# structural


class ConcatChannels(Function):
    name = "concat_channels"

    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs:
            if x.ndim < 2 or x.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"concat_channels: {x.shape} does not match {ref} outside the channel axis")
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=1))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if len(inputs) == 0:
        raise ShapeError("concat_channels: no inputs")
    return ConcatChannels.apply(*inputs)


class SliceChannels(Function):
    name = "slice_channels"

    def forward(self, x, start=0, stop=None):
        self.xshape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, g):
        gx = np.zeros(self.xshape, dtype=g.dtype)
        gx[:, self.start : self.stop] = g
        return (gx,)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(x, start=start, stop=stop)


class Flatten(Function):
    name = "flatten"

    def forward(self, x):
        self.xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return (g.reshape(self.xshape),)


def flatten(x: Tensor) -> Tensor:
    return Flatten.apply(x)


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.xshape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype).reshape(())

    def backward(self, g):
        return (np.full(self.xshape, g, dtype=g.dtype),)


def tensor_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


BCE_CLAMP = 1e-7


class BinaryCrossEntropy(Function):
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].

    Clamped entries get zero gradient.
    """

    name = "bce"

    def forward(self, p, y):
        if p.shape != y.shape:
            raise ShapeError(f"bce: probabilities {p.shape} vs labels {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("bce: labels must be 0 or 1")
        pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
        self.pc, self.y = pc, y
        self.inside = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)
        loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
        return np.asarray(loss, dtype=p.dtype).reshape(())

    def backward(self, g):
        pc, y = self.pc, self.y
        gp = g * (-(y / pc) + (1 - y) / (1 - pc)) / pc.size
        return gp * self.inside, None


def bce(probas: Tensor, labels: Tensor) -> Tensor:
    return BinaryCrossEntropy.apply(probas, labels)
