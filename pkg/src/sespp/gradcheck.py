"""Finite-difference audit of every primitive, every composite block and both desk models."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import DenseBlock, DenseLayer, ResidualBlock, SEBlock, SPPConfig, Transition, spp_forward
from .models import ModelConfig, build_model
from .tensor import Tensor

LINEAR_TOL = 1e-6
DEFAULT_TOL = 1e-3
STEP = 1e-6


@dataclass
class CheckRow:
    name: str
    kind: str  # primitive | block | model
    max_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _t(rng, *shape, offset=0.0):
    return Tensor(rng.standard_normal(shape) + offset, dtype=np.float64)


def _distinct(rng, *shape):
    # well-separated values so a max never switches winner under the finite step
    n = int(np.prod(shape))
    return Tensor(rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(-0.01, 0.01, shape), dtype=np.float64)


def _away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x), dtype=np.float64)


def _weighted(fn, rng, out_shape):
    w = Tensor(rng.standard_normal(out_shape), dtype=np.float64)
    return lambda *xs: T.tensor_sum(T.mul(fn(*xs), w))


def _primitive_cases(rng) -> list:
    """(name, tolerance, function, inputs); functions return a scalar."""
    cases = []

    def add(name, tol, fn, inputs):
        out_shape = fn(*[Tensor(t.data, dtype=np.float64) for t in inputs]).shape
        f = fn if out_shape == () else _weighted(fn, rng, out_shape)
        cases.append((name, tol, f, inputs))

    add("add", LINEAR_TOL, T.add, [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)])
    add("mul", LINEAR_TOL, T.mul, [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)])
    add("scale_channels", LINEAR_TOL, T.scale_channels, [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3)])
    add("relu", DEFAULT_TOL, T.relu, [_away_from_zero(rng, 2, 3, 4, 4)])
    add("sigmoid", DEFAULT_TOL, T.sigmoid, [_t(rng, 2, 3, 4, 4)])
    add("conv2d", LINEAR_TOL, lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
        [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)])
    add("conv2d_strided", LINEAR_TOL, lambda x, w: T.conv2d(x, w, stride=2, padding=3),
        [_t(rng, 2, 2, 9, 9), _t(rng, 3, 2, 7, 7)])
    add("pool2d_max", DEFAULT_TOL, lambda x: T.pool2d(x, "max", 3, 2, padding=1), [_distinct(rng, 2, 2, 6, 6)])
    add("pool2d_avg", LINEAR_TOL, lambda x: T.pool2d(x, "avg", 2, 2), [_t(rng, 2, 3, 6, 6)])
    add("global_avg_pool", LINEAR_TOL, T.global_avg_pool, [_t(rng, 2, 3, 4, 5)])
    add("region_max_pool", DEFAULT_TOL, lambda x: T.region_max_pool(x, 2), [_distinct(rng, 2, 2, 5, 7)])
    add("dense_affine", LINEAR_TOL, T.dense_affine, [_t(rng, 3, 6), _t(rng, 4, 6), _t(rng, 4)])
    add("batchnorm2d", DEFAULT_TOL, lambda x, g, b: T.batchnorm2d(x, g, b, training=True),
        [_t(rng, 3, 2, 4, 4), _t(rng, 2, offset=1.0), _t(rng, 2)])
    add("concat_channels", LINEAR_TOL, lambda a, b: T.concat_channels([a, b]),
        [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)])
    add("slice_channels", LINEAR_TOL, lambda x: T.slice_channels(x, 1, 3), [_t(rng, 2, 4, 3, 3)])
    add("flatten", LINEAR_TOL, T.flatten, [_t(rng, 2, 3, 2, 2)])
    add("sum", LINEAR_TOL, T.tensor_sum, [_t(rng, 3, 4)])
    y = Tensor(np.array([[1.0], [0.0], [1.0], [0.0]]), dtype=np.float64)
    p = Tensor(rng.uniform(0.1, 0.9, (4, 1)), dtype=np.float64)
    add("bce", DEFAULT_TOL, lambda p: T.bce(p, y), [p])
    return cases


def _to64(module):
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    return module


def _block_cases(rng) -> list:
    blocks = [
        ("se_block", SEBlock(16, rng), (2, 16, 4, 4)),
        ("spp", None, (2, 3, 6, 7)),
        ("dense_layer", DenseLayer(4, 3, rng), (2, 4, 4, 4)),
        ("dense_block", DenseBlock(4, 2, 3, rng), (2, 4, 4, 4)),
        ("transition", Transition(6, rng), (2, 6, 4, 4)),
        ("residual_block", ResidualBlock(3, 3, rng), (2, 3, 4, 4)),
        ("residual_block_projection", ResidualBlock(3, 5, rng, stride=2), (2, 3, 6, 6)),
    ]
    cases = []
    for name, module, shape in blocks:
        if module is None:
            fn = lambda x: spp_forward(x, SPPConfig())
            x, params = _distinct(rng, *shape), []
        else:
            _to64(module)
            module.train()
            fn = lambda x, *ps, m=module: m(x)
            x, params = _t(rng, *shape), module.parameters()
        out_shape = fn(Tensor(x.data, dtype=np.float64)).shape
        cases.append((name, DEFAULT_TOL, _weighted(fn, rng, out_shape), [x, *params]))
    return cases


def _model_cases(rng) -> list:
    cases = []
    for backbone in ("densenet", "resnet18"):
        cfg = ModelConfig.preset("desk", backbone, use_se=True, use_spp=True)
        model = build_model(cfg, seed=0).astype(np.float64)
        model.train()
        # 32 px keeps every SPP level populated after ResNet's 8x downsampling
        x = Tensor(rng.standard_normal((2, 2, 32, 32)), dtype=np.float64)
        y = Tensor(np.array([[1.0], [0.0]]), dtype=np.float64)
        fn = lambda *ps, m=model, x=x, y=y: T.bce(T.sigmoid(m.forward(x)), y)
        cases.append((f"model_{backbone}_se_spp_bce", DEFAULT_TOL, fn, model.parameters()))
    return cases


def run_gradcheck(seed: int = 0, model_coords: int = 4, include_models: bool = True,
                  log: Callable[[str], None] | None = None) -> list[CheckRow]:
    """Check every case in float64 and return one row per case.

    Primitive and block checks cover every coordinate; the full models check
    ``model_coords`` sampled coordinates of each parameter tensor.
    """
    rng = np.random.default_rng(seed)
    groups = [("primitive", _primitive_cases(rng), None), ("block", _block_cases(rng), None)]
    if include_models:
        groups.append(("model", _model_cases(rng), model_coords))
    rows = []
    for kind, cases, coords in groups:
        for name, tol, fn, inputs in cases:
            t0 = time.perf_counter()
            try:
                err = T.grad_check(fn, inputs, h=STEP, coords_per_input=coords, seed=seed)
            except Exception as exc:  # a crash is a failed check, reported by name
                if log is not None:
                    log(f"{name}: {type(exc).__name__}: {exc}")
                err = float("inf")
            row = CheckRow(name, kind, err, tol, time.perf_counter() - t0)
            rows.append(row)
            if log is not None:
                log(format_row(row))
    return rows


def format_row(row: CheckRow) -> str:
    status = "PASS" if row.passed else "FAIL"
    return f"{row.kind:<10} {row.name:<30} {row.max_error:10.3e}  < {row.tol:.0e}  {status}  ({row.seconds:.1f}s)"


def rows_csv(rows: list[CheckRow]) -> str:
    lines = ["kind,name,max_error,tolerance,status"]
    for r in rows:
        lines.append(f"{r.kind},{r.name},{r.max_error:.3e},{r.tol:.0e},{'pass' if r.passed else 'fail'}")
    return "\n".join(lines) + "\n"
