"""SE-SPP-DenseNet and SE-SPP-ResNet18 classifiers with one logit per image."""

from __future__ import annotations

import configparser
import copy
import io as _stdio
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as pltn
from . import tensor as T
from .layers import (
    SPP,
    BatchNorm,
    Conv,
    DenseBlock,
    Linear,
    Module,
    ResidualBlock,
    SEBlock,
    SPPConfig,
    Transition,
)
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


class ModalityError(ShapeError):
    """Input channel count is a valid modality, but not the one the model was built for."""


PRESETS = {
    "paper": dict(block_config=(6, 12, 24, 16), growth_rate=32, init_features=64, input_size=224),
    "desk": dict(block_config=(2, 2, 2), growth_rate=8, init_features=16, input_size=64),
}
# ResNet18 stage widths are init_features * (1, 2, 4, 8); the desk ResNet is narrower
RESNET_INIT_FEATURES = {"paper": 64, "desk": 8}


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "densenet"
    use_se: bool = True
    use_spp: bool = True
    in_channels: int = 2
    block_config: tuple = (2, 2, 2)
    growth_rate: int = 8
    init_features: int = 16
    spp_bins: tuple = (1, 2, 4)
    se_reduction: int = 16
    scale_preset: str = "desk"
    input_size: int = 64

    @classmethod
    def preset(cls, name: str = "desk", backbone: str = "densenet", **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        base = dict(PRESETS[name])
        if backbone == "resnet18":
            base["init_features"] = RESNET_INIT_FEATURES[name]
        base.update(overrides)
        cfg = cls(backbone=backbone, scale_preset=name, **base)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.backbone not in ("densenet", "resnet18"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.in_channels not in (1, 2):
            raise ConfigError(f"in_channels must be 1 (CT) or 2 (PET+CT), got {self.in_channels}")
        if self.backbone == "densenet" and (not self.block_config or any(n < 1 for n in self.block_config)):
            raise ConfigError(f"invalid block_config {self.block_config}")
        if self.scale_preset not in PRESETS:
            raise ConfigError(f"unknown scale preset {self.scale_preset!r}")
        for name in ("growth_rate", "init_features", "se_reduction", "input_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        SPPConfig(tuple(self.spp_bins))

    @property
    def run_id(self) -> str:
        parts = [self.backbone]
        if self.use_se:
            parts.append("se")
        if self.use_spp:
            parts.append("spp")
        parts.append("mm" if self.in_channels == 2 else "ct")
        return "_".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


class Model(Module):
    """Stem, backbone stages (SE after each stage when enabled), pooling head, one logit."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        paper = cfg.scale_preset == "paper"
        c = cfg.init_features
        if paper:
            self.stem_conv = Conv(cfg.in_channels, c, 7, rng, stride=2, padding=3)
        else:
            self.stem_conv = Conv(cfg.in_channels, c, 3, rng, padding=1)
        self.stem_bn = BatchNorm(c)
        self.stem_pool = paper

        self.stages: list[Module] = []
        self.se: list[Module] = []
        self.transitions: list[Module] = []
        if cfg.backbone == "densenet":
            for i, n in enumerate(cfg.block_config):
                block = DenseBlock(c, n, cfg.growth_rate, rng)
                self.stages.append(block)
                c = block.out_channels
                if cfg.use_se:
                    self.se.append(SEBlock(c, rng, cfg.se_reduction))
                if i < len(cfg.block_config) - 1:
                    trans = Transition(c, rng)
                    self.transitions.append(trans)
                    c = trans.out_channels
            self.final_bn = BatchNorm(c)
        else:
            for stage, width in enumerate(cfg.init_features * m for m in (1, 2, 4, 8)):
                for j in range(2):
                    stride = 2 if (stage > 0 and j == 0) else 1
                    block = ResidualBlock(c, width, rng, stride=stride)
                    self.stages.append(block)
                    c = width
                    if cfg.use_se:
                        self.se.append(SEBlock(c, rng, cfg.se_reduction))
        self.feature_channels = c
        self.spp = SPP(SPPConfig(tuple(cfg.spp_bins))) if cfg.use_spp else None
        head_in = c * self.spp.cfg.regions if cfg.use_spp else c
        self.head = Linear(head_in, 1, rng)

    def features(self, x: Tensor) -> Tensor:
        cfg = self.config
        x = T.relu(self.stem_bn(self.stem_conv(x)))
        if self.stem_pool:
            x = T.pool2d(x, "max", 3, 2, padding=1)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if cfg.use_se:
                x = self.se[i](x)
            if cfg.backbone == "densenet" and i < len(self.transitions):
                x = self.transitions[i](x)
        if cfg.backbone == "densenet":
            x = T.relu(self.final_bn(x))
        return x

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        if mode is not None:
            self.train(mode == "train")
        cfg = self.config
        if x.ndim != 4:
            raise ShapeError(f"expected a (B, C, H, W) batch, got {x.shape}")
        if x.shape[1] != cfg.in_channels:
            if x.shape[1] in (1, 2):
                raise ModalityError(
                    f"model expects {cfg.in_channels}-channel input "
                    f"({'PET+CT' if cfg.in_channels == 2 else 'CT only'}), got {x.shape[1]} channels"
                )
            raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        if not cfg.use_spp and x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"model without SPP needs {cfg.input_size}x{cfg.input_size} input, got {x.shape[2]}x{x.shape[3]}"
            )
        f = self.features(x)
        pooled = self.spp(f) if self.spp is not None else T.global_avg_pool(f)
        return self.head(pooled)

    def predict_proba(self, x: Tensor) -> Tensor:
        with T.no_grad():
            return T.sigmoid(self.forward(x, "eval"))

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.shape)
        for name, b in buffers.items():
            b[...] = state[name]

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for module in _walk(clone):
            for name, value in list(vars(module).items()):
                if isinstance(value, np.ndarray):
                    setattr(module, name, value.astype(dtype))
        return clone


def _walk(m: Module):
    yield m
    for _, child in m.children():
        yield from _walk(child)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def forward(model: Model, batch: Tensor, mode: str = "eval") -> Tensor:
    if mode == "eval":
        with T.no_grad():
            return model.forward(batch, "eval")
    return model.forward(batch, "train")


def predict_proba(model: Model, batch: Tensor) -> Tensor:
    return model.predict_proba(batch)


def count_params(model: Module) -> int:
    """Trainable scalars, including BN affine terms but not running statistics."""
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoints: <stem>.bin (concatenated PLTN blobs) + <stem>.manifest (INI text)


def save_checkpoint(model: Model, stem) -> None:
    stem = Path(stem)
    state = model.state_dict()
    blob = bytearray()
    offsets = {}
    for name in sorted(state):
        offsets[name] = len(blob)
        blob += pltn.encode(state[name])
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["config"] = {k: _fmt(v) for k, v in model.config.to_dict().items()}
    parser["tensors"] = {k: str(v) for k, v in offsets.items()}
    buf = _stdio.StringIO()
    parser.write(buf)
    pltn.atomic_write_bytes(stem.with_suffix(".bin"), bytes(blob))
    pltn.atomic_write_text(stem.with_suffix(".manifest"), buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_manifest(stem) -> tuple[ModelConfig, dict[str, int]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read(Path(stem).with_suffix(".manifest"))
    raw = dict(parser["config"])
    kw = {}
    for f in fields(ModelConfig):
        v = raw[f.name]
        if f.type in ("bool",):
            kw[f.name] = v == "True"
        elif f.type == "int":
            kw[f.name] = int(v)
        elif f.type == "tuple":
            kw[f.name] = tuple(int(x) for x in v.split(",") if x)
        else:
            kw[f.name] = v
    offsets = {k: int(v) for k, v in parser["tensors"].items()}
    return ModelConfig(**kw), offsets


def load_checkpoint(stem, seed: int = 0) -> Model:
    cfg, offsets = read_manifest(stem)
    model = build_model(cfg, seed)
    state = {}
    with open(Path(stem).with_suffix(".bin"), "rb") as f:
        for name, off in offsets.items():
            f.seek(off)
            state[name] = pltn.read_tensor(f)
    model.load_state_dict(state)
    return model
