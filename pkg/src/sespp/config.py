"""Experiment configuration: one INI file with [experiment], [cohort], [model] and [train] sections."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import CohortSpec
from .models import ConfigError, ModelConfig
from .training import TrainConfig

MODALITIES = ("multimodal", "ct_only")


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k_folds: int = 5
    modality: str = "multimodal"
    output_dir: str = "out"
    cohort_dir: str = ""
    # None: batch size follows the backbone (and preset) default
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        want = 1 if self.modality == "ct_only" else 2
        if self.model.in_channels != want:
            object.__setattr__(self, "model", replace(self.model, in_channels=want))

    def validate(self) -> None:
        try:
            self.cohort.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.model.validate()
        if self.k_folds < 3:
            raise ConfigError("k_folds must be at least 3 (test, validation and training folds)")

    def model_for(self, backbone: str, use_se: bool, use_spp: bool, modality: Optional[str] = None) -> ModelConfig:
        modality = modality or self.modality
        in_channels = 1 if modality == "ct_only" else 2
        if backbone == self.model.backbone:
            # keep explicit width/depth overrides of the configured backbone
            return replace(self.model, use_se=use_se, use_spp=use_spp, in_channels=in_channels)
        cfg = ModelConfig.preset(self.model.scale_preset, backbone, use_se=use_se, use_spp=use_spp,
                                 in_channels=in_channels)
        return replace(cfg, input_size=self.model.input_size, spp_bins=self.model.spp_bins,
                       se_reduction=self.model.se_reduction)

    def train_for(self, backbone: str) -> TrainConfig:
        batch = self.batch_size or TrainConfig.for_backbone(backbone, self.model.scale_preset).batch_size
        return replace(self.train, batch_size=batch)

    # -- INI --------------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser["experiment"] = {
            "k_folds": str(self.k_folds),
            "modality": self.modality,
            "output_dir": self.output_dir,
            "cohort_dir": self.cohort_dir,
        }
        parser["cohort"] = {k: _fmt(v) for k, v in self.cohort.to_dict().items()}
        parser["model"] = {k: _fmt(v) for k, v in self.model.to_dict().items()}
        train = {k: _fmt(v) for k, v in self.train.to_dict().items()}
        train["batch_size"] = "auto" if self.batch_size is None else str(self.batch_size)
        parser["train"] = train
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Parse INI text; keys that are absent keep the values of ``base``."""
        base = base or cls()
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        known = {"experiment", "cohort", "model", "train"}
        extra = set(parser.sections()) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        sec = lambda name: dict(parser[name]) if parser.has_section(name) else {}

        exp = sec("experiment")
        cohort = _apply(base.cohort, sec("cohort"))
        model_kv = sec("model")
        model = base.model
        if "scale_preset" in model_kv or "backbone" in model_kv:
            # switching preset or backbone resets the architecture knobs to that preset
            model = ModelConfig.preset(model_kv.get("scale_preset", model.scale_preset),
                                       model_kv.get("backbone", model.backbone))
        model = _apply(model, model_kv)
        train_kv = sec("train")
        batch = base.batch_size
        if "batch_size" in train_kv:
            raw = train_kv.pop("batch_size").strip()
            batch = None if raw == "auto" else _parse_int("batch_size", raw)
        train = _apply(base.train, train_kv)
        cfg = cls(
            cohort=cohort,
            model=model,
            train=train,
            k_folds=_parse_int("k_folds", exp["k_folds"]) if "k_folds" in exp else base.k_folds,
            modality=exp.get("modality", base.modality),
            output_dir=exp.get("output_dir", base.output_dir),
            cohort_dir=exp.get("cohort_dir", base.cohort_dir),
            batch_size=batch,
        )
        return cfg

    @classmethod
    def load(cls, path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        return cls.from_ini(p.read_text(), base)


def for_preset(preset: str = "desk", seed: int = 0) -> ExperimentConfig:
    """Defaults for a scale preset, with every seed set to ``seed``."""
    model = ModelConfig.preset(preset, "densenet")
    cohort = CohortSpec(image_size=model.input_size, seed=seed)
    return ExperimentConfig(cohort=cohort, model=model, train=TrainConfig(seed=seed))


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, cohort=replace(cfg.cohort, seed=seed), train=replace(cfg.train, seed=seed))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_int(name: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def _apply(obj, kv: dict):
    """Return ``obj`` with the string values in ``kv`` parsed to the field types."""
    by_name = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in kv.items():
        if key not in by_name:
            raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        raw = raw.strip()
        try:
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = raw.lower() in ("true", "1", "yes")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            elif isinstance(current, tuple):
                value = tuple(int(x) for x in raw.split(",") if x.strip())
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}") from None
        updates[key] = value
    return replace(obj, **updates)
