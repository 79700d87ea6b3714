"""Experiment configuration files.

A config is an INI file with one section per module::

    [experiment]  name, strategy, methods, horizons, seeds, output_dir, ...
    [data]        dataset kind/path, split fractions, lookback
    [backbone]    EncoderSpec fields (defaults follow ``kind``)
    [train]       TrainConfig fields
    [loss]        LossConfig fields        (only when an SSCL method is present)
    [augment]     AugmentPolicy fields     (only when an SSCL method is present)
    [erf]         receptive-field artifact options

Lists are comma separated. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .augment import AugmentPolicy
from .backbone import ENCODER_KINDS, EncoderSpec
from .errors import ConfigError, InvalidSpec
from .losses import SSCL_ALGORITHMS, LossConfig
from .strategy import LOSS_CHOICES, READOUTS, TrainConfig, sscl_algorithm

STRATEGIES = ("end_to_end", "two_step_ridge", "two_step_mlp", "finetune")
DATA_KINDS = ("ETT", "ECL", "custom", "synthetic")


@dataclass
class ExperimentSection:
    name: str = "experiment"
    strategy: str = "end_to_end"
    methods: tuple[str, ...] = ("MSE",)
    horizons: tuple[int, ...] = (24,)
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    raw_scale_metrics: bool = False
    readout: str = "last_t"
    ridge_alphas: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    max_ridge_windows: int = 0


@dataclass
class DataConfig:
    name: str = "synthetic"
    kind: str = "synthetic"
    path: str = ""
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    lookback: int = 0  # 0 = 2 x horizon, capped at lookback_cap
    lookback_cap: int = 336
    hourly: bool = False
    forward_fill: bool = False
    max_test_windows: int = 0
    synthetic_rows: int = 2000
    synthetic_features: int = 7
    synthetic_period: int = 24
    synthetic_noise: float = 0.1
    synthetic_seed: int = 0

    def lookback_for(self, horizon: int) -> int:
        return self.lookback if self.lookback > 0 else min(2 * horizon, self.lookback_cap)


@dataclass
class ErfConfig:
    enabled: bool = False
    windows: tuple[int, ...] = (0,)
    target_step: int = 0
    shared_scale: bool = False


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: EncoderSpec = field(default_factory=lambda: EncoderSpec.default("TCN", 0))
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    erf: ErfConfig = field(default_factory=ErfConfig)

    def algorithms(self) -> list[str | None]:
        if self.experiment.strategy == "end_to_end":
            return [sscl_algorithm(m) for m in self.experiment.methods]
        return list(self.experiment.methods)

    @property
    def uses_sscl(self) -> bool:
        return any(a is not None for a in self.algorithms())

    def validate(self) -> None:
        exp = self.experiment
        if exp.strategy not in STRATEGIES:
            raise ConfigError(f"must be one of {STRATEGIES}", "experiment.strategy")
        if not exp.methods:
            raise ConfigError("at least one method is required", "experiment.methods")
        allowed = LOSS_CHOICES + ("MSE+MoCo",) if exp.strategy == "end_to_end" else SSCL_ALGORITHMS
        for m in exp.methods:
            if m not in allowed:
                raise ConfigError(f"{m!r} is not valid for strategy {exp.strategy}; "
                                  f"expected one of {allowed}", "experiment.methods")
        if not exp.horizons or any(h < 1 for h in exp.horizons):
            raise ConfigError("horizons must be positive", "experiment.horizons")
        if not exp.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        if exp.readout not in READOUTS:
            raise ConfigError(f"must be one of {READOUTS}", "experiment.readout")
        if self.data.kind not in DATA_KINDS:
            raise ConfigError(f"must be one of {DATA_KINDS}", "data.kind")
        if self.data.kind != "synthetic" and not self.data.path:
            raise ConfigError("a path is required for file datasets", "data.path")
        if self.backbone.kind not in ENCODER_KINDS:
            raise ConfigError(f"must be one of {ENCODER_KINDS}", "backbone.kind")
        try:
            dataclasses.replace(self.backbone, input_dim=max(self.backbone.input_dim, 1)).validate()
        except InvalidSpec as exc:
            raise ConfigError(str(exc), "backbone") from exc
        if self.erf.target_step >= min(exp.horizons):
            raise ConfigError("must be smaller than every horizon", "erf.target_step")


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataConfig,
    "backbone": EncoderSpec,
    "train": TrainConfig,
    "loss": LossConfig,
    "augment": AugmentPolicy,
    "erf": ErfConfig,
}


def _coerce(text: str, hint, name: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint in (int, float, str):
            return hint(text.strip())
        if origin is tuple:
            args = typing.get_args(hint)
            items = [t.strip() for t in text.split(",") if t.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(t, args[0], name) for t in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(t, a, name) for t, a in zip(items, args))
        if origin is typing.Union or str(origin) == "types.UnionType":
            args = [a for a in typing.get_args(hint) if a is not type(None)]
            return _coerce(text, args[0], name)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), name) from exc
    raise ConfigError(f"unsupported field type {hint}", name)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _section_values(parser, section, cls, base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, text in parser.items(section):
        if key not in names:
            raise ConfigError("unknown field", f"{section}.{key}")
        values[key] = _coerce(text, hints[key], f"{section}.{key}")
    try:
        if base is not None:
            return dataclasses.replace(base, **values)
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), section) from exc


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError("unknown section", section)
    parts = {}
    for section, cls in SECTIONS.items():
        if not parser.has_section(section):
            continue
        if section == "backbone":
            kind = parser.get(section, "kind", fallback="TCN")
            if kind not in ENCODER_KINDS:
                raise ConfigError(f"must be one of {ENCODER_KINDS}", "backbone.kind")
            parts[section] = _section_values(parser, section, cls, EncoderSpec.default(kind, 0))
        else:
            parts[section] = _section_values(parser, section, cls)
    cfg = ExperimentConfig(**parts)
    cfg.validate()
    if not cfg.uses_sscl:
        for section in ("loss", "augment"):
            if parser.has_section(section) and parser.items(section):
                key = parser.items(section)[0][0]
                raise ConfigError("SSCL settings given but no method uses SSCL", f"{section}.{key}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        if section in ("loss", "augment") and not cfg.uses_sscl:
            continue
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))
