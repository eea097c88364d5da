"""Experiment configuration: sectioned ``key = value`` text files.

Every hyperparameter of a run lives here.  Parsing is strict: unknown
sections or keys, malformed values and failed validation raise
:class:`ConfigError` with the file line that caused it.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field, fields

from .schedule import ConfigurationError
from .trainer import TrainConfig

SEED_ENV = "CBDM_SEED"


class ConfigError(ConfigurationError):
    pass


@dataclass
class RunSection:
    run_id: str = "run"
    seed: int = 0


@dataclass
class ScheduleSection:
    T: int = 200
    beta1: float = 1e-4
    betaT: float = 0.02


@dataclass
class DataSection:
    num_classes: int = 8
    radius: float = 2.0
    sigma: float = 0.15
    modes_per_class: int = 1
    mode_spread: float = 0.35
    head_count: int = 2000
    imbalance: float = 0.01


@dataclass
class ModelSection:
    hidden_dims: tuple[int, ...] = (128, 128)
    time_embed_dim: int = 32
    class_embed_dim: int = 16
    tcfg_enabled: bool = False
    omega_embed_dim: int = 8


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 2e-3
    warmup_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    objective: str = "cbdm"
    tau: float = 0.005
    gamma: float = 0.25
    set_size: int = 1
    label_set_mode: str = "train"
    cond_dropout_phi: float = 0.1
    ema_decay: float | None = None
    tcfg: bool = False
    omega_min: float = 0.0
    omega_max: float = 2.0
    checkpoint_every: int = 0


@dataclass
class SampleSection:
    omega: float = 0.0
    num_samples: int = 500
    method: str = "ddpm"
    ddim_steps: int = 20
    use_tcfg: bool = False


@dataclass
class MetricsSection:
    reference_samples: int = 500
    knn_k: int = 5
    num_clusters: int = 0  # 0 means 20 * num_classes
    radius_mult: float = 2.0
    prd_seed: int = 0


@dataclass
class SweepSection:
    omega: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
    tau: tuple[float, ...] = (0.0005, 0.005, 0.05)
    phi: tuple[float, ...] = (0.1, 0.2, 0.5)
    labelset: tuple[str, ...] = ("train", "sqrt", "balanced")


@dataclass
class OracleSection:
    priors: tuple[float, ...] = (0.5, 0.9, 0.99)  # head-class probability of each two-class case
    mu: float = 2.0
    s: float = 0.5
    mc_samples: int = 10000
    tau: float = 1.0


SECTIONS = {
    "run": RunSection, "schedule": ScheduleSection, "data": DataSection, "model": ModelSection,
    "train": TrainSection, "sample": SampleSection, "metrics": MetricsSection,
    "sweep": SweepSection, "oracle": OracleSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    oracle: OracleSection = field(default_factory=OracleSection)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.run.seed, **dataclasses.asdict(self.train))

    def validate(self) -> None:
        """Cross-field checks that need more than one section."""
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"[train]: {exc}") from None
        checks = [
            (self.schedule.T >= 2, "[schedule] T must be >= 2"),
            (0 < self.schedule.beta1 <= self.schedule.betaT < 1, "[schedule] need 0 < beta1 <= betaT < 1"),
            (self.data.num_classes >= 1, "[data] num_classes must be >= 1"),
            (self.data.sigma > 0, "[data] sigma must be positive"),
            (self.data.modes_per_class >= 1, "[data] modes_per_class must be >= 1"),
            (0 < self.data.imbalance <= 1, "[data] imbalance must be in (0, 1]"),
            (self.data.head_count >= 1, "[data] head_count must be >= 1"),
            (len(self.model.hidden_dims) >= 1 and min(self.model.hidden_dims) >= 1,
             "[model] hidden_dims must be a nonempty list of positive sizes"),
            (self.sample.omega >= 0, "[sample] omega must be >= 0"),
            (self.sample.num_samples >= 1, "[sample] num_samples must be >= 1"),
            (self.sample.method in ("ddpm", "ddim"), "[sample] method must be ddpm or ddim"),
            (self.sample.method != "ddim" or self.schedule.T % self.sample.ddim_steps == 0,
             "[sample] ddim_steps must divide T"),
            (not self.sample.use_tcfg or self.model.tcfg_enabled,
             "[sample] use_tcfg needs [model] tcfg_enabled"),
            (not self.train.tcfg or self.model.tcfg_enabled, "[train] tcfg needs [model] tcfg_enabled"),
            (self.metrics.reference_samples > self.metrics.knn_k, "[metrics] reference_samples must exceed knn_k"),
            (self.metrics.num_clusters == 0 or self.metrics.num_clusters >= 2, "[metrics] num_clusters must be 0 or >= 2"),
            (all(w >= 0 for w in self.sweep.omega), "[sweep] omega values must be >= 0"),
            (all(v >= 0 for v in self.sweep.tau), "[sweep] tau values must be >= 0"),
            (all(0 <= v <= 1 for v in self.sweep.phi), "[sweep] phi values must be in [0, 1]"),
            (all(0 < p < 1 for p in self.oracle.priors), "[oracle] priors must be in (0, 1)"),
            (self.oracle.mc_samples >= 1000, "[oracle] mc_samples must be >= 1000"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)))


# ---------------------------------------------------------------- value codecs

def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(text: str, typ):
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def _parse_value(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is tuple:
        items = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, args[0]) for p in items)
    if args and type(None) in args:
        if text.lower() == "none":
            return None
        inner = next(a for a in args if a is not type(None))
        return _parse_scalar(text, inner)
    return _parse_scalar(text, hint)


def _key_lines(text: str) -> dict:
    """Map (section, key) -> 1-based line number for diagnostics."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, None)] = i
        elif section and "=" in s and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip())] = i
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _key_lines(text)
    sections = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{lines.get((name, None), '?')}: unknown section [{name}]")
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in cp.items(name):
            where = f"{source}:{lines.get((name, key), '?')}"
            if key not in hints:
                raise ConfigError(f"{where}: unknown key {key!r} in [{name}]")
            try:
                kwargs[key] = _parse_value(raw, hints[key])
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {name}.{key}: {exc}") from None
        sections[name] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    try:
        cfg.validate()
    except ConfigError as exc:
        msg = str(exc)
        if msg.startswith("["):
            sec = msg[1:msg.index("]")]
            key = next((k for (s, k) in lines if s == sec and k and k in msg), None)
            line = lines.get((sec, key), lines.get((sec, None), "?"))
            raise ConfigError(f"{source}:{line}: {msg}") from None
        raise
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_format(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read a config file; the seed may be overridden by argument or environment."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, str(path))
    if seed_override is None and os.environ.get(SEED_ENV):
        try:
            seed_override = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg if seed_override is None else cfg.with_seed(seed_override)
