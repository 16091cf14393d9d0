"""Experiment configuration: one nested YAML file, CLI flags override it."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .cvae import Architecture, CvaeError, TrainConfig
from .kinetics import DEFAULT_FRAME_BLOCKS, DEFAULT_REFERENCE_COEFFS
from .mcmc import McmcConfig, McmcError


class ConfigError(ValueError):
    pass


@dataclass
class KineticsSection:
    frame_blocks: list = field(default_factory=lambda: [list(b) for b in DEFAULT_FRAME_BLOCKS])
    grid_step_s: float = 0.1
    reference_coeffs: dict = field(default_factory=lambda: dict(DEFAULT_REFERENCE_COEFFS))
    reference_file: str | None = None


@dataclass
class NoiseSection:
    scale: float = 1e-4
    shape: float = 1.0
    rate: float = 1.0


@dataclass
class PriorSection:
    setting_id: int = 1
    location: list = field(default_factory=lambda: [1.0, 0.0006, 0.74])
    spread: list = field(default_factory=lambda: [1.0, 0.01, 1.0])
    spread_is_variance: bool = False


@dataclass
class NetworkSection:
    latent_dim: int = 10
    hidden: list = field(default_factory=lambda: [128, 100, 50])
    prime_decoder_hidden: list = field(default_factory=lambda: [16, 16, 32])
    # standardize log(x) rather than x
    log_params: bool = True
    # recorded for provenance; the latent-head outputs are always linear
    relu_on_heads: bool = False

    def architecture(self, n_frames: int) -> Architecture:
        return Architecture(3, n_frames, self.latent_dim, tuple(self.hidden), tuple(self.prime_decoder_hidden))


@dataclass
class EvaluationSection:
    n_test: int = 200
    alpha: float = 0.26
    n_samples: int = 45_000
    kl_estimator: str = "gaussian"
    sweep_repeats: int = 3
    dvr_shift_values: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0])
    dvr_shift_n_test: int = 20
    train_sizes: list = field(default_factory=lambda: [500, 1000, 2000, 4000, 5000, 6000, 8000, 10000])


@dataclass
class ExperimentConfig:
    seed: int = 0
    train_size: int = 10_000
    prior: PriorSection = field(default_factory=PriorSection)
    kinetics: KineticsSection = field(default_factory=KineticsSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # per-variant TrainConfig overrides, e.g. {"dual-encoder": {"beta": 1.2}}
    train_overrides: dict = field(default_factory=dict)
    network: NetworkSection = field(default_factory=NetworkSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def train_config(self, variant: str) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), **self.train_overrides.get(variant, {})})

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        current = getattr(defaults, name)
        if is_dataclass(current):
            value = _build(type(current), value, f"{where}{name}.")
        elif isinstance(current, tuple) and value is not None:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, McmcError, CvaeError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def set_path(cfg: ExperimentConfig, dotted: str, value) -> None:
    """Apply ``section.key=value`` style overrides in place."""
    target = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        if not hasattr(target, p):
            raise ConfigError(f"unknown config section {dotted!r}")
        target = getattr(target, p)
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(target, leaf, value)
