"""Pipeline configuration: a single YAML file, CLI-overridable.

The effective (merged) config is echoed into the output directory, and its
canonical-JSON sha256 stamps every artifact header. ``out_dir`` and ``jobs``
are excluded from the hash: they change where and how fast results land,
never what they contain.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import yaml

from .errors import ConfigError

_STAGES = ("synth", "ingest", "featurize", "train", "predict", "estimate", "evaluate")


@dataclass(frozen=True)
class PathsConfig:
    trace: str | None = None
    registry: str | None = None
    truth: str | None = None
    model: str | None = None


@dataclass(frozen=True)
class SynthConfig:
    preset: str | None = None  # acceptance | standard | clean | tiny
    spec: str | None = None  # path to a cohort spec YAML
    users: int | None = None
    days: int | None = None


@dataclass(frozen=True)
class IngestConfig:
    min_rssi: int = -85
    require_associated: bool = True
    drop_invalid_timestamp: bool = True
    salt: str | None = None  # hex-encoded; enables anonymization


@dataclass(frozen=True)
class FeaturizeConfig:
    interval: int = 60
    decorrelate: bool = False
    corr_threshold: float = 0.9


@dataclass(frozen=True)
class ForestConfig:
    trees: int = 200
    features_per_split: int = 5
    min_samples_split: int = 5
    max_depth: int | None = None
    resample: str = "bootstrap"
    subsample_size: int | None = None


@dataclass(frozen=True)
class PersonalizeConfig:
    fraction: float = 0.4
    repeats: int = 1


@dataclass(frozen=True)
class ConfidenceSection:
    level: float = 0.95
    samples: int = 1000
    mode: str = "user_band"


@dataclass(frozen=True)
class EstimateConfig:
    method: str = "mva"
    window: int = 5
    agg_window: int = 30
    sg_window: int = 5
    sg_degree: int = 2
    threshold: float = 0.05


@dataclass(frozen=True)
class EvaluateConfig:
    thresholds: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    ablation: bool = False
    sweep: tuple[int, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "out"
    seed: int = 0
    timezone: str = "UTC"
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    featurize: FeaturizeConfig = field(default_factory=FeaturizeConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    confidence: ConfidenceSection = field(default_factory=ConfidenceSection)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    jobs: int = 1

    def config_hash(self) -> str:
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("jobs")
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()
        ).hexdigest()

    def header_comment(self) -> str:
        return f"config={self.config_hash()[:16]} seed={self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "paths": PathsConfig,
    "synth": SynthConfig,
    "ingest": IngestConfig,
    "featurize": FeaturizeConfig,
    "forest": ForestConfig,
    "personalize": PersonalizeConfig,
    "confidence": ConfidenceSection,
    "estimate": EstimateConfig,
    "evaluate": EvaluateConfig,
}


def _build_section(name: str, cls, data) -> object:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    coerced = dict(data)
    for key, value in list(coerced.items()):
        if isinstance(value, list):
            coerced[key] = tuple(value)
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"bad '{name}' section: {e}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("pipeline config must be a mapping")
    top_fields = set(PipelineConfig.__dataclass_fields__)
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS:
            kwargs[name] = _build_section(name, _SECTIONS[name], value)
        else:
            kwargs[name] = value
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad pipeline config: {e}") from None
    validate_config(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    return config_from_dict(data)


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.seed is None:
        raise ConfigError("field 'seed' must be set explicitly (no wall-clock defaults)")
    if cfg.featurize.interval <= 0 or 86400 % cfg.featurize.interval != 0:
        raise ConfigError(
            f"field 'featurize.interval' must divide 86400, got {cfg.featurize.interval}"
        )
    if cfg.ingest.min_rssi >= 0:
        raise ConfigError(f"field 'ingest.min_rssi' must be negative, got {cfg.ingest.min_rssi}")
    if not 0 <= cfg.personalize.fraction < 1:
        raise ConfigError("field 'personalize.fraction' must be in [0, 1)")
    if cfg.personalize.repeats < 1:
        raise ConfigError("field 'personalize.repeats' must be >= 1")
    if cfg.estimate.method not in ("mva", "agg"):
        raise ConfigError(f"field 'estimate.method' must be mva or agg, got {cfg.estimate.method!r}")
    if cfg.confidence.mode not in ("user_band", "boundary_significance"):
        raise ConfigError(f"field 'confidence.mode' unknown: {cfg.confidence.mode!r}")
    if list(cfg.evaluate.thresholds) != sorted(cfg.evaluate.thresholds):
        raise ConfigError("field 'evaluate.thresholds' must be sorted ascending")
    if cfg.synth.preset and cfg.synth.spec:
        raise ConfigError("set either 'synth.preset' or 'synth.spec', not both")
    if cfg.ingest.salt is not None:
        try:
            bytes.fromhex(cfg.ingest.salt)
        except ValueError:
            raise ConfigError("field 'ingest.salt' must be hex-encoded") from None


def require_paths(cfg: PipelineConfig, stage: str, names: list[str]) -> None:
    """Fail fast (before any work) when a stage needs a missing input path."""
    import os

    for name in names:
        value = getattr(cfg.paths, name)
        if value is None:
            raise ConfigError(f"stage '{stage}' requires config field 'paths.{name}'")
        if not os.path.exists(value):
            raise ConfigError(f"stage '{stage}': paths.{name} does not exist: {value}")


def forest_params_from_config(cfg: PipelineConfig, seed: int | None = None):
    from .forest import ForestParams

    return ForestParams(
        n_trees=cfg.forest.trees,
        features_per_split=cfg.forest.features_per_split,
        min_samples_split=cfg.forest.min_samples_split,
        max_depth=cfg.forest.max_depth,
        resample_mode=cfg.forest.resample,
        subsample_size=cfg.forest.subsample_size,
        seed=cfg.seed if seed is None else seed,
    )


def merge_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply dotted CLI overrides like forest__trees=50 or seed=7."""
    updates: dict = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if "__" in key:
            section, fieldname = key.split("__", 1)
            current = updates.get(section, getattr(cfg, section))
            updates[section] = replace(current, **{fieldname: value})
        else:
            updates[key] = value
    out = replace(cfg, **updates)
    validate_config(out)
    return out
