"""
Run configuration: one YAML mapping per stage section. Unknown sections or keys are
rejected; command-line flags override file values after loading.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .detectors import Backbone, DetectorConfig, Variant
from .evaluation import DecisionRule, DiscriminatorConfig
from .mintrvae import RvaeHyper

PRESET_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    """Configuration file or override is invalid"""


@dataclass(frozen=True)
class PathsConfig:
    dataset: Path | None = None
    out: Path = Path("runs/default")

    def __post_init__(self) -> None:
        if self.dataset is not None:
            object.__setattr__(self, "dataset", Path(self.dataset))
        object.__setattr__(self, "out", Path(self.out))


@dataclass(frozen=True)
class DataConfig:
    window: int = 15
    stride: int = 5
    folds: int = 5
    target_positive_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.window < 2 or self.stride < 1 or self.folds < 2:
            raise ValueError("need window >= 2, stride >= 1 and folds >= 2")
        if not 0.0 < self.target_positive_fraction < 1.0:
            raise ValueError("target_positive_fraction must be in (0, 1)")


@dataclass(frozen=True)
class GenerationConfig:
    n: int = 100
    max_attempts: int = 20


@dataclass(frozen=True)
class EvaluationConfig:
    threshold: float = 0.5
    k_run: int = 7
    onset_before: int = 30
    onset_after: int = 30
    pr_points: int = 99

    def rule(self, window: int) -> DecisionRule:
        return DecisionRule(self.threshold, self.k_run, window)


_SECTIONS: dict[str, type] = {
    "paths": PathsConfig,
    "data": DataConfig,
    "vae": RvaeHyper,
    "generation": GenerationConfig,
    "detector": DetectorConfig,
    "evaluation": EvaluationConfig,
    "discriminator": DiscriminatorConfig,
}
_SCALARS = ("seed", "scale", "variants")


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vae: RvaeHyper = field(default_factory=RvaeHyper)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    seed: int = 0
    scale: float = 1.0
    variants: tuple[Variant, ...] = tuple(Variant)

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def scaled_vae(self) -> RvaeHyper:
        """VAE hyperparameters with epochs and warm-up multiplied by scale"""
        return self.vae if self.scale == 1.0 else self.vae.scaled(self.scale)

    @property
    def scaled_detector(self) -> DetectorConfig:
        if self.scale == 1.0:
            return self.detector
        return replace(self.detector, epochs=max(1, round(self.detector.epochs * self.scale)))

    @property
    def rule(self) -> DecisionRule:
        return self.evaluation.rule(self.data.window)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply command-line overrides; None values are ignored"""
        cfg = self
        try:
            if overrides.get("seed") is not None:
                cfg = replace(cfg, seed=int(overrides["seed"]))
            if overrides.get("scale") is not None:
                cfg = replace(cfg, scale=float(overrides["scale"]))
            if overrides.get("out") is not None:
                cfg = replace(cfg, paths=replace(cfg.paths, out=Path(overrides["out"])))
            if overrides.get("dataset") is not None:
                cfg = replace(cfg, paths=replace(cfg.paths, dataset=Path(overrides["dataset"])))
            if overrides.get("backbone") is not None:
                backbone = Backbone(overrides["backbone"])
                cfg = replace(cfg, detector=replace(cfg.detector, backbone=backbone))
        except ValueError as err:
            raise ConfigError(f"invalid override: {err}") from err
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(value: Any) -> Any:
    """Dataclass dict to YAML-safe builtins"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    return value


def _section(name: str, cls: type, values: Any) -> Any:
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"section '{name}': {err}") from err


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {
        name: _section(name, cls, data.get(name)) for name, cls in _SECTIONS.items()
    }
    kwargs.update({k: data[k] for k in _SCALARS if k in data})
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def resolve_config_path(name_or_path: str | Path) -> Path:
    """A file path, or the name of a shipped preset (reference, desk)"""
    path = Path(name_or_path)
    if path.is_file():
        return path
    preset = PRESET_DIR / f"{name_or_path}.yaml"
    if preset.is_file():
        return preset
    available = ", ".join(sorted(p.stem for p in PRESET_DIR.glob("*.yaml")))
    raise ConfigError(f"config '{name_or_path}' is neither a file nor a preset ({available})")


def load_config(name_or_path: str | Path | None = None) -> RunConfig:
    if name_or_path is None:
        return RunConfig()
    path = resolve_config_path(name_or_path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
    return config_from_dict(data)


def save_config(config: RunConfig, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
