"""Run configuration: nested, validated dataclasses loaded from JSON."""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union, get_type_hints

from .exceptions import ConfigError
from .matching import LossWeights
from .scenes import GeneratorConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

MAX_DRU_LAYERS = 6


@dataclass
class PEConfig:
    """Participants-extractor geometry and widths."""

    image_h: int = 128
    image_w: int = 128
    downsample: int = 16
    backbone_channels: Tuple[int, ...] = (16, 32, 64)
    d_s: int = 128
    d_d: int = 64
    n_queries: int = 16
    enc_layers: int = 3
    dec_layers: int = 3
    n_heads: int = 8
    ffn_hidden: int = 128
    n_classes: int = 4

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        self.backbone_channels = tuple(self.backbone_channels)
        if self.d_d % self.n_heads != 0:
            raise ValueError("d_d must be divisible by n_heads")
        if self.d_d % 4 != 0:
            raise ValueError("d_d must be divisible by 4 for the 2-D sine encoding")
        if self.image_h % self.downsample != 0 or self.image_w % self.downsample != 0:
            raise ValueError("Image dimensions must be divisible by downsample")
        if self.downsample != 2 ** (len(self.backbone_channels) + 1):
            raise ValueError("downsample must equal 2 ** (number of backbone stages)")
        if self.d_d >= self.d_s:
            raise ValueError("d_d must be smaller than d_s")
        if min(self.n_queries, self.enc_layers, self.dec_layers, self.ffn_hidden, self.n_classes) < 1:
            raise ValueError("Query count, layer counts, FFN width and class count must be positive")

    @property
    def feature_h(self) -> int:
        return self.image_h // self.downsample

    @property
    def feature_w(self) -> int:
        return self.image_w // self.downsample


@dataclass
class DRUConfig:
    """Relationship-module depth/width and ablation switches."""

    layers: int = 3
    heads: int = 8
    ffn_hidden: int = 128
    use_dru: bool = True
    use_intention: bool = True
    include_ego_in_matching: bool = False
    top_k: int = 10
    location_sigma: float = 0.25

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        if not 1 <= self.layers <= MAX_DRU_LAYERS:
            raise ValueError(f"DRU layers must be between 1 and {MAX_DRU_LAYERS}")
        if self.heads < 1:
            raise ValueError("DRU heads must be positive")
        if self.ffn_hidden < 1:
            raise ValueError("DRU FFN width must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.location_sigma <= 0:
            raise ValueError("location_sigma must be positive")


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_drop_epochs: int = 40
    lr_gamma: float = 0.1
    clip_grad_norm: float = 0.1

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if self.lr <= 0:
            raise ValueError("Learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("Weight decay must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("Betas must lie in [0, 1)")
        if self.lr_drop_epochs < 1:
            raise ValueError("lr_drop_epochs must be positive")
        if self.clip_grad_norm < 0:
            raise ValueError("clip_grad_norm must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 60
    pretrain_epochs: int = 60
    batch_size: int = 8
    seed: int = 42
    importance_threshold: float = 0.5
    no_object_weight: float = 0.1
    check_maps_every: int = 1
    validate_every: int = 10

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("Epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("Batch size must be positive")
        if self.seed < 0:
            raise ValueError("Seed must be non-negative")
        if not 0.0 < self.importance_threshold < 1.0:
            raise ValueError("importance_threshold must lie in (0, 1)")
        if not 0.0 < self.no_object_weight <= 1.0:
            raise ValueError("no_object_weight must lie in (0, 1]")
        if self.check_maps_every < 1:
            raise ValueError("check_maps_every must be positive")
        if self.validate_every < 0:
            raise ValueError("validate_every must be non-negative")


@dataclass
class DataConfig:
    path: str = "data"
    n_scenes: int = 2000
    split_ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        self.split_ratios = (float(self.split_ratios[0]), float(self.split_ratios[1]), float(self.split_ratios[2]))
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be positive")
        if any(r < 0 for r in self.split_ratios) or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("Split ratios must be non-negative and sum to 1")


@dataclass
class RunConfig:
    """Every setting of a run; its hash is embedded in all artifacts."""

    pe: PEConfig = field(default_factory=PEConfig)
    dru: DRUConfig = field(default_factory=DRUConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    intention_vocab_path: Optional[str] = None

    def __post_init__(self) -> None:
        """Validate cross-section constraints."""
        if self.pe.d_d % self.dru.heads != 0:
            raise ValueError("pe.d_d must be divisible by dru.heads")
        if self.generator.image_size != self.pe.image_h or self.generator.image_size != self.pe.image_w:
            raise ValueError("generator.image_size must match the PE image dimensions")
        if self.generator.max_participants > self.pe.n_queries:
            raise ValueError("generator.max_participants cannot exceed pe.n_queries")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build a validated config, rejecting unknown keys at every level.

        Raises:
            ConfigError: On unknown keys, wrong types or invalid values
        """
        try:
            return _build(cls, data, "config")
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)


def to_plain(obj: Any) -> Any:
    """Dataclasses → dicts, tuples → lists, recursively."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls: Type[T], data: Any, path: str) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown config key(s) in {path}: {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{path}.{key}")  # type: ignore[type-var]
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {path}: {e}") from e


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Read a JSON config file; ``None`` yields the defaults.

    Raises:
        ConfigError: If the file cannot be read or parsed
    """
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    config = RunConfig.from_dict(data)
    logger.info(f"Loaded config {path} (hash {config_hash(config)})")
    return config


def config_hash(config: Any) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON form."""
    canonical = json.dumps(to_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def with_overrides(config: RunConfig, **sections: Dict[str, Any]) -> RunConfig:
    """Return a copy with some fields of named sections replaced (re-validated)."""
    data = config.to_dict()
    for section, values in sections.items():
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(f"Unknown config section: {section}")
        data[section].update(values)
    return RunConfig.from_dict(data)
