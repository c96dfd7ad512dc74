"""Record types emitted by training, evaluation and inference (JSON-serialisable)."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


@dataclass
class LossRecord:
    """Loss components of one optimizer step, written as one JSON line."""

    step: int
    epoch: int
    l_b: float
    l_giou: float
    l_c: float
    total: float

    def to_dict(self) -> Dict[str, Any]:
        """Convert the record to a dictionary."""
        return {
            "step": self.step,
            "epoch": self.epoch,
            "l_b": self.l_b,
            "l_giou": self.l_giou,
            "l_c": self.l_c,
            "total": self.total,
        }


@dataclass
class BreakdownEntry:
    """Metrics restricted to one group of samples."""

    num_samples: int
    miou: float
    acc: float

    def to_dict(self) -> Dict[str, Any]:
        return {"num_samples": self.num_samples, "miou": self.miou, "acc": self.acc}


@dataclass
class MetricsReport:
    """mIoU / ACC over an evaluated split with per-class and per-layout breakdowns."""

    num_samples: int
    miou: float
    acc: float
    per_class: Dict[str, BreakdownEntry] = field(default_factory=dict)
    per_layout: Dict[str, BreakdownEntry] = field(default_factory=dict)
    config_hash: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self) -> None:
        """Validate report values."""
        if self.num_samples < 1:
            raise ValueError("Metrics report needs at least one sample")
        if not 0.0 <= self.miou <= 1.0 or not 0.0 <= self.acc <= 1.0:
            raise ValueError("miou and acc must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        """Convert the report to a dictionary."""
        return {
            "num_samples": self.num_samples,
            "miou": self.miou,
            "acc": self.acc,
            "per_class": {k: v.to_dict() for k, v in sorted(self.per_class.items())},
            "per_layout": {k: v.to_dict() for k, v in sorted(self.per_layout.items())},
            "config_hash": self.config_hash,
            "split": self.split,
        }


@dataclass
class Prediction:
    """The selected important object of one scene, or none."""

    box: Optional[List[float]]
    probability: float
    slot: Optional[int] = None

    def __post_init__(self) -> None:
        """Validate the probability range."""
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("Probability must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {"box": self.box, "probability": self.probability, "slot": self.slot}


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference check of one operation."""

    name: str
    max_error: float
    passed: bool
    seeds: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "max_error": self.max_error, "passed": self.passed, "seeds": self.seeds}
