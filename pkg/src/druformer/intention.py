"""Intention extractor: driving command text → intention id → learned token C."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .exceptions import ConfigError, UnknownIntentionError
from .nn import Module, Parameter
from .tensor import Tensor, getitem

logger = logging.getLogger(__name__)

CANONICAL_INTENTIONS = ("go-straight", "turn-left", "turn-right", "stop")
DEFAULT_INTENTION = "go-straight"

DEFAULT_SYNONYMS: Dict[str, str] = {
    "straight": "go-straight",
    "go straight": "go-straight",
    "forward": "go-straight",
    "go forward": "go-straight",
    "continue": "go-straight",
    "left": "turn-left",
    "turn left": "turn-left",
    "turning left": "turn-left",
    "right": "turn-right",
    "turn right": "turn-right",
    "turning right": "turn-right",
    "halt": "stop",
    "stopping": "stop",
    "brake": "stop",
}


class IntentionVocab:
    """Ordered canonical intentions plus a synonym table.

    Ids are dense ``0..V-1`` in canonical order. Every canonical name maps to
    itself, so ``parse(name) == id_of(name)``.
    """

    def __init__(
        self,
        canonical: Sequence[str] = CANONICAL_INTENTIONS,
        synonyms: Optional[Dict[str, str]] = None,
        default: str = DEFAULT_INTENTION,
    ) -> None:
        if not canonical:
            raise ConfigError("Intention vocabulary cannot be empty")
        names = [self._normalise(name) for name in canonical]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate canonical intentions: {names}")
        self.canonical: List[str] = names
        self._ids = {name: i for i, name in enumerate(names)}
        self._lookup: Dict[str, int] = dict(self._ids)
        for key, target in (DEFAULT_SYNONYMS if synonyms is None else synonyms).items():
            target = self._normalise(target)
            if target not in self._ids:
                raise ConfigError(f"Synonym {key!r} points at unknown intention {target!r}")
            self._lookup[self._normalise(key)] = self._ids[target]
        default = self._normalise(default)
        if default not in self._ids:
            raise ConfigError(f"Default intention {default!r} is not canonical")
        self.default = default

    @staticmethod
    def _normalise(text: str) -> str:
        return " ".join(text.strip().lower().split())

    def __len__(self) -> int:
        return len(self.canonical)

    def name_of(self, intention_id: int) -> str:
        if not 0 <= intention_id < len(self.canonical):
            raise UnknownIntentionError(str(intention_id))
        return self.canonical[intention_id]

    def parse(self, text: str, fallback: bool = False) -> int:
        """Map free text to an intention id.

        Args:
            text: Command such as "Turn Left"
            fallback: Substitute the default intention (with a warning) instead of raising

        Raises:
            UnknownIntentionError: If the text matches nothing and fallback is off
        """
        key = self._normalise(text)
        if key in self._lookup:
            return self._lookup[key]
        if fallback:
            logger.warning(f"Unknown driving intention {text!r}; using {self.default!r}")
            return self._ids[self.default]
        raise UnknownIntentionError(text)

    def to_dict(self) -> Dict[str, object]:
        synonyms = {k: self.canonical[v] for k, v in sorted(self._lookup.items()) if k not in self._ids}
        return {"canonical": list(self.canonical), "synonyms": synonyms, "default": self.default}

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "IntentionVocab":
        """Load ``{"canonical": [...], "synonyms": {...}, "default": ...}`` from JSON.

        Raises:
            ConfigError: If the file is unreadable or malformed
        """
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read intention vocabulary {path}: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: object) -> "IntentionVocab":
        """Inverse of ``to_dict``.

        Raises:
            ConfigError: On a missing canonical list or unknown keys
        """
        if not isinstance(data, dict) or "canonical" not in data:
            raise ConfigError("Intention vocabulary needs a 'canonical' list")
        unknown = set(data) - {"canonical", "synonyms", "default"}
        if unknown:
            raise ConfigError(f"Unknown intention vocabulary key(s): {', '.join(sorted(unknown))}")
        return cls(data["canonical"], data.get("synonyms", {}), data.get("default", DEFAULT_INTENTION))


def parse_intention(text: str, vocab: Optional[IntentionVocab] = None, fallback: bool = False) -> int:
    return (vocab or IntentionVocab()).parse(text, fallback=fallback)


class IntentionExtractor(Module):
    """Learned V×d_d table; row ``id`` is the intention token C."""

    def __init__(self, vocab_size: int, d_d: int, rng: np.random.Generator) -> None:
        if vocab_size < 1:
            raise ValueError("Vocabulary size must be positive")
        self.vocab_size = vocab_size
        self.table = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, d_d)))

    def __call__(self, intention_ids: Union[int, Sequence[int], np.ndarray]) -> Tensor:
        """Token(s) of shape 1×d_d for a single id, or B×1×d_d for a batch.

        Raises:
            UnknownIntentionError: If an id is out of range
        """
        ids = np.asarray(intention_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise UnknownIntentionError(str(ids.tolist()))
        if ids.ndim == 0:
            return getitem(self.table, slice(int(ids), int(ids) + 1))
        return getitem(self.table, ids[:, None])


def embed_intention(extractor: IntentionExtractor, intention_id: int) -> Tensor:
    return extractor(intention_id)
