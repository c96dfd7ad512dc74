"""The composite network: participants → intention/ego fusion → relationship stack → importance head."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .config import RunConfig
from .intention import IntentionExtractor
from .models import Prediction
from .nn import LayerNorm, Module
from .participants import ParticipantsExtractor
from .relationship import EgoToken, ImportanceHead, RelationshipStack, fuse_entities
from .tensor import Tensor, as_tensor, zeros

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    boxes: Tensor  # B×k×4
    logits: Tensor  # B×k×2
    tokens: Tensor  # O, B×N×d_d
    entities: Tensor  # M, B×k×d_d
    hidden: Tensor  # Y, B×k×d_d
    maps: List[Tensor] = field(default_factory=list)  # L tensors of B×H×k×k


class DRUformer(Module):
    """Important-object detector.

    ``dru.use_intention`` off drops the intention table (C is all zeros);
    ``dru.use_dru`` off drops the relationship stack (the head reads M directly).
    """

    def __init__(self, config: RunConfig, rng: np.random.Generator, vocab_size: int = 4) -> None:
        d_d = config.pe.d_d
        self.config = config
        self.pe = ParticipantsExtractor(config.pe, rng)
        self.intention: Optional[IntentionExtractor] = (
            IntentionExtractor(vocab_size, d_d, rng) if config.dru.use_intention else None
        )
        self.ego = EgoToken(d_d, rng)
        self.ego_norm = LayerNorm(d_d)
        self.dru: Optional[RelationshipStack] = (
            RelationshipStack(d_d, config.dru.layers, config.dru.heads, config.dru.ffn_hidden, rng)
            if config.dru.use_dru
            else None
        )
        self.head = ImportanceHead(d_d, rng)

    def __call__(self, images: Union[Tensor, np.ndarray], intention_ids: Sequence[int]) -> ModelOutput:
        images = as_tensor(images)
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        ids = np.asarray(intention_ids, dtype=np.int64).reshape(-1)
        if len(ids) != images.shape[0]:
            raise ValueError(f"Got {len(ids)} intentions for {images.shape[0]} images")
        tokens = self.pe(images)
        if self.intention is not None:
            intention = self.intention(ids)
        else:
            intention = zeros((images.shape[0], 1, self.config.pe.d_d))
        entities = fuse_entities(intention, self.ego(), tokens, self.ego_norm)
        hidden, maps = self.dru(entities) if self.dru is not None else (entities, [])
        out = self.head(hidden)
        return ModelOutput(out.boxes, out.logits, tokens, entities, hidden, maps)

    @property
    def first_candidate_row(self) -> int:
        """Row 0 (the ego entity) takes part in matching only when configured."""
        return 0 if self.config.dru.include_ego_in_matching else 1


def importance_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True))[..., 0]


def select_prediction(boxes: np.ndarray, logits: np.ndarray, first_row: int = 1, threshold: float = 0.5) -> Prediction:
    """Highest-importance slot's box, or none when every probability is below ``threshold``.

    Args:
        boxes: k×4 cxcywh boxes of one scene
        logits: k×2 importance logits of one scene
        first_row: First slot eligible for selection
        threshold: Minimum probability for reporting a box
    """
    probs = importance_probabilities(np.asarray(logits, dtype=np.float64))[first_row:]
    slot = int(np.argmax(probs))
    probability = float(probs[slot])
    if probability < threshold:
        return Prediction(box=None, probability=probability, slot=None)
    return Prediction(box=[float(v) for v in boxes[first_row + slot]], probability=probability, slot=first_row + slot)
