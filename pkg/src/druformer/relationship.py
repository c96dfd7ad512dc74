"""Driving relationship self-understanding: ego fusion, relationship attention, importance head, maps."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import InvariantViolation, ShapeError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .tensor import Tensor, as_tensor, concat, sigmoid

logger = logging.getLogger(__name__)

EGO_ANCHOR = (0.5, 0.95, 0.2, 0.1)
EGO_CLASS = "ego"
ROW_SUM_TOLERANCE = 1e-9


class EgoToken(Module):
    """Learned 1×d_d row standing in for the ego vehicle."""

    def __init__(self, d_d: int, rng: np.random.Generator) -> None:
        self.token = Parameter(rng.normal(0.0, 1.0, size=(1, d_d)))

    def __call__(self) -> Tensor:
        return self.token


def fuse_entities(intention: Tensor, ego: Tensor, participants: Tensor, norm: LayerNorm) -> Tensor:
    """M = norm(C + e) ⊕ O; only the fused ego row is normalised.

    Accepts C as 1×d or B×1×d, e as 1×d and O as N×d or B×N×d.

    Raises:
        ShapeError: If widths differ or C/e are not single rows
    """
    intention, ego, participants = as_tensor(intention), as_tensor(ego), as_tensor(participants)
    d = participants.shape[-1]
    if intention.shape[-2:] != (1, d) or ego.shape != (1, d):
        raise ShapeError(f"C {intention.shape} and e {ego.shape} must be single rows of width {d}")
    head = norm(intention + ego)
    if participants.ndim == 3 and head.ndim == 2:
        head = head + Tensor(np.zeros((participants.shape[0], 1, d)))
    if head.ndim != participants.ndim:
        raise ShapeError(f"Cannot fuse C {intention.shape} with O {participants.shape}")
    return concat([head, participants], axis=-2)


class DRULayer(Module):
    """Multi-head self-attention over the entity set, then FFN, each with residual + norm.

    Heads are concatenated without an output projection.
    """

    def __init__(self, d_d: int, n_heads: int, d_hidden: int, rng: np.random.Generator) -> None:
        self.attn = MultiHeadAttention(d_d, n_heads, rng, out_proj=False)
        self.norm1 = LayerNorm(d_d)
        self.ffn = FeedForward(d_d, d_hidden, d_d, rng)
        self.norm2 = LayerNorm(d_d)

    def __call__(self, entities: Tensor) -> Tuple[Tensor, Tensor]:
        """Return the updated entity set and the (B×)H×k×k relationship maps."""
        attended, maps = self.attn(entities, entities, entities)
        x = self.norm1(entities + attended)
        return self.norm2(x + self.ffn(x)), maps


def dru_forward(entities: Tensor, layers: Sequence[DRULayer]) -> Tuple[Tensor, List[Tensor]]:
    if not layers:
        raise ValueError("DRU needs at least one layer")
    maps: List[Tensor] = []
    y = entities
    for layer in layers:
        y, layer_maps = layer(y)
        maps.append(layer_maps)
    return y, maps


class RelationshipStack(Module):
    def __init__(self, d_d: int, n_layers: int, n_heads: int, d_hidden: int, rng: np.random.Generator) -> None:
        self.layers = [DRULayer(d_d, n_heads, d_hidden, rng) for _ in range(n_layers)]

    def __call__(self, entities: Tensor) -> Tuple[Tensor, List[Tensor]]:
        return dru_forward(entities, self.layers)


@dataclass
class ImportanceOutput:
    boxes: Tensor  # (B×)k×4 cxcywh in (0, 1)
    logits: Tensor  # (B×)k×2, column 0 important, column 1 no-object


class ImportanceHead(Module):
    def __init__(self, d_d: int, rng: np.random.Generator) -> None:
        self.box_embed = FeedForward(d_d, d_d, 4, rng, num_layers=3)
        self.class_embed = Linear(d_d, 2, rng)

    def __call__(self, y: Tensor) -> ImportanceOutput:
        return predict_important(y, self)


def predict_important(y: Tensor, head: ImportanceHead) -> ImportanceOutput:
    return ImportanceOutput(boxes=sigmoid(head.box_embed(y)), logits=head.class_embed(y))


def check_row_stochastic(maps: Sequence[Tensor], tolerance: float = ROW_SUM_TOLERANCE) -> None:
    """Assert every relationship map row lies in [0, 1] and sums to 1.

    Raises:
        InvariantViolation: Naming the first offending layer
    """
    for layer, layer_maps in enumerate(maps):
        data = layer_maps.data
        worst = float(np.max(np.abs(data.sum(axis=-1) - 1.0)))
        if worst > tolerance or data.min() < 0.0 or data.max() > 1.0:
            logger.error(f"Relationship maps of layer {layer} are not row-stochastic (max deviation {worst:.3e})")
            raise InvariantViolation(f"Layer {layer} relationship maps are not row-stochastic: deviation {worst:.3e}")


# Post-hoc relationship maps over a selection of entities (row 0 = ego).


def cosine_relmap(y: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``y``; zero rows are guarded by ``eps``."""
    y = np.asarray(y, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), eps)
    unit = y / norms
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def location_relmap(boxes: np.ndarray, sigma: float) -> np.ndarray:
    """exp(−‖c_i − c_j‖ / σ) over box centres.

    Raises:
        ValueError: If sigma is not positive
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    centres = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[:, :2]
    distance = np.linalg.norm(centres[:, None, :] - centres[None, :, :], axis=-1)
    return np.exp(-distance / sigma)


def semantic_relmap(classes: Sequence[str]) -> np.ndarray:
    labels = np.asarray(list(classes), dtype=object)
    return (labels[:, None] == labels[None, :]).astype(np.float64)
