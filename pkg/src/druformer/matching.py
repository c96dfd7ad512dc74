"""Set-prediction training: Hungarian matching and the composite box/GIoU/class loss."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import MatchingError, ShapeError
from .geometry import cxcywh_to_xyxy_array, cxcywh_to_xyxy_tensor, giou_tensor, pairwise_iou_giou
from .models import LossRecord
from .tensor import Tensor, absolute, getitem, log_softmax_lastdim, mul, tsum, zeros

logger = logging.getLogger(__name__)

IMPORTANT_CLASS = 0
NO_OBJECT_WEIGHT = 0.1


@dataclass(frozen=True)
class LossWeights:
    """Weights of the box L1, GIoU and class terms."""

    lambda_b: float = 5.0
    lambda_giou: float = 2.0
    lambda_c: float = 1.0

    def __post_init__(self) -> None:
        """Validate the weights."""
        if min(self.lambda_b, self.lambda_giou, self.lambda_c) < 0:
            raise ValueError("Loss weights must be non-negative")
        if self.lambda_b == self.lambda_giou == self.lambda_c == 0:
            raise ValueError("Loss weights cannot all be zero")


@dataclass(frozen=True)
class CostMatrix:
    """Matching costs with ground-truth objects as rows and prediction slots as columns."""

    values: np.ndarray

    def __post_init__(self) -> None:
        """Validate shape and finiteness."""
        if self.values.ndim != 2:
            raise MatchingError(f"Cost matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise MatchingError("Cost matrix contains non-finite entries")
        if self.values.shape[0] > self.values.shape[1]:
            raise MatchingError(f"More ground-truth rows than prediction columns: {self.values.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        rows, cols = self.values.shape
        return int(rows), int(cols)


@dataclass(frozen=True)
class Assignment:
    """Injective mapping from ground-truth index to prediction index."""

    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float = 0.0

    def __post_init__(self) -> None:
        """Validate injectivity."""
        gts = [g for g, _ in self.pairs]
        preds = [p for _, p in self.pairs]
        if len(set(gts)) != len(gts) or len(set(preds)) != len(preds):
            raise MatchingError(f"Assignment is not injective: {self.pairs}")

    def as_dict(self) -> Dict[int, int]:
        return dict(self.pairs)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for g, _ in self.pairs], dtype=np.int64)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for _, p in self.pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class SetLossOutput:
    """Weighted total (differentiable) and its scalar components."""

    total: Tensor
    l_b: float
    l_giou: float
    l_c: float

    def to_record(self, step: int, epoch: int) -> LossRecord:
        return LossRecord(
            step=step, epoch=epoch, l_b=self.l_b, l_giou=self.l_giou, l_c=self.l_c, total=self.total.item()
        )


def _solve_square(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns:
        Row-to-column assignment and the dual potentials (u, v) with u_i + v_j ≤ c_ij
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        col0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col0] = True
            row0 = owner[col0]
            free = ~used[1:]
            reduced = cost[row0 - 1] - u[row0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = col0
            candidates = np.where(free, minv[1:], np.inf)
            col1 = int(np.argmin(candidates)) + 1
            delta = candidates[col1 - 1]
            used_cols = np.nonzero(used)[0]
            u[owner[used_cols]] += delta
            v[used_cols] -= delta
            minv[~used] -= delta
            col0 = col1
            if owner[col0] == 0:
                break
        while col0:
            col1 = way[col0]
            owner[col0] = owner[col1]
            col0 = col1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[owner[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(tight: np.ndarray, fixed: Dict[int, int]) -> bool:
    """Kuhn's augmenting-path test on the tight-edge graph with some rows pinned."""
    n = tight.shape[0]
    col_owner = np.full(n, -1, dtype=np.int64)
    for r, c in fixed.items():
        col_owner[c] = r

    def augment(r: int, seen: np.ndarray) -> bool:
        for c in np.nonzero(tight[r])[0]:
            if seen[c] or int(col_owner[c]) in fixed:
                continue
            seen[c] = True
            if col_owner[c] < 0 or augment(int(col_owner[c]), seen):
                col_owner[c] = r
                return True
        return False

    return all(augment(r, np.zeros(n, dtype=bool)) for r in range(n) if r not in fixed)


def hungarian(cost: Union[CostMatrix, np.ndarray, Sequence[Sequence[float]]]) -> Assignment:
    """Minimum-cost injective assignment of rows to columns.

    Among optimal assignments the lexicographically smallest (by column of row 0, then
    row 1, …) is returned so that ties resolve deterministically.

    Raises:
        MatchingError: On non-finite entries or more rows than columns
    """
    matrix = cost if isinstance(cost, CostMatrix) else CostMatrix(np.asarray(cost, dtype=np.float64))
    values = matrix.values
    rows, cols = matrix.shape
    if rows == 0:
        return Assignment(pairs=(), total_cost=0.0)
    square = np.zeros((cols, cols))
    square[:rows] = values
    row_to_col, u, v = _solve_square(square)

    tol = 1e-9 * max(1.0, float(np.abs(values).max()))
    tight = np.abs(square - u[:, None] - v[None, :]) <= tol
    fixed: Dict[int, int] = {}
    for r in range(rows):
        taken = set(fixed.values())
        for c in np.nonzero(tight[r])[0]:
            if int(c) in taken:
                continue
            trial = dict(fixed)
            trial[r] = int(c)
            if _has_perfect_matching(tight, trial):
                fixed = trial
                break
        else:
            logger.debug("Tie refinement found no tight completion; keeping the primal assignment")
            fixed = {i: int(row_to_col[i]) for i in range(rows)}
            break

    pairs = tuple((r, fixed[r]) for r in range(rows))
    total = float(sum(values[r, c] for r, c in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_array(value: Union[Tensor, np.ndarray, Sequence[Sequence[float]]]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def match_cost(
    pred_boxes: Union[Tensor, np.ndarray],
    pred_logits: Union[Tensor, np.ndarray],
    gt_boxes: Union[np.ndarray, Sequence[Sequence[float]]],
    weights: LossWeights,
    gt_labels: Optional[Sequence[int]] = None,
) -> CostMatrix:
    """DETR-style matching cost, computed without gradient tracking.

    cost[g][i] = λ_b·L1(b_i, gt_g) + λ_GIoU·(1 − GIoU(b_i, gt_g)) − λ_c·p_i(label_g),
    where label_g defaults to the "important" class.

    Raises:
        ShapeError: If box or logit shapes disagree
    """
    boxes = _as_array(pred_boxes)
    logits = _as_array(pred_logits)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"Predicted boxes must be k×4, got {boxes.shape}")
    if logits.ndim != 2 or logits.shape[0] != boxes.shape[0]:
        raise ShapeError(f"Logits must be k×C with k={boxes.shape[0]}, got {logits.shape}")
    labels = np.full(len(gts), IMPORTANT_CLASS, dtype=np.int64) if gt_labels is None else np.asarray(gt_labels)
    if labels.shape != (len(gts),):
        raise ShapeError(f"Expected {len(gts)} labels, got {labels.shape}")

    probs = _softmax_rows(logits)
    l1 = np.abs(gts[:, None, :] - boxes[None, :, :]).sum(axis=-1)
    _, generalized = pairwise_iou_giou(cxcywh_to_xyxy_array(gts), cxcywh_to_xyxy_array(boxes))
    class_prob = probs[:, labels].T
    values = weights.lambda_b * l1 + weights.lambda_giou * (1.0 - generalized) - weights.lambda_c * class_prob
    return CostMatrix(values.reshape(len(gts), boxes.shape[0]))


def set_loss(
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Union[np.ndarray, Sequence[Sequence[float]]],
    assignment: Assignment,
    weights: LossWeights,
    gt_labels: Optional[Sequence[int]] = None,
    no_object_weight: float = NO_OBJECT_WEIGHT,
) -> SetLossOutput:
    """λ_b·L_b + λ_GIoU·L_GIoU + λ_c·L_c over one scene.

    L_b and L_GIoU average over matched pairs; L_c is a weighted cross-entropy over all
    slots, with unmatched slots targeting the last (no-object) column at weight
    ``no_object_weight``.

    Raises:
        MatchingError: If the assignment references out-of-range indices
    """
    k, n_logits = pred_logits.shape
    if pred_boxes.shape != (k, 4):
        raise ShapeError(f"Predicted boxes must be {k}×4, got {pred_boxes.shape}")
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_idx, pred_idx = assignment.gt_indices, assignment.pred_indices
    if len(assignment) and (gt_idx.max() >= len(gts) or pred_idx.max() >= k or min(gt_idx.min(), pred_idx.min()) < 0):
        raise MatchingError(f"Assignment {assignment.pairs} out of range for {len(gts)} targets and {k} slots")
    no_object = n_logits - 1
    labels = np.full(len(gts), IMPORTANT_CLASS, dtype=np.int64) if gt_labels is None else np.asarray(gt_labels)

    targets = np.full(k, no_object, dtype=np.int64)
    targets[pred_idx] = labels[gt_idx]
    class_weight = np.where(targets == no_object, no_object_weight, 1.0)
    picked = np.zeros((k, n_logits))
    picked[np.arange(k), targets] = class_weight / class_weight.sum()
    l_c = -tsum(mul(log_softmax_lastdim(pred_logits), picked))

    if len(assignment):
        matched = getitem(pred_boxes, pred_idx)
        target = Tensor(gts[gt_idx])
        count = float(len(assignment))
        l_b = tsum(absolute(matched - target)) * (1.0 / count)
        generalized = giou_tensor(cxcywh_to_xyxy_tensor(matched), cxcywh_to_xyxy_tensor(target))
        l_giou = tsum(1.0 - generalized) * (1.0 / count)
    else:
        l_b, l_giou = zeros(()), zeros(())

    total = weights.lambda_b * l_b + weights.lambda_giou * l_giou + weights.lambda_c * l_c
    return SetLossOutput(total=total, l_b=l_b.item(), l_giou=l_giou.item(), l_c=l_c.item())


def match_and_loss(
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Union[np.ndarray, Sequence[Sequence[float]]],
    weights: LossWeights,
    gt_labels: Optional[Sequence[int]] = None,
    no_object_weight: float = NO_OBJECT_WEIGHT,
) -> Tuple[SetLossOutput, Assignment]:
    """Match predictions to targets, then score the matched set."""
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gts):
        assignment = hungarian(match_cost(pred_boxes, pred_logits, gts, weights, gt_labels))
    else:
        assignment = Assignment(pairs=())
    return set_loss(pred_boxes, pred_logits, gts, assignment, weights, gt_labels, no_object_weight), assignment


def matched_ious(pred_boxes: np.ndarray, gt_boxes: np.ndarray, assignment: Assignment) -> List[float]:
    """IoU of each ground-truth box with its matched prediction, in ground-truth order."""
    if not len(assignment):
        return []
    overlap, _ = pairwise_iou_giou(
        cxcywh_to_xyxy_array(np.asarray(gt_boxes)[assignment.gt_indices]),
        cxcywh_to_xyxy_array(np.asarray(pred_boxes)[assignment.pred_indices]),
    )
    return [float(x) for x in np.diag(overlap)]
