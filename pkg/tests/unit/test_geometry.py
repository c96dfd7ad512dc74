"""Unit tests for the geometry module."""

import numpy as np
import pytest

from druformer.exceptions import GeometryError
from druformer.geometry import (
    BoxCxCyWh,
    BoxXyXy,
    EvalPair,
    acc,
    cxcywh_to_xyxy_array,
    giou,
    giou_tensor,
    iou,
    miou,
    pairwise_iou_giou,
    prediction_box,
    summarize,
    to_cxcywh,
    to_xyxy,
)
from druformer.tensor import Tensor


def _pair_with_iou(value: float) -> EvalPair:
    """Two unit-height boxes overlapping so that IoU equals ``value``."""
    # [0, 1] vs [s, 1 + s]: IoU = (1 - s) / (1 + s)
    shift = (1.0 - value) / (1.0 + value)
    return EvalPair(BoxXyXy(0.0, 0.0, 1.0, 1.0), BoxXyXy(shift, 0.0, 1.0 + shift, 1.0))


class TestBoxes:
    """Tests for box types and conversions."""

    def test_full_frame_conversion(self) -> None:
        """Test the full-frame box converts to unit corners."""
        assert to_xyxy(BoxCxCyWh(0.5, 0.5, 1.0, 1.0)).as_list() == [0.0, 0.0, 1.0, 1.0]

    def test_quarter_box_conversion(self) -> None:
        """Test a quarter box converts to corners by hand arithmetic."""
        assert to_xyxy(BoxCxCyWh(0.25, 0.25, 0.5, 0.5)).as_list() == [0.0, 0.0, 0.5, 0.5]

    def test_round_trip(self, rng: np.random.Generator) -> None:
        """Test that to_cxcywh inverts to_xyxy within 1e-12."""
        for _ in range(1000):
            w, h = rng.uniform(0.01, 0.5, size=2)
            cx, cy = rng.uniform(0.0, 1.0, size=2)
            back = to_cxcywh(to_xyxy(BoxCxCyWh(cx, cy, w, h)))
            assert np.allclose(back.as_list(), [cx, cy, w, h], atol=1e-12)

    def test_invalid_boxes(self) -> None:
        """Test box validation."""
        with pytest.raises(ValueError, match="positive"):
            BoxCxCyWh(0.5, 0.5, 0.0, 0.1)
        with pytest.raises(ValueError, match="centre"):
            BoxCxCyWh(1.5, 0.5, 0.1, 0.1)
        with pytest.raises(ValueError, match="corners"):
            BoxXyXy(1.0, 0.0, 0.0, 1.0)

    def test_degenerate_conversion(self) -> None:
        """Test that a box collapsed by rounding raises GeometryError."""
        with pytest.raises(GeometryError):
            to_xyxy(BoxCxCyWh(1.0, 0.5, 1e-17, 0.1))


class TestOverlap:
    """Tests for IoU and GIoU."""

    def test_identical_boxes(self) -> None:
        """Test IoU and GIoU of identical boxes."""
        box = BoxXyXy(0.1, 0.2, 0.4, 0.6)
        assert iou(box, box) == 1.0
        assert giou(box, box) == 1.0

    def test_disjoint_iou(self) -> None:
        """Test that disjoint boxes have IoU 0."""
        assert iou(BoxXyXy(0.0, 0.0, 1.0, 1.0), BoxXyXy(2.0, 2.0, 3.0, 3.0)) == 0.0

    def test_partial_overlap(self) -> None:
        """Test IoU of 1/7 for offset 2×2 boxes."""
        assert np.isclose(iou(BoxXyXy(0, 0, 2, 2), BoxXyXy(1, 1, 3, 3)), 1.0 / 7.0)

    def test_giou_disjoint(self) -> None:
        """Test GIoU of −1/3 for separated unit boxes."""
        assert np.isclose(giou(BoxXyXy(0, 0, 1, 1), BoxXyXy(2, 0, 3, 1)), -1.0 / 3.0)

    def test_giou_equals_iou_for_abutting_boxes(self) -> None:
        """Test that GIoU equals IoU when the union fills the enclosing box."""
        a, b = BoxXyXy(0, 0, 1, 1), BoxXyXy(1, 0, 2, 1)
        assert giou(a, b) == iou(a, b) == 0.0

    def test_symmetry_scaling_and_bound(self, rng: np.random.Generator) -> None:
        """Test symmetry, scale invariance and giou ≤ iou on random pairs."""
        for _ in range(10_000):
            x0, y0 = rng.uniform(0, 1, size=2)
            a = BoxXyXy(x0, y0, x0 + rng.uniform(0.01, 1), y0 + rng.uniform(0.01, 1))
            x0, y0 = rng.uniform(0, 1, size=2)
            b = BoxXyXy(x0, y0, x0 + rng.uniform(0.01, 1), y0 + rng.uniform(0.01, 1))
            assert np.isclose(iou(a, b), iou(b, a))
            assert giou(a, b) <= iou(a, b) + 1e-12
            scaled_a = BoxXyXy(*(3.0 * v for v in a.as_list()))
            scaled_b = BoxXyXy(*(3.0 * v for v in b.as_list()))
            assert np.isclose(giou(scaled_a, scaled_b), giou(a, b))

    def test_array_forms_agree(self, rng: np.random.Generator) -> None:
        """Test that pairwise and tensor forms match the scalar functions."""
        a = np.column_stack([rng.uniform(0.3, 0.7, size=(3, 2)), rng.uniform(0.1, 0.4, size=(3, 2))])
        b = np.column_stack([rng.uniform(0.3, 0.7, size=(3, 2)), rng.uniform(0.1, 0.4, size=(3, 2))])
        xa, xb = cxcywh_to_xyxy_array(a), cxcywh_to_xyxy_array(b)
        overlap, generalized = pairwise_iou_giou(xa, xb)
        elementwise = giou_tensor(Tensor(xa), Tensor(xb)).data[:, 0]
        for i in range(3):
            assert np.isclose(overlap[i, i], iou(BoxXyXy(*xa[i]), BoxXyXy(*xb[i])))
            assert np.isclose(generalized[i, i], giou(BoxXyXy(*xa[i]), BoxXyXy(*xb[i])))
            assert np.isclose(elementwise[i], generalized[i, i])


class TestMetrics:
    """Tests for mIoU, ACC and report summaries."""

    def test_miou_mean(self) -> None:
        """Test mIoU of IoUs 1.0 and 0.5."""
        assert np.isclose(miou([_pair_with_iou(1.0), _pair_with_iou(0.5)]), 0.75)

    def test_miou_hand_computed(self) -> None:
        """Test mIoU of {1/7, 0, 1} to three decimals."""
        pairs = [
            EvalPair(BoxXyXy(0, 0, 2, 2), BoxXyXy(1, 1, 3, 3)),
            EvalPair(BoxXyXy(0, 0, 1, 1), BoxXyXy(2, 2, 3, 3)),
            EvalPair(BoxXyXy(0, 0, 1, 1), BoxXyXy(0, 0, 1, 1)),
        ]
        assert round(miou(pairs), 3) == 0.381

    def test_acc_strict_threshold(self) -> None:
        """Test that IoU exactly 0.5 is not counted."""
        exact = EvalPair(BoxXyXy(0.0, 0.0, 1.0, 1.0), BoxXyXy(0.0, 0.0, 0.5, 1.0))
        assert iou(exact.prediction, exact.label) == 0.5  # type: ignore[arg-type]
        assert acc([exact]) == 0.0

    def test_acc_counts(self) -> None:
        """Test ACC of {0.6, 0.4} and of all-perfect samples."""
        assert acc([_pair_with_iou(0.6), _pair_with_iou(0.4)]) == 0.5
        assert acc([_pair_with_iou(1.0)] * 3) == 1.0

    def test_absent_sides(self) -> None:
        """Test scoring of missing predictions and labels."""
        box = BoxXyXy(0, 0, 1, 1)
        both_absent = EvalPair(None, None)
        missed = EvalPair(None, box)
        spurious = EvalPair(box, None)
        assert miou([both_absent]) == 1.0
        assert acc([both_absent]) == 1.0
        assert miou([missed, spurious]) == 0.0
        assert acc([missed, spurious]) == 0.0

    def test_empty_lists_rejected(self) -> None:
        """Test that metrics of an empty list raise ValueError."""
        with pytest.raises(ValueError):
            miou([])
        with pytest.raises(ValueError):
            acc([])

    def test_permutation_invariance(self) -> None:
        """Test that metric values ignore sample order."""
        pairs = [_pair_with_iou(0.9), _pair_with_iou(0.3), EvalPair(None, None)]
        assert miou(pairs) == pytest.approx(miou(pairs[::-1]))
        assert acc(pairs) == acc(pairs[::-1])

    def test_prediction_box_clamps(self) -> None:
        """Test clamping and the degenerate flag."""
        box, degenerate = prediction_box([0.95, 0.5, 0.2, 0.2])
        assert not degenerate
        assert box is not None and box.x1 == 1.0
        box, degenerate = prediction_box([1.0, 0.5, 1e-9, 0.2])
        assert box is None and degenerate

    def test_degenerate_prediction_scores_zero(self) -> None:
        """Test that a degenerate prediction against an absent label is not a hit."""
        pair = EvalPair(None, None, degenerate_prediction=True)
        assert miou([pair]) == 0.0
        assert acc([pair]) == 0.0

    def test_breakdown_weighted_mean(self) -> None:
        """Test that breakdowns average back to the overall metrics."""
        high, low = _pair_with_iou(0.9), _pair_with_iou(0.3)
        pairs = [
            EvalPair(high.prediction, high.label, "wide-road", "vehicle"),
            EvalPair(low.prediction, low.label, "intersection", "pedestrian"),
            EvalPair(None, None, "intersection", None),
        ]
        report = summarize(pairs, "abc", "test")
        for groups in (report.per_class, report.per_layout):
            total = sum(entry.num_samples for entry in groups.values())
            assert total == report.num_samples
            assert abs(sum(e.miou * e.num_samples for e in groups.values()) / total - report.miou) < 1e-9
            assert abs(sum(e.acc * e.num_samples for e in groups.values()) / total - report.acc) < 1e-9
        assert set(report.per_class) == {"vehicle", "pedestrian", "none"}
        assert report.to_dict()["split"] == "test"
