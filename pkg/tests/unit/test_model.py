"""Unit tests for the composite network and prediction selection."""

import numpy as np
import pytest

from druformer.config import RunConfig, with_overrides
from druformer.model import DRUformer, importance_probabilities, select_prediction
from druformer.rng import make_rng


@pytest.fixture
def images() -> np.ndarray:
    """Provide a batch of two random 16×16 images."""
    return make_rng(5).uniform(size=(2, 3, 16, 16))


class TestDRUformer:
    """Tests for the assembled model."""

    def test_output_shapes(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test entity-set, map and head shapes."""
        out = DRUformer(tiny_config, make_rng(0))(images, [0, 1])

        assert out.tokens.shape == (2, 4, 8)
        assert out.entities.shape == (2, 5, 8)
        assert out.hidden.shape == (2, 5, 8)
        assert out.boxes.shape == (2, 5, 4)
        assert out.logits.shape == (2, 5, 2)
        assert len(out.maps) == 1
        assert out.maps[0].shape == (2, 2, 5, 5)

    def test_participant_rows_follow_tokens(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that entity rows 1..N are the participant tokens."""
        out = DRUformer(tiny_config, make_rng(0))(images, [0, 1])
        assert np.array_equal(out.entities.data[:, 1:], out.tokens.data)

    def test_intention_changes_output(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that the intention token reaches the importance head."""
        model = DRUformer(tiny_config, make_rng(0))
        left = model(images[:1], [1]).logits.data
        right = model(images[:1], [2]).logits.data
        assert not np.allclose(left, right)

    def test_intention_isolation(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that with a zero intention table and ego token the intention cannot change Y."""
        model = DRUformer(tiny_config, make_rng(0))
        assert model.intention is not None
        model.intention.table.data[...] = 0.0
        model.ego.token.data[...] = 0.0

        outputs = [model(images[:1], [intention]) for intention in range(4)]
        for out in outputs[1:]:
            assert np.array_equal(out.hidden.data, outputs[0].hidden.data)
            assert np.array_equal(out.tokens.data, outputs[0].tokens.data)

    def test_intention_only_changes_fused_row(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that swapping the intention changes the ego row of M but never the participant tokens."""
        model = DRUformer(tiny_config, make_rng(0))
        left, right = model(images[:1], [1]), model(images[:1], [2])

        assert np.array_equal(left.tokens.data, right.tokens.data)
        assert np.array_equal(left.entities.data[:, 1:], right.entities.data[:, 1:])
        assert not np.allclose(left.entities.data[:, 0], right.entities.data[:, 0])

    def test_without_intention(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that disabling intentions drops the table and makes output intention-free."""
        full = DRUformer(tiny_config, make_rng(0))
        ablated = DRUformer(with_overrides(tiny_config, dru={"use_intention": False}), make_rng(0))

        assert ablated.intention is None
        assert ablated.pe.num_parameters() == full.pe.num_parameters()
        assert full.num_parameters() - ablated.num_parameters() == 4 * 8
        assert np.array_equal(ablated(images[:1], [1]).logits.data, ablated(images[:1], [2]).logits.data)

    def test_without_relationship_stack(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that disabling the stack feeds the entity set straight to the head."""
        full = DRUformer(tiny_config, make_rng(0))
        ablated = DRUformer(with_overrides(tiny_config, dru={"use_dru": False}), make_rng(0))
        out = ablated(images, [0, 0])

        assert ablated.dru is None
        assert ablated.num_parameters() < full.num_parameters()
        assert out.maps == []
        assert np.array_equal(out.hidden.data, out.entities.data)

    def test_intention_count_must_match(self, tiny_config: RunConfig, images: np.ndarray) -> None:
        """Test that each image needs exactly one intention."""
        with pytest.raises(ValueError):
            DRUformer(tiny_config, make_rng(0))(images, [0])

    def test_first_candidate_row(self, tiny_config: RunConfig) -> None:
        """Test that the ego row is excluded from matching by default."""
        assert DRUformer(tiny_config, make_rng(0)).first_candidate_row == 1
        with_ego = with_overrides(tiny_config, dru={"include_ego_in_matching": True})
        assert DRUformer(with_ego, make_rng(0)).first_candidate_row == 0


class TestSelectPrediction:
    """Tests for choosing the reported important object."""

    BOXES = np.array([[0.5, 0.9, 0.2, 0.1], [0.3, 0.4, 0.1, 0.1], [0.6, 0.2, 0.1, 0.2]])

    def test_highest_probability_slot(self) -> None:
        """Test that the most important candidate slot is reported."""
        logits = np.array([[0.0, 0.0], [5.0, 0.0], [1.0, 0.0]])
        prediction = select_prediction(self.BOXES, logits)

        assert prediction.slot == 1
        assert prediction.box == self.BOXES[1].tolist()
        assert np.isclose(prediction.probability, 1.0 / (1.0 + np.exp(-5.0)))

    def test_below_threshold_reports_none(self) -> None:
        """Test that low probabilities yield no box."""
        logits = np.array([[0.0, 0.0], [5.0, 0.0], [1.0, 0.0]])
        prediction = select_prediction(self.BOXES, logits, threshold=0.999)

        assert prediction.box is None and prediction.slot is None
        assert prediction.probability > 0.99

    def test_ego_row_excluded(self) -> None:
        """Test that the ego row is never selected by default."""
        logits = np.array([[10.0, 0.0], [0.0, 5.0], [0.0, 5.0]])
        assert select_prediction(self.BOXES, logits).box is None
        assert select_prediction(self.BOXES, logits, first_row=0).slot == 0

    def test_probabilities(self) -> None:
        """Test importance probabilities are the first softmax column."""
        probs = importance_probabilities(np.array([[0.0, 0.0], [np.log(3.0), 0.0]]))
        assert np.allclose(probs, [0.5, 0.75])
