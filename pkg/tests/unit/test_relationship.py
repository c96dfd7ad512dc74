"""Unit tests for ego fusion, the relationship stack and relationship maps."""

import numpy as np
import pytest

from druformer.exceptions import InvariantViolation, ShapeError
from druformer.nn import LayerNorm
from druformer.relationship import (
    DRULayer,
    ImportanceHead,
    RelationshipStack,
    check_row_stochastic,
    cosine_relmap,
    dru_forward,
    fuse_entities,
    location_relmap,
    semantic_relmap,
)
from druformer.tensor import Tensor


class TestFusion:
    """Tests for building the entity set."""

    def test_participant_rows_unchanged(self, rng: np.random.Generator) -> None:
        """Test that rows 1..N equal the participant tokens exactly."""
        tokens = rng.normal(size=(3, 8))
        intention, ego = Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8)))
        entities = fuse_entities(intention, ego, Tensor(tokens), LayerNorm(8))

        assert entities.shape == (4, 8)
        assert np.array_equal(entities.data[1:], tokens)

    def test_cancelling_intention_gives_norm_offset(self, rng: np.random.Generator) -> None:
        """Test that C = −e normalises to the LayerNorm offset."""
        ego = rng.normal(size=(1, 8))
        norm = LayerNorm(8)
        norm.beta.data[...] = np.arange(8, dtype=np.float64)
        entities = fuse_entities(Tensor(-ego), Tensor(ego), Tensor(np.zeros((2, 8))), norm)

        assert np.allclose(entities.data[0], np.arange(8))

    def test_batched_fusion(self, rng: np.random.Generator) -> None:
        """Test fusion with a batch of intentions and token sets."""
        entities = fuse_entities(
            Tensor(rng.normal(size=(2, 1, 8))),
            Tensor(rng.normal(size=(1, 8))),
            Tensor(rng.normal(size=(2, 3, 8))),
            LayerNorm(8),
        )
        assert entities.shape == (2, 4, 8)

    def test_shape_errors(self, rng: np.random.Generator) -> None:
        """Test that C must be a single row of matching width."""
        with pytest.raises(ShapeError):
            fuse_entities(Tensor(np.zeros((2, 8))), Tensor(np.zeros((1, 8))), Tensor(np.zeros((3, 8))), LayerNorm(8))
        with pytest.raises(ShapeError):
            fuse_entities(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((3, 8))), LayerNorm(4))


class TestRelationshipStack:
    """Tests for relationship attention layers and the importance head."""

    def test_identical_entities_attend_uniformly(self, rng: np.random.Generator) -> None:
        """Test that identical rows produce uniform attention."""
        layer = DRULayer(8, 2, 16, rng)
        row = rng.normal(size=(1, 8))
        out, maps = layer(Tensor(np.repeat(row, 5, axis=0)))

        assert out.shape == (5, 8)
        assert maps.shape == (2, 5, 5)
        assert np.allclose(maps.data, 0.2)

    def test_stack_returns_one_map_per_layer(self, rng: np.random.Generator) -> None:
        """Test that every layer contributes row-stochastic maps."""
        stack = RelationshipStack(8, 3, 2, 16, rng)
        y, maps = stack(Tensor(rng.normal(size=(2, 4, 8))))

        assert y.shape == (2, 4, 8)
        assert len(maps) == 3
        assert all(m.shape == (2, 2, 4, 4) for m in maps)
        check_row_stochastic(maps)

    def test_participant_permutation_equivariance(self, rng: np.random.Generator) -> None:
        """Test that permuting participant rows permutes Y rows and relationship maps alike."""
        stack = RelationshipStack(8, 2, 2, 16, rng)
        head = rng.normal(size=(1, 8))
        tokens = rng.normal(size=(4, 8))
        perm = np.array([2, 0, 3, 1])
        order = np.concatenate([[0], perm + 1])

        y, maps = stack(Tensor(np.concatenate([head, tokens])))
        y_perm, maps_perm = stack(Tensor(np.concatenate([head, tokens[perm]])))

        assert np.allclose(y_perm.data, y.data[order], atol=1e-10)
        for layer_maps, layer_maps_perm in zip(maps, maps_perm):
            assert np.allclose(layer_maps_perm.data, layer_maps.data[:, order][:, :, order], atol=1e-10)

    def test_no_output_projection(self, rng: np.random.Generator) -> None:
        """Test that relationship attention has only query/key/value projections."""
        assert DRULayer(8, 2, 16, rng).attn.num_parameters() == 3 * (8 * 8 + 8)

    def test_empty_stack_rejected(self, rng: np.random.Generator) -> None:
        """Test that at least one layer is required."""
        with pytest.raises(ValueError):
            dru_forward(Tensor(np.zeros((2, 8))), [])

    def test_row_stochastic_violation_names_layer(self) -> None:
        """Test that a bad map raises InvariantViolation naming its layer."""
        good = Tensor(np.full((1, 2, 2), 0.5))
        bad = Tensor(np.array([[[0.5, 0.6], [0.5, 0.5]]]))
        with pytest.raises(InvariantViolation, match="Layer 1"):
            check_row_stochastic([good, bad])

    def test_importance_head_outputs(self, rng: np.random.Generator) -> None:
        """Test box range and logit width of the importance head."""
        out = ImportanceHead(8, rng)(Tensor(rng.normal(size=(5, 8))))

        assert out.boxes.shape == (5, 4)
        assert out.logits.shape == (5, 2)
        assert out.boxes.data.min() > 0.0 and out.boxes.data.max() < 1.0


class TestRelationshipMaps:
    """Tests for the exported pairwise maps."""

    def test_cosine_map(self) -> None:
        """Test cosine similarity including a zero row."""
        sim = cosine_relmap(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [0.0, 0.0]]))

        assert np.allclose(sim[:3, :3], [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        assert sim[3, 3] == 1.0
        assert sim[3, 0] == 0.0
        assert np.array_equal(sim, sim.T)

    def test_location_map(self) -> None:
        """Test the exponential distance decay at one sigma."""
        boxes = np.array([[0.5, 0.5, 0.1, 0.1], [0.75, 0.5, 0.2, 0.2], [0.5, 0.5, 0.3, 0.3]])
        rel = location_relmap(boxes, sigma=0.25)

        assert np.allclose(np.diag(rel), 1.0)
        assert np.isclose(rel[0, 1], np.exp(-1.0))
        assert np.isclose(rel[0, 1], 0.3679, atol=1e-4)
        assert rel[0, 2] == 1.0
        assert np.array_equal(rel, rel.T)

    def test_location_map_sigma(self) -> None:
        """Test that sigma must be positive."""
        with pytest.raises(ValueError):
            location_relmap(np.zeros((2, 4)), sigma=0.0)

    def test_semantic_map(self) -> None:
        """Test class-equality indicators."""
        rel = semantic_relmap(["ego", "vehicle", "vehicle", "pedestrian"])
        assert rel.tolist() == [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
