"""Unit tests for the nn and optim modules."""

import numpy as np
import pytest

from druformer.exceptions import CheckpointError, ShapeError
from druformer.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, ffn_forward
from druformer.optim import AdamW, AdamWState, StepLR, adamw_step, clip_grad_norm
from druformer.tensor import Tensor


class _Pair(Module):
    def __init__(self, rng: np.random.Generator) -> None:
        self.first = Linear(2, 3, rng)
        self.blocks = [Linear(3, 3, rng), Linear(3, 1, rng)]
        self.scale = Parameter(np.ones(1))


class TestModule:
    """Tests for parameter traversal and state dicts."""

    def test_named_parameters_order(self, rng: np.random.Generator) -> None:
        """Test that parameters are named and ordered by attribute assignment."""
        names = [name for name, _ in _Pair(rng).named_parameters()]
        assert names == [
            "first.weight",
            "first.bias",
            "blocks.0.weight",
            "blocks.0.bias",
            "blocks.1.weight",
            "blocks.1.bias",
            "scale",
        ]

    def test_num_parameters(self, rng: np.random.Generator) -> None:
        """Test parameter counting."""
        assert _Pair(rng).num_parameters() == (2 * 3 + 3) + (3 * 3 + 3) + (3 + 1) + 1

    def test_state_dict_round_trip(self, rng: np.random.Generator) -> None:
        """Test that load_state_dict restores copied values."""
        module = _Pair(rng)
        state = module.state_dict()
        module.first.weight.data[...] = 0.0
        module.load_state_dict(state)
        assert np.array_equal(module.first.weight.data, state["first.weight"])

    def test_load_state_dict_strict(self, rng: np.random.Generator) -> None:
        """Test that missing names and wrong shapes raise CheckpointError."""
        module = _Pair(rng)
        state = module.state_dict()
        del state["scale"]
        with pytest.raises(CheckpointError, match="missing"):
            module.load_state_dict(state)
        state = module.state_dict()
        state["scale"] = np.ones(2)
        with pytest.raises(CheckpointError, match="Shape mismatch"):
            module.load_state_dict(state)

    def test_zero_grad(self, rng: np.random.Generator) -> None:
        """Test that zero_grad clears every gradient."""
        module = _Pair(rng)
        for p in module.parameters():
            p.grad = np.ones_like(p.data)
        module.zero_grad()
        assert all(p.grad is None for p in module.parameters())


class TestLayers:
    """Tests for Linear, FeedForward, LayerNorm and MultiHeadAttention."""

    def test_linear_shape(self, rng: np.random.Generator) -> None:
        """Test the affine output shape on batched input."""
        assert Linear(4, 6, rng)(Tensor(np.zeros((2, 3, 4)))).shape == (2, 3, 6)

    def test_ffn_width_mismatch(self, rng: np.random.Generator) -> None:
        """Test that ffn_forward names the mismatching layer."""
        with pytest.raises(ShapeError, match="layer 0"):
            ffn_forward(Tensor(np.zeros((1, 3))), [(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))])

    def test_ffn_no_relu_after_last_layer(self) -> None:
        """Test that the final affine output can be negative."""
        weight = Tensor(np.array([[1.0]]))
        out = ffn_forward(Tensor([[2.0]]), [(weight, Tensor([0.0])), (-1.0 * weight, Tensor([0.0]))])
        assert out.data.tolist() == [[-2.0]]

    def test_feedforward_layers(self, rng: np.random.Generator) -> None:
        """Test the layer count of a three-layer FFN."""
        ffn = FeedForward(4, 8, 2, rng, num_layers=3)
        assert len(ffn.layers) == 3
        assert ffn(Tensor(np.zeros((5, 4)))).shape == (5, 2)

    def test_layernorm_defaults(self) -> None:
        """Test that a fresh LayerNorm has identity affine."""
        norm = LayerNorm(3)
        assert norm.gamma.data.tolist() == [1.0, 1.0, 1.0]
        assert norm.beta.data.tolist() == [0.0, 0.0, 0.0]

    def test_attention_shapes_and_rows(self, rng: np.random.Generator) -> None:
        """Test attention output shapes and row-stochastic maps."""
        attn = MultiHeadAttention(8, 2, rng)
        q = Tensor(rng.normal(size=(3, 8)))
        kv = Tensor(rng.normal(size=(5, 8)))
        out, maps = attn(q, kv, kv)

        assert out.shape == (3, 8)
        assert maps.shape == (2, 3, 5)
        assert np.allclose(maps.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_attention_without_output_projection(self, rng: np.random.Generator) -> None:
        """Test that out_proj=False drops the output projection parameters."""
        assert MultiHeadAttention(8, 2, rng, out_proj=False).num_parameters() == 3 * (8 * 8 + 8)

    def test_attention_indivisible_heads(self, rng: np.random.Generator) -> None:
        """Test that the model width must divide evenly among heads."""
        with pytest.raises(ShapeError):
            MultiHeadAttention(8, 3, rng)


class TestAdamW:
    """Tests for the optimizer, clipping and schedule."""

    def test_first_step_moves_by_lr(self) -> None:
        """Test that the bias-corrected first step has magnitude lr."""
        state = AdamWState()
        updated = adamw_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, state, lr=0.1, weight_decay=0.0)
        assert state.step == 1
        assert np.isclose(updated["w"][0], 0.9, atol=1e-6)

    def test_decoupled_weight_decay(self) -> None:
        """Test that weight decay shrinks parameters independently of the gradient."""
        updated = adamw_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamWState(), lr=0.1, weight_decay=0.5)
        assert np.isclose(updated["w"][0], 2.0 * (1.0 - 0.05))

    def test_zero_gradient_zero_decay_is_identity(self, rng: np.random.Generator) -> None:
        """Test that a zero gradient without weight decay leaves parameters unchanged."""
        params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        grads = {name: np.zeros_like(value) for name, value in params.items()}
        state = AdamWState()
        for _ in range(3):
            updated = adamw_step(params, grads, state, lr=0.1, weight_decay=0.0)
            for name, value in params.items():
                assert np.array_equal(updated[name], value)
            params = updated

    def test_descends_on_square(self) -> None:
        """Test that steps on f(x) = x² from x = 1 decrease f every time."""
        params = {"x": np.array([1.0])}
        state = AdamWState()
        values = [1.0]
        for _ in range(5):
            params = adamw_step(params, {"x": 2.0 * params["x"]}, state, lr=0.05, weight_decay=0.01)
            values.append(float(params["x"][0] ** 2))
        assert all(later < earlier for earlier, later in zip(values, values[1:]))

    def test_frozen_prefix_skips_update(self, rng: np.random.Generator) -> None:
        """Test that frozen parameters get neither the step nor weight decay."""
        module = _Pair(rng)
        before = module.state_dict()
        optimizer = AdamW(module, lr=0.1, weight_decay=0.5, frozen=("blocks.1.",))
        for p in module.parameters():
            p.grad = np.ones_like(p.data)
        optimizer.step()

        after = module.state_dict()
        assert np.array_equal(after["blocks.1.weight"], before["blocks.1.weight"])
        assert np.array_equal(after["blocks.1.bias"], before["blocks.1.bias"])
        assert not np.array_equal(after["blocks.0.weight"], before["blocks.0.weight"])
        assert not any(name.startswith("blocks.1.") for name in optimizer.state.m)

    def test_name_mismatch(self) -> None:
        """Test that params and grads must share names."""
        with pytest.raises(ShapeError):
            adamw_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, AdamWState(), lr=0.1, weight_decay=0.0)

    def test_clip_grad_norm(self) -> None:
        """Test that clipping rescales to the maximum norm and reports the original."""
        p = Parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        assert np.allclose(p.grad, [0.6, 0.8])

    def test_clip_disabled_at_zero(self) -> None:
        """Test that a zero maximum leaves gradients untouched."""
        p = Parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        clip_grad_norm([p], 0.0)
        assert p.grad.tolist() == [3.0, 4.0]

    def test_state_arrays_round_trip(self, rng: np.random.Generator) -> None:
        """Test that optimizer moments survive flattening and reloading."""
        module = _Pair(rng)
        optimizer = AdamW(module, lr=0.01)
        for p in module.parameters():
            p.grad = np.ones_like(p.data)
        optimizer.step()
        restored = AdamW(module, lr=0.01)
        restored.load_state_arrays(optimizer.state.step, optimizer.state_arrays())
        assert restored.state.step == 1
        assert np.array_equal(restored.state.m["scale"], optimizer.state.m["scale"])

    def test_step_lr(self, rng: np.random.Generator) -> None:
        """Test the step schedule."""
        optimizer = AdamW(_Pair(rng), lr=1.0)
        schedule = StepLR(optimizer, step_size=10, gamma=0.1)
        assert schedule.set_epoch(9) == 1.0
        assert np.isclose(schedule.set_epoch(10), 0.1)
        assert np.isclose(optimizer.lr, 0.1)
        assert np.isclose(schedule.set_epoch(25), 0.01)
