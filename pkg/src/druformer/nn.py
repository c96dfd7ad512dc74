"""Parameterised building blocks: modules, linear maps, feed-forward nets, attention."""

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import CheckpointError, ShapeError
from .tensor import (
    LAYER_NORM_EPS,
    Tensor,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_lastdim,
    swap_last,
    transpose,
)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: np.ndarray, name: Optional[str] = None) -> None:
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class providing deterministic parameter traversal.

    Parameters are discovered from instance attributes in assignment order; nested
    modules and lists of modules are walked recursively.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            full = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into the parameters.

        Raises:
            CheckpointError: On missing/unexpected names (strict mode) or shape mismatch
        """
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise CheckpointError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"Shape mismatch for {name}: {value.shape} vs {param.shape}")
            param.data[...] = value


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Sequence[int]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    """Affine map ``x @ W + b`` with W stored as in_features × out_features."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        if in_features < 1 or out_features < 1:
            raise ValueError("Linear layer widths must be positive")
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


def ffn_forward(x: Tensor, layers: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Apply affine layers with ReLU between consecutive layers (none after the last).

    Raises:
        ShapeError: If a layer's input width does not match
    """
    out = x
    for i, (weight, bias) in enumerate(layers):
        if out.shape[-1] != weight.shape[0]:
            raise ShapeError(f"FFN layer {i} expects width {weight.shape[0]}, got {out.shape[-1]}")
        out = matmul(out, weight) + bias
        if i < len(layers) - 1:
            out = relu(out)
    return out


class FeedForward(Module):
    """Multi-layer perceptron: affine–ReLU–…–affine."""

    def __init__(
        self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, num_layers: int = 2
    ) -> None:
        if d_hidden < 1:
            raise ValueError("FFN hidden width must be positive")
        if num_layers < 2:
            raise ValueError("FFN needs at least two layers")
        widths = [d_in] + [d_hidden] * (num_layers - 1) + [d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        return ffn_forward(x, [(layer.weight, layer.bias) for layer in self.layers])


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LAYER_NORM_EPS) -> None:
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention split into ``n_heads`` subspaces.

    Inputs are (B×)n×d; the returned attention maps are (B×)H×n_q×n_k.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, out_proj: bool = True) -> None:
        if n_heads < 1 or d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.o_proj: Optional[Linear] = Linear(d_model, d_model, rng) if out_proj else None

    def _split(self, x: Tensor) -> Tensor:
        batch, n, _ = x.shape
        return transpose(reshape(x, (batch, n, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tuple[Tensor, Tensor]:
        unbatched = query.ndim == 2
        if unbatched:
            query, key, value = (reshape(t, (1,) + t.shape) for t in (query, key, value))
        if query.shape[-1] != self.d_model or key.shape[-1] != self.d_model or value.shape[-1] != self.d_model:
            raise ShapeError(f"attention inputs must have width {self.d_model}")
        if key.shape[-2] != value.shape[-2]:
            raise ShapeError(f"key/value lengths differ: {key.shape} vs {value.shape}")
        batch, n_q, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        attn = softmax_lastdim(matmul(q, swap_last(k)) * (1.0 / math.sqrt(self.d_head)))
        heads = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (batch, n_q, self.d_model))
        out = self.o_proj(heads) if self.o_proj is not None else heads
        if unbatched:
            return reshape(out, out.shape[1:]), reshape(attn, attn.shape[1:])
        return out, attn
