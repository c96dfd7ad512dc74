"""Participants extractor: conv backbone, flatten/embed, transformer encoder, query decoder.

The pipeline turns an image into N participant tokens:

    z = backbone(I)                 d_s × H_S × W_S
    F = flatten_embed(z)            (H_S·W_S) × d_d
    S = encode(F, p)                p = sine_posenc(H_S, W_S, d_d)
    O = decode(Q, p_p, S)           N × d_d

A detection head decodes O into boxes and classes; it is trained only while
pretraining the extractor as a plain detector.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from .config import PEConfig
from .exceptions import ShapeError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, xavier_uniform
from .tensor import Tensor, as_tensor, conv2d, matmul, relu, reshape, sigmoid, transpose

logger = logging.getLogger(__name__)

POSENC_TEMPERATURE = 10000.0
BACKBONE_KERNEL = 2
BACKBONE_STRIDE = 2


class Backbone(Module):
    """Stack of stride-2 convolutions, each followed by ReLU."""

    def __init__(self, channels: List[int], rng: np.random.Generator, in_channels: int = 3) -> None:
        self.kernels: List[Parameter] = []
        self.biases: List[Parameter] = []
        previous = in_channels
        for width in channels:
            fan_in = previous * BACKBONE_KERNEL * BACKBONE_KERNEL
            fan_out = width * BACKBONE_KERNEL * BACKBONE_KERNEL
            self.kernels.append(
                Parameter(xavier_uniform(rng, fan_in, fan_out, (width, previous, BACKBONE_KERNEL, BACKBONE_KERNEL)))
            )
            self.biases.append(Parameter(np.zeros(width)))
            previous = width
        self.downsample = BACKBONE_STRIDE ** len(channels)

    def __call__(self, image: Tensor) -> Tensor:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> Tensor:
    """Reduce (B×)3×H×W to (B×)d_s×H/downsample×W/downsample.

    Raises:
        ShapeError: If H or W is not divisible by the downsample factor
    """
    height, width = image.shape[-2], image.shape[-1]
    if height % backbone.downsample or width % backbone.downsample:
        raise ShapeError(f"Image {height}×{width} not divisible by downsample {backbone.downsample}")
    z = image
    for kernel, bias in zip(backbone.kernels, backbone.biases):
        z = relu(conv2d(z, kernel, bias, stride=BACKBONE_STRIDE))
    return z


def flatten_embed(z: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Flatten a (B×)d_s×H_S×W_S map row-major into tokens and project each to d_d.

    Token i corresponds to spatial cell (i div W_S, i mod W_S).
    """
    unbatched = z.ndim == 3
    if unbatched:
        z = reshape(z, (1,) + z.shape)
    batch, channels, h_s, w_s = z.shape
    if weight.shape[0] != channels:
        raise ShapeError(f"Projection expects {weight.shape[0]} channels, got {channels}")
    tokens = transpose(reshape(z, (batch, channels, h_s * w_s)), (0, 2, 1))
    out = matmul(tokens, weight) + bias
    return reshape(out, out.shape[1:]) if unbatched else out


def sine_posenc(h_s: int, w_s: int, d_d: int) -> np.ndarray:
    """2-D sine/cosine encoding of shape (h_s·w_s) × d_d.

    The first half of the channels encodes the row, the second half the column, each
    as [sin(pos·ω), cos(pos·ω)] over d_d/4 geometric frequencies.

    Raises:
        ShapeError: If d_d is not divisible by 4
    """
    if d_d % 4 != 0:
        raise ShapeError(f"d_d must be divisible by 4, got {d_d}")
    quarter = d_d // 4
    omega = 1.0 / POSENC_TEMPERATURE ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(h_s, dtype=np.float64), np.arange(w_s, dtype=np.float64), indexing="ij")

    def encode_axis(pos: np.ndarray) -> np.ndarray:
        angles = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return np.concatenate([encode_axis(rows), encode_axis(cols)], axis=1)


class EncoderLayer(Module):
    """Self-attention + FFN with post-norm residuals; positions are added to queries and keys."""

    def __init__(self, d_model: int, n_heads: int, d_hidden: int, rng: np.random.Generator) -> None:
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, pos: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        qk = x if pos is None else x + pos
        attended, attn = self.self_attn(qk, qk, x)
        x = self.norm1(x + attended)
        return self.norm2(x + self.ffn(x)), attn


class DecoderLayer(Module):
    """Query self-attention, cross-attention into the encoded sequence, then FFN."""

    def __init__(self, d_model: int, n_heads: int, d_hidden: int, rng: np.random.Generator) -> None:
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, d_model, rng)
        self.norm3 = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor, memory_pos: Optional[Tensor] = None) -> Tensor:
        attended, _ = self.self_attn(x, x, x)
        x = self.norm1(x + attended)
        keys = memory if memory_pos is None else memory + memory_pos
        attended, _ = self.cross_attn(x, keys, memory)
        x = self.norm2(x + attended)
        return self.norm3(x + self.ffn(x))


class Encoder(Module):
    def __init__(self, config: PEConfig, rng: np.random.Generator) -> None:
        self.layers = [
            EncoderLayer(config.d_d, config.n_heads, config.ffn_hidden, rng) for _ in range(config.enc_layers)
        ]

    def forward_with_attention(self, features: Tensor, pos: Optional[Tensor] = None) -> Tuple[Tensor, List[Tensor]]:
        if pos is not None and pos.shape[-2:] != features.shape[-2:]:
            raise ShapeError(f"Positional encoding {pos.shape} does not match features {features.shape}")
        maps: List[Tensor] = []
        x = features
        for layer in self.layers:
            x, attn = layer(x, pos)
            maps.append(attn)
        return x, maps

    def __call__(self, features: Tensor, pos: Optional[Tensor] = None) -> Tensor:
        """S = f_e(F + p) for every layer's queries/keys."""
        return self.forward_with_attention(features, pos)[0]


class Decoder(Module):
    def __init__(self, config: PEConfig, rng: np.random.Generator) -> None:
        self.layers = [
            DecoderLayer(config.d_d, config.n_heads, config.ffn_hidden, rng) for _ in range(config.dec_layers)
        ]

    def __call__(
        self, queries: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Optional[Tensor] = None
    ) -> Tensor:
        """O = f_d(Q + p_p, S); returns one token per query.

        Raises:
            ShapeError: If the query and positional shapes differ or widths mismatch
        """
        if queries.shape != query_pos.shape:
            raise ShapeError(f"Queries {queries.shape} and query positions {query_pos.shape} differ")
        if queries.shape[-1] != memory.shape[-1]:
            raise ShapeError(f"Query width {queries.shape[-1]} does not match memory width {memory.shape[-1]}")
        x = queries + query_pos
        if memory.ndim == 3 and x.ndim == 2:
            x = x + Tensor(np.zeros((memory.shape[0],) + x.shape))
        for layer in self.layers:
            x = layer(x, memory, memory_pos)
        return x


class DetectHead(Module):
    """Class logits (n_classes + no-object) and sigmoid-squashed cxcywh boxes per token."""

    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator) -> None:
        self.class_embed = Linear(d_model, n_classes + 1, rng)
        self.box_embed = FeedForward(d_model, d_model, 4, rng, num_layers=3)

    def __call__(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        return sigmoid(self.box_embed(tokens)), self.class_embed(tokens)


class ParticipantsExtractor(Module):
    """Image → participant tokens O, plus the pretraining detection head."""

    def __init__(self, config: PEConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.backbone = Backbone(list(config.backbone_channels) + [config.d_s], rng)
        self.input_proj = Linear(config.d_s, config.d_d, rng)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.query_embed = Parameter(rng.normal(0.0, 1.0, size=(config.n_queries, config.d_d)))
        self.query_pos = Parameter(rng.normal(0.0, 1.0, size=(config.n_queries, config.d_d)))
        self.detect_head = DetectHead(config.d_d, config.n_classes, rng)
        self._pos = Tensor(sine_posenc(config.feature_h, config.feature_w, config.d_d))

    def __call__(self, images: Tensor) -> Tensor:
        """Participant tokens of shape (B×)N×d_d."""
        images = as_tensor(images)
        expected = (self.config.image_h, self.config.image_w)
        if images.shape[-2:] != expected:
            raise ShapeError(f"Expected images of {expected[0]}×{expected[1]}, got {images.shape}")
        z = self.backbone(images)
        features = flatten_embed(z, self.input_proj.weight, self.input_proj.bias)
        memory = self.encoder(features, self._pos)
        return self.decoder(self.query_embed, self.query_pos, memory, self._pos)

    def detect(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        """(boxes (B×)N×4 cxcywh in (0,1), logits (B×)N×(n_classes+1))."""
        return self.detect_head(tokens)
