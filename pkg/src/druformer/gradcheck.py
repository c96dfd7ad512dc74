"""Central finite-difference checks for every differentiable operation and one composite step."""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import DRUConfig, PEConfig, RunConfig
from .geometry import cxcywh_to_xyxy_tensor, giou_tensor
from .intention import IntentionExtractor
from .matching import LossWeights, hungarian, match_and_loss, match_cost, set_loss
from .model import DRUformer
from .models import GradCheckResult
from .nn import FeedForward, LayerNorm, MultiHeadAttention
from .participants import Backbone, DecoderLayer, DetectHead, EncoderLayer, backbone_forward, flatten_embed
from .relationship import DRULayer, ImportanceHead, fuse_entities, predict_important
from .rng import make_rng
from .scenes import GeneratorConfig
from .tensor import (
    Tape,
    Tensor,
    absolute,
    backward,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    layer_norm,
    log,
    log_softmax_lastdim,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax_lastdim,
    sqrt,
    stack,
    swap_last,
    transpose,
    tsum,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
MAX_SAMPLED = 16
GRADCHECK_STREAM = 7

Case = Tuple[Callable[[], Tensor], List[Tensor]]
CaseBuilder = Callable[[np.random.Generator], Case]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def check_case(fn: Callable[[], Tensor], leaves: Sequence[Tensor], rng: np.random.Generator, h: float = STEP) -> float:
    """Compare backward against central differences of ``sum(fn() * w)`` for a random w.

    Leaves larger than ``MAX_SAMPLED`` elements are checked at a random subset of
    coordinates. Leaf values are perturbed in place and restored.
    """
    with no_grad():
        weights = rng.normal(size=fn().shape)

    def value() -> float:
        with no_grad():
            return float(np.sum(fn().data * weights))

    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = tsum(mul(fn(), weights))
    backward(loss, tape)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        coords = np.arange(leaf.size)
        if leaf.size > MAX_SAMPLED:
            coords = np.sort(rng.choice(leaf.size, size=MAX_SAMPLED, replace=False))
        numeric = np.empty(len(coords))
        for j, i in enumerate(coords):
            index = np.unravel_index(i, leaf.shape)
            original = leaf.data[index]
            leaf.data[index] = original + h
            plus = value()
            leaf.data[index] = original - h
            minus = value()
            leaf.data[index] = original
            numeric[j] = (plus - minus) / (2.0 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], numeric))
        leaf.grad = None
    return worst


def _leaf(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _binary(op: Callable[[Tensor, Tensor], Tensor], b_fn: Callable[..., np.ndarray]) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        a = _leaf(rng.normal(size=(3, 4)))
        b = _leaf(b_fn(rng, a.data))
        return (lambda: op(a, b)), [a, b]

    return build


def _unary(op: Callable[[Tensor], Tensor], sample: Callable[[np.random.Generator], np.ndarray]) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        x = _leaf(sample(rng))
        return (lambda: op(x)), [x]

    return build


def _normal(*shape: int) -> Callable[[np.random.Generator], np.ndarray]:
    return lambda rng: rng.normal(size=shape)


def _case_getitem(rng: np.random.Generator) -> Case:
    x = _leaf(rng.normal(size=(3, 4)))
    return (lambda: concat([getitem(x, slice(0, 2)), getitem(x, np.array([2, 0, 2]))], axis=0)), [x]


def _case_concat(rng: np.random.Generator) -> Case:
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 2)))
    return (lambda: concat([a, b], axis=1)), [a, b]


def _case_stack(rng: np.random.Generator) -> Case:
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 3)))
    return (lambda: stack([a, b], axis=1)), [a, b]


def _case_matmul(rng: np.random.Generator) -> Case:
    a, b = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(4, 5)))
    return (lambda: matmul(a, b)), [a, b]


def _case_layer_norm(rng: np.random.Generator) -> Case:
    x = _leaf(rng.normal(size=(3, 5)))
    gamma, beta = _leaf(rng.normal(size=5)), _leaf(rng.normal(size=5))
    return (lambda: layer_norm(x, gamma, beta)), [x, gamma, beta]


def _case_conv2d(rng: np.random.Generator) -> Case:
    x = _leaf(rng.normal(size=(2, 5, 5)))
    kernels = _leaf(rng.normal(size=(3, 2, 2, 2)))
    bias = _leaf(rng.normal(size=3))
    return (lambda: conv2d(x, kernels, bias, stride=2)), [x, kernels, bias]


def _case_ffn(rng: np.random.Generator) -> Case:
    ffn = FeedForward(6, 5, 4, rng)
    x = _leaf(rng.normal(size=(3, 6)))
    return (lambda: ffn(x)), [x] + ffn.parameters()


def _case_attention(rng: np.random.Generator) -> Case:
    attn = MultiHeadAttention(8, 2, rng)
    q, kv = _leaf(rng.normal(size=(3, 8))), _leaf(rng.normal(size=(4, 8)))
    return (lambda: attn(q, kv, kv)[0]), [q, kv] + attn.parameters()


def _case_backbone(rng: np.random.Generator) -> Case:
    backbone = Backbone([3, 4], rng)
    image = _leaf(rng.uniform(size=(3, 8, 8)))
    return (lambda: backbone_forward(image, backbone)), [image] + backbone.parameters()


def _case_flatten_embed(rng: np.random.Generator) -> Case:
    z = _leaf(rng.normal(size=(4, 2, 3)))
    weight, bias = _leaf(rng.normal(size=(4, 6))), _leaf(rng.normal(size=6))
    return (lambda: flatten_embed(z, weight, bias)), [z, weight, bias]


def _case_encoder_layer(rng: np.random.Generator) -> Case:
    layer = EncoderLayer(8, 2, 8, rng)
    x = _leaf(rng.normal(size=(5, 8)))
    pos = Tensor(rng.normal(size=(5, 8)))
    return (lambda: layer(x, pos)[0]), [x] + layer.parameters()


def _case_decoder_layer(rng: np.random.Generator) -> Case:
    layer = DecoderLayer(8, 2, 8, rng)
    x, memory = _leaf(rng.normal(size=(3, 8))), _leaf(rng.normal(size=(4, 8)))
    return (lambda: layer(x, memory)), [x, memory] + layer.parameters()


def _case_detect_head(rng: np.random.Generator) -> Case:
    head = DetectHead(8, 4, rng)
    tokens = _leaf(rng.normal(size=(3, 8)))
    return (lambda: concat(list(head(tokens)), axis=-1)), [tokens] + head.parameters()


def _case_embed_intention(rng: np.random.Generator) -> Case:
    extractor = IntentionExtractor(4, 8, rng)
    return (lambda: extractor(np.array([1, 3, 1]))), extractor.parameters()


def _case_fuse_entities(rng: np.random.Generator) -> Case:
    norm = LayerNorm(8)
    c, e, o = _leaf(rng.normal(size=(1, 8))), _leaf(rng.normal(size=(1, 8))), _leaf(rng.normal(size=(3, 8)))
    return (lambda: fuse_entities(c, e, o, norm)), [c, e, o] + norm.parameters()


def _case_dru_layer(rng: np.random.Generator) -> Case:
    layer = DRULayer(8, 2, 8, rng)
    entities = _leaf(rng.normal(size=(4, 8)))
    return (lambda: layer(entities)[0]), [entities] + layer.parameters()


def _case_predict_important(rng: np.random.Generator) -> Case:
    head = ImportanceHead(8, rng)
    y = _leaf(rng.normal(size=(4, 8)))

    def run() -> Tensor:
        out = predict_important(y, head)
        return concat([out.boxes, out.logits], axis=-1)

    return run, [y] + head.parameters()


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.column_stack([rng.uniform(0.3, 0.7, size=(n, 2)), rng.uniform(0.1, 0.4, size=(n, 2))])


def _case_giou(rng: np.random.Generator) -> Case:
    a, b = _leaf(_random_boxes(rng, 3)), _leaf(_random_boxes(rng, 3))
    return (lambda: giou_tensor(cxcywh_to_xyxy_tensor(a), cxcywh_to_xyxy_tensor(b))), [a, b]


def _case_set_loss(rng: np.random.Generator) -> Case:
    weights = LossWeights()
    boxes, logits = _leaf(_random_boxes(rng, 5)), _leaf(rng.normal(size=(5, 2)))
    gt = _random_boxes(rng, 2)
    assignment = hungarian(match_cost(boxes.data, logits.data, gt, weights))
    return (lambda: set_loss(boxes, logits, gt, assignment, weights).total), [boxes, logits]


OP_CASES: Dict[str, CaseBuilder] = {
    "add": _binary(lambda a, b: a + b, lambda rng, a: rng.normal(size=a.shape)),
    "sub": _binary(lambda a, b: a - b, lambda rng, a: rng.normal(size=(4,))),
    "mul": _binary(lambda a, b: a * b, lambda rng, a: rng.normal(size=a.shape)),
    "div": _binary(div, lambda rng, a: rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.5, 1.5, size=a.shape)),
    "neg": _unary(lambda x: -x, _normal(3, 4)),
    "exp": _unary(exp, _normal(3, 4)),
    "log": _unary(log, lambda rng: rng.uniform(0.5, 2.0, size=(3, 4))),
    "sqrt": _unary(sqrt, lambda rng: rng.uniform(0.5, 2.0, size=(3, 4))),
    "relu": _unary(relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _unary(sigmoid, _normal(3, 4)),
    "absolute": _unary(absolute, lambda rng: _away_from_zero(rng, (3, 4))),
    "maximum": _binary(maximum, lambda rng, a: a + _away_from_zero(rng, a.shape)),
    "minimum": _binary(minimum, lambda rng, a: a + _away_from_zero(rng, a.shape)),
    "sum": _unary(lambda x: tsum(x, axis=1, keepdims=True), _normal(3, 4)),
    "mean": _unary(lambda x: mean(x, axis=0), _normal(3, 4)),
    "reshape": _unary(lambda x: reshape(x, (2, 6)), _normal(3, 4)),
    "transpose": _unary(lambda x: transpose(x, (2, 0, 1)), _normal(2, 3, 4)),
    "swap_last": _unary(swap_last, _normal(2, 3, 4)),
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "matmul": _case_matmul,
    "softmax_lastdim": _unary(softmax_lastdim, _normal(3, 4)),
    "log_softmax_lastdim": _unary(log_softmax_lastdim, _normal(3, 4)),
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "ffn_forward": _case_ffn,
    "multi_head_attention": _case_attention,
    "backbone_forward": _case_backbone,
    "flatten_embed": _case_flatten_embed,
    "encoder_layer": _case_encoder_layer,
    "decoder_layer": _case_decoder_layer,
    "detect_head": _case_detect_head,
    "embed_intention": _case_embed_intention,
    "fuse_entities": _case_fuse_entities,
    "dru_layer": _case_dru_layer,
    "predict_important": _case_predict_important,
    "giou_tensor": _case_giou,
    "set_loss": _case_set_loss,
}

COMPOSITE = "composite_step"


def toy_config(weights: Optional[LossWeights] = None) -> RunConfig:
    """8×8 images, d_d = 8, one layer everywhere."""
    return RunConfig(
        pe=PEConfig(
            image_h=8,
            image_w=8,
            downsample=4,
            backbone_channels=(4,),
            d_s=12,
            d_d=8,
            n_queries=3,
            enc_layers=1,
            dec_layers=1,
            n_heads=2,
            ffn_hidden=8,
        ),
        dru=DRUConfig(layers=1, heads=2, ffn_hidden=8),
        loss=weights or LossWeights(),
        generator=GeneratorConfig(image_size=8, min_participants=1, max_participants=3),
    )


def check_composite(rng: np.random.Generator, weights: Optional[LossWeights] = None, h: float = STEP) -> float:
    """Directional-derivative check of image → PE → DRU → set loss on the toy model."""
    config = toy_config(weights)
    model = DRUformer(config, rng)
    image = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    intention = [int(rng.integers(4))]
    gt = _random_boxes(rng, 1)

    def loss() -> Tensor:
        out = model(image, intention)
        first = model.first_candidate_row
        total, _ = match_and_loss(
            getitem(out.boxes, (0, slice(first, None))), getitem(out.logits, (0, slice(first, None))), gt, config.loss
        )
        return total.total

    params = model.parameters()
    directions = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in directions))
    directions = [d / norm for d in directions]

    model.zero_grad()
    with Tape() as tape:
        total = loss()
    backward(total, tape)
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, directions) if p.grad is not None)
    model.zero_grad()

    def shifted(scale: float) -> float:
        for p, d in zip(params, directions):
            p.data += scale * d
        try:
            with no_grad():
                return loss().item()
        finally:
            for p, d in zip(params, directions):
                p.data -= scale * d

    numeric = (shifted(h) - shifted(-h)) / (2.0 * h)
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-12)


def run_gradcheck(
    seeds: Iterable[int] = range(100),
    cases: Optional[Dict[str, CaseBuilder]] = None,
    composite: bool = True,
    tolerance: float = TOLERANCE,
    weights: Optional[LossWeights] = None,
) -> List[GradCheckResult]:
    """One result per case (worst error across seeds), plus the composite step."""
    seeds = list(seeds)
    suite = dict(OP_CASES if cases is None else cases)
    results: List[GradCheckResult] = []
    for name, build in suite.items():
        worst = 0.0
        for seed in seeds:
            rng = make_rng(seed, GRADCHECK_STREAM)
            fn, leaves = build(rng)
            worst = max(worst, check_case(fn, leaves, rng))
        passed = worst < tolerance
        if not passed:
            logger.warning(f"Gradient check failed for {name}: max relative error {worst:.3e}")
        results.append(GradCheckResult(name=name, max_error=worst, passed=passed, seeds=len(seeds)))
    if composite:
        worst = max(check_composite(make_rng(seed, GRADCHECK_STREAM, 1), weights) for seed in seeds)
        results.append(GradCheckResult(COMPOSITE, worst, worst < tolerance, len(seeds)))
    logger.info(f"Gradient check: {sum(r.passed for r in results)}/{len(results)} passed over {len(seeds)} seeds")
    return results
