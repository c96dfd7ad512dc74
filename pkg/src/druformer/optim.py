"""AdamW with decoupled weight decay, a step learning-rate schedule and gradient clipping."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError
from .nn import Module, Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """First/second moment estimates keyed by parameter name, plus the step count."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Dict[str, np.ndarray]:
    """Apply one AdamW update and return the new parameter arrays.

    ``state`` is advanced in place. Iteration follows the key order of ``params`` so the
    update is deterministic.

    Raises:
        ShapeError: If names or shapes of params, grads and state disagree
    """
    if set(params) != set(grads):
        raise ShapeError("params and grads must have the same names")
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match parameter {name} {value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m, v = np.zeros_like(value), np.zeros_like(value)
        elif m.shape != value.shape or v.shape != value.shape:
            raise ShapeError(f"Optimizer state shape mismatch for {name}")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        decayed = value * (1.0 - lr * weight_decay)
        updated[name] = decayed - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return updated


def clip_grad_norm(parameters: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Stateful wrapper applying :func:`adamw_step` to a module's parameters.

    Parameters whose name starts with one of ``frozen`` are left out of every
    update, so they receive neither the gradient step nor weight decay.
    """

    def __init__(
        self,
        module: Module,
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        frozen: Sequence[str] = (),
    ) -> None:
        self._module = module
        self.frozen = tuple(frozen)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamWState()

    def step(self) -> None:
        named = {name: p for name, p in self._module.named_parameters() if not name.startswith(self.frozen)}
        params = {name: p.data for name, p in named.items()}
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in named.items()}
        updated = adamw_step(params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)
        for name, value in updated.items():
            named[name].data[...] = value

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten moments for checkpointing."""
        arrays = {f"m.{name}": value for name, value in self.state.m.items()}
        arrays.update({f"v.{name}": value for name, value in self.state.v.items()})
        return arrays

    def load_state_arrays(self, step: int, arrays: Dict[str, np.ndarray]) -> None:
        self.state = AdamWState(
            step=step,
            m={k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m.")},
            v={k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v.")},
        )


class StepLR:
    """Multiply the learning rate by ``gamma`` every ``step_size`` epochs."""

    def __init__(self, optimizer: AdamW, step_size: int, gamma: float = 0.1) -> None:
        if step_size < 1:
            raise ValueError("step_size must be positive")
        self._optimizer = optimizer
        self.base_lr = optimizer.lr
        self.step_size = step_size
        self.gamma = gamma

    def set_epoch(self, epoch: int) -> float:
        lr = self.base_lr * self.gamma ** (epoch // self.step_size)
        if lr != self._optimizer.lr:
            logger.info(f"Learning rate set to {lr:.3g} at epoch {epoch}")
        self._optimizer.lr = lr
        return lr
