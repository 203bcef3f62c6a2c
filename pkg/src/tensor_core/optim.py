"""Gradient clipping, SGD/AdamW updates and the warmup-cosine learning-rate schedule."""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.tensor_core.ops import parameters_with_grads
from src.tensor_core.tensor import Tensor
from src.utils.errors import ConfigError, OptimizerStateError
from src.utils.monitors import HighLevelErrors

SGD = "sgd"
ADAMW = "adamw"


@dataclass
class OptimizerState:
    """
    Mutable optimizer state.

    Attributes:
        kind (str): "sgd" (inner loop, plain p <- p - lr * g) or "adamw" (outer loop).
        lr (float): Learning rate used when optimizer_apply gets no explicit lr.
        betas (tuple): AdamW moment decay rates.
        weight_decay (float): Decoupled weight decay (AdamW only).
        eps (float): AdamW denominator floor.
        step_count (int): Number of applies so far.
        first_moments / second_moments (list[np.ndarray]): One array per parameter.
    """
    kind: str = ADAMW
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (SGD, ADAMW):
            message = f"Unknown optimizer kind '{self.kind}', expected '{SGD}' or '{ADAMW}'."
            HighLevelErrors.error(message)
            raise ConfigError(message)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """
    Scale all gradients by max_norm / g when their global L2 norm g exceeds max_norm.

    Returns:
        float: The pre-clip global norm (0.0 for an empty list).
    """
    with_grads = parameters_with_grads(params)
    total = 0.0
    for p in with_grads:
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in with_grads:
            p.grad = p.grad * factor
    return norm


def optimizer_apply(state: OptimizerState, params: Sequence[Tensor],
                    grads: Optional[Sequence[np.ndarray]] = None, lr: Optional[float] = None) -> None:
    """
    Update params in place.

    SGD: p <- p - lr * g exactly. AdamW: decoupled weight decay followed by a
    bias-corrected Adam step. Parameters whose gradient is None are left alone.

    Raises:
        OptimizerStateError: If stored moments do not match the parameter shapes.
    """
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        message = f"optimizer_apply got {len(params)} parameters but {len(grads)} gradients."
        HighLevelErrors.error(message)
        raise OptimizerStateError(message)
    lr = state.lr if lr is None else float(lr)
    state.step_count += 1

    if state.kind == SGD:
        for p, g in zip(params, grads):
            if g is not None:
                p.data = p.data - lr * g
        return

    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in params]
        state.second_moments = [np.zeros_like(p.data) for p in params]
    if len(state.first_moments) != len(params) or any(
            m.shape != p.shape for m, p in zip(state.first_moments, params)):
        message = (f"AdamW state holds {[m.shape for m in state.first_moments]} "
                   f"but parameters are {[p.shape for p in params]}.")
        HighLevelErrors.error(message)
        raise OptimizerStateError(message)

    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1 ** state.step_count
    correction2 = 1.0 - beta2 ** state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = beta1 * state.first_moments[i] + (1.0 - beta1) * g
        v = beta2 * state.second_moments[i] + (1.0 - beta2) * g * g
        state.first_moments[i], state.second_moments[i] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        decayed = p.data * (1.0 - lr * state.weight_decay)
        p.data = decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps)


class WarmupCosineSchedule:
    """
    Linear warmup to peak_lr over the first warmup_fraction of steps, then cosine decay to 0.

    Steps are 1-based: lr(0) = 0 is never used for an update, step 1 takes the first
    grid point, lr(warmup_steps) = peak and lr(total_steps) = 0. Updates read
    their rate from update_lr.
    """

    def __init__(self, peak_lr: float, total_steps: int, warmup_fraction: float = 0.1,
                 kind: str = "cosine"):
        self.peak_lr = float(peak_lr)
        self.total_steps = max(1, int(total_steps))
        self.warmup_steps = int(round(warmup_fraction * self.total_steps))
        self.kind = kind

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.peak_lr
        if step <= 0:
            return 0.0
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        decay_steps = self.total_steps - self.warmup_steps
        if decay_steps <= 0:
            return self.peak_lr
        progress = min(1.0, (step - self.warmup_steps) / decay_steps)
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def update_lr(self, step: int) -> float:
        """
        Learning rate of the step-th update (1-based). Warmup updates take their grid point;
        decay updates take the grid point they start from, so the first decay update runs
        at peak_lr and the last one stays above zero.
        """
        if self.kind == "constant" or step <= self.warmup_steps:
            return self(step)
        return self(step - 1) if step - 1 > self.warmup_steps else self.peak_lr
