"""
Differentiable operations used by the transformer and both optimization loops.

Every op computes its forward value with numpy and registers a closure that maps the
output gradient to one gradient per parent (None where no gradient flows).
"""
import math
from typing import Iterable, List, Sequence, Union

import numpy as np

from src.tensor_core.tensor import DTYPE, Tensor, make_result
from src.utils.errors import DegenerateRowError, DimensionError, TaskError
from src.utils.monitors import HighLevelErrors

# Additive mask value standing in for -inf; anything at or below MASK_THRESHOLD is masked
MASK_VALUE = -1e9
MASK_THRESHOLD = MASK_VALUE / 2

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _dimension_error(message: str) -> None:
    HighLevelErrors.error(message)
    raise DimensionError(message)


def masked_cells(mask: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Boolean array, True where the additive mask blocks attention."""
    values = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=DTYPE)
    return values <= MASK_THRESHOLD


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        _dimension_error(f"add: cannot broadcast {a.shape} with {b.shape}: {e}")
    return make_result(data, (a, b), "add",
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        _dimension_error(f"sub: cannot broadcast {a.shape} with {b.shape}: {e}")
    return make_result(data, (a, b), "sub",
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        _dimension_error(f"mul: cannot broadcast {a.shape} with {b.shape}: {e}")
    return make_result(data, (a, b), "mul",
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_result(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return make_result(data, (a,), "gelu", backward_fn)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    data = x * sig
    return make_result(data, (a,), "silu", lambda g: (g * (sig + x * sig * (1.0 - sig)),))


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    return make_result(np.array(a.data.sum()), (a,), "sum", lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make_result(np.array(a.data.sum() / n), (a,), "mean",
                       lambda g: (np.full(a.shape, float(g) / n),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m x k] @ [k x n]; backward dA = dC @ B^T, dB = A^T @ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        _dimension_error(f"matmul expects 2-D operands, got {a.shape} and {b.shape}.")
    if a.shape[1] != b.shape[0]:
        _dimension_error(f"matmul inner dimensions differ: {a.shape} @ {b.shape}.")
    data = a.data @ b.data

    def backward_fn(g):
        grad_a = g @ b.data.T if a.requires_grad else None
        grad_b = a.data.T @ g if b.requires_grad else None
        return grad_a, grad_b

    return make_result(data, (a, b), "matmul", backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        _dimension_error(f"transpose expects a 2-D tensor, got {a.shape}.")
    return make_result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice a[:, start:stop] (used to split heads)."""
    data = a.data[:, start:stop].copy()

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        return (grad,)

    return make_result(data, (a,), "columns", backward_fn)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        _dimension_error("concat_columns needs at least one tensor.")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        _dimension_error(f"concat_columns row counts differ: {[p.shape for p in parts]}.")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    data = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return make_result(data, tuple(parts), "concat_columns", backward_fn)


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of table selected by integer ids."""
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx].copy()

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return make_result(data, (table,), "gather_rows", backward_fn)


# ---------------------------------------------------------------- normalization / attention

def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain, row-wise."""
    inv = 1.0 / np.sqrt(np.mean(x.data ** 2, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    data = xhat * gain.data

    def backward_fn(g):
        dxhat = g * gain.data
        grad_x = inv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        grad_gain = _unbroadcast(g * xhat, gain.shape)
        return grad_x, grad_gain

    return make_result(data, (x, gain), "rms_norm", backward_fn)


def softmax_rows(logits: Tensor, mask: Union[Tensor, np.ndarray, None] = None) -> Tensor:
    """
    Row softmax with an additive {0, -inf} mask.

    The max is taken over unmasked entries only; masked outputs are exactly 0.

    Raises:
        DegenerateRowError: If some row has no unmasked entry.
    """
    logits = _as_tensor(logits)
    if mask is None:
        blocked = np.zeros(logits.shape, dtype=bool)
        additive = np.zeros(logits.shape)
    else:
        additive = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=DTYPE)
        if additive.shape != logits.shape:
            _dimension_error(f"softmax_rows mask shape {additive.shape} != logits shape {logits.shape}.")
        blocked = additive <= MASK_THRESHOLD
    empty_rows = np.flatnonzero(blocked.all(axis=-1))
    if empty_rows.size:
        message = f"softmax_rows: rows {empty_rows.tolist()} have every entry masked."
        HighLevelErrors.error(message)
        raise DegenerateRowError(message)

    z = np.where(blocked, -np.inf, logits.data + np.where(blocked, 0.0, additive))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    probs[blocked] = 0.0

    def backward_fn(g):
        return (probs * (g - np.sum(g * probs, axis=-1, keepdims=True)),)

    return make_result(probs, (logits,), "softmax_rows", backward_fn)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """
    Rotate interleaved pairs (x[2i], x[2i+1]) by per-row angles given as cos/sin
    tables of shape [T x d/2].
    """
    if x.shape[-1] % 2 != 0:
        _dimension_error(f"rope_rotate needs an even last dimension, got {x.shape}.")
    even, odd = x.data[:, 0::2], x.data[:, 1::2]
    data = np.empty_like(x.data)
    data[:, 0::2] = even * cos - odd * sin
    data[:, 1::2] = even * sin + odd * cos

    def backward_fn(g):
        g_even, g_odd = g[:, 0::2], g[:, 1::2]
        grad = np.empty_like(g)
        grad[:, 0::2] = g_even * cos + g_odd * sin
        grad[:, 1::2] = -g_even * sin + g_odd * cos
        return (grad,)

    return make_result(data, (x,), "rope_rotate", backward_fn)


# ---------------------------------------------------------------- losses

def cross_entropy_rows(logits: Tensor, rows: Sequence[int], targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of targets[n] under softmax(logits[rows[n]])."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if rows.size == 0:
        message = "cross_entropy_rows needs at least one row."
        HighLevelErrors.error(message)
        raise TaskError(message)
    picked = logits.data[rows]
    shifted = picked - picked.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    nll = -log_probs[np.arange(rows.size), targets]
    data = np.array(nll.sum() / rows.size)

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(rows.size), targets] -= 1.0
        grad = np.zeros_like(logits.data)
        np.add.at(grad, rows, probs * (float(g) / rows.size))
        return (grad,)

    return make_result(data, (logits,), "cross_entropy_rows", backward_fn)


def parameters_with_grads(params: Iterable[Tensor]) -> List[Tensor]:
    return [p for p in params if p.grad is not None]
