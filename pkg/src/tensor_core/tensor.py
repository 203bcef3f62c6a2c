"""
Reverse-mode autodiff substrate: Tensor, Tape and backward.

Ops record a Node on the active Tape only when a tape scope is open and at least
one operand requires grad. A node may only depend on leaves or on nodes of its own
tape; this keeps inner-loop graphs unreachable from the outer loss.
"""
import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import NumericalError, TapeError, UsageError
from src.utils.monitors import HighLevelErrors

DTYPE = np.float64

_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> None:
    """NaN/Inf detection after every forward op; on by default, switched off for timing runs."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


@dataclass(eq=False)
class Node:
    op: str
    parents: Tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    output: "Tensor"
    tape: "Tape"
    index: int = -1


@dataclass(eq=False)
class Tape:
    """Append-only record of operations; nodes are in topological order by construction."""
    tape_id: int = field(default_factory=itertools.count(1).__next__)
    nodes: List[Node] = field(default_factory=list)
    frozen: bool = False

    def record(self, node: Node) -> None:
        if self.frozen:
            raise TapeError(f"Tape {self.tape_id} is frozen; no further operations may be recorded.")
        node.index = len(self.nodes)
        self.nodes.append(node)

    def freeze(self) -> None:
        self.frozen = True

    def foreign_edges(self) -> List[Tuple[int, str]]:
        """(node index, op) of every node with a parent recorded on another tape."""
        return [
            (node.index, node.op)
            for node in self.nodes
            for parent in node.parents
            if parent.tape_id is not None and parent.tape_id != self.tape_id
        ]

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: List[Optional[Tape]] = []


@contextmanager
def tape_scope(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Open a recording scope; ops inside it that touch grad-requiring tensors are recorded."""
    tape = Tape() if tape is None else tape
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording even inside an enclosing tape scope."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """
    Dense float64 array with a gradient slot and an optional handle into the tape
    that produced it.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node: Optional[Node] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no tape connection and no grad requirement."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the op implementations live in ops.py
    def __matmul__(self, other: "Tensor") -> "Tensor":
        from src.tensor_core import ops
        return ops.matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        from src.tensor_core import ops
        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from src.tensor_core import ops
        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from src.tensor_core import ops
        return ops.mul(self, other)

    def __neg__(self) -> "Tensor":
        from src.tensor_core import ops
        return ops.scale(self, -1.0)


def make_result(data: np.ndarray, parents: Sequence[Tensor], op: str,
                backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op output and record it on the active tape when any parent requires grad."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        message = f"Non-finite value produced by '{op}' (shape {np.shape(data)})."
        HighLevelErrors.error(message)
        raise NumericalError(message)

    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out.node = None
    out.tape_id = None
    out.requires_grad = False

    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out

    for parent in parents:
        if parent.tape_id is not None and parent.tape_id != tape.tape_id:
            message = (f"'{op}' would connect tape {tape.tape_id} to a tensor recorded on tape "
                       f"{parent.tape_id}; detach() values that cross tapes.")
            HighLevelErrors.error(message)
            raise TapeError(message)

    out.requires_grad = True
    out.tape_id = tape.tape_id
    node = Node(op=op, parents=tuple(parents), backward_fn=backward_fn, output=out, tape=tape)
    tape.record(node)
    out.node = node
    return out


def backward(root: Tensor) -> None:
    """
    Accumulate d(root)/d(leaf) into every grad-requiring leaf reachable from root.

    Repeated calls without zero_grad() accumulate. Each tape node is visited at most once.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        message = f"backward() needs a scalar root, got shape {root.shape}."
        HighLevelErrors.error(message)
        raise UsageError(message)
    if not root.requires_grad:
        message = "backward() root does not require grad (was it computed outside a tape scope?)."
        HighLevelErrors.error(message)
        raise UsageError(message)

    seed = np.ones_like(root.data)
    if root.node is None:
        root.grad = seed.copy() if root.grad is None else root.grad + seed
        return

    pending = {id(root): seed}
    nodes = root.node.tape.nodes
    for node in reversed(nodes[: root.node.index + 1]):
        grad = pending.pop(id(node.output), None)
        if grad is None:
            continue
        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
            else:
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
