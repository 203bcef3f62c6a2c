"""
Segmentation of a sequence into context (C) and response (R) positions, and the two
attention masks built from it: the standard causal mask and the bidirectional-context
mask, where

    M[i, j] = 0    if i and j are both context,
    M[i, j] = 0    if i is a response position and j <= i,
    M[i, j] = -inf otherwise.

Context-to-context visibility spans every context turn; context queries never see
response keys, not even earlier ones.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from src.tensor_core.ops import MASK_THRESHOLD, MASK_VALUE
from src.utils.errors import DimensionError, TaskError
from src.utils.monitors import DataOperation, HighLevelErrors


class TokenRole(str, Enum):
    CONTEXT = "C"
    RESPONSE = "R"


@dataclass(frozen=True)
class Segmentation:
    """
    Per-token context/response labels with non-decreasing turn ids.

    Attributes:
        labels (tuple[TokenRole]): One label per position.
        turn_ids (tuple[int]): One turn index per position; each turn carries a single label.
    """
    labels: Tuple[TokenRole, ...]
    turn_ids: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(TokenRole(label) for label in self.labels))
        object.__setattr__(self, "turn_ids", tuple(int(t) for t in self.turn_ids))

    @classmethod
    def from_string(cls, labels: str, turn_ids: Sequence[int]) -> "Segmentation":
        """Build from a compact label string such as 'CCCRR'."""
        return cls(tuple(TokenRole(c) for c in labels), tuple(turn_ids))

    @property
    def length(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_context(self) -> np.ndarray:
        return np.array([label is TokenRole.CONTEXT for label in self.labels], dtype=bool)

    @property
    def context_positions(self) -> List[int]:
        return [i for i, label in enumerate(self.labels) if label is TokenRole.CONTEXT]

    @property
    def response_positions(self) -> List[int]:
        return [i for i, label in enumerate(self.labels) if label is TokenRole.RESPONSE]

    def label_string(self) -> str:
        return "".join(label.value for label in self.labels)

    def turns(self) -> List[Tuple[int, TokenRole, int, int]]:
        """(turn id, label, start, stop) for every turn, in order."""
        spans = []
        start = 0
        for i in range(1, self.length + 1):
            if i == self.length or self.turn_ids[i] != self.turn_ids[start]:
                spans.append((self.turn_ids[start], self.labels[start], start, i))
                start = i
        return spans

    def problems(self) -> List[str]:
        """Well-formedness problems; empty when the segmentation is valid."""
        found = []
        if self.length == 0:
            found.append("segmentation is empty")
        if len(self.turn_ids) != self.length:
            found.append(f"{self.length} labels but {len(self.turn_ids)} turn ids")
            return found
        for i in range(1, self.length):
            if self.turn_ids[i] < self.turn_ids[i - 1]:
                found.append(f"turn id decreases at position {i}")
            if self.labels[i] != self.labels[i - 1] and self.turn_ids[i] == self.turn_ids[i - 1]:
                found.append(f"label changes inside turn {self.turn_ids[i]} at position {i}")
        return found

    def validate(self) -> "Segmentation":
        found = self.problems()
        if found:
            message = f"Invalid segmentation: {'; '.join(found)}"
            HighLevelErrors.error(message)
            raise TaskError(message)
        return self

    def to_text(self) -> str:
        """One line per token: index<TAB>label<TAB>turn_id."""
        return "".join(f"{i}\t{label.value}\t{turn}\n"
                       for i, (label, turn) in enumerate(zip(self.labels, self.turn_ids)))

    @classmethod
    def from_text(cls, text: str) -> "Segmentation":
        labels, turn_ids = [], []
        for line_number, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            index, label, turn = line.split("\t")
            if int(index) != len(labels):
                message = f"Segmentation line {line_number} has index {index}, expected {len(labels)}."
                HighLevelErrors.error(message)
                raise TaskError(message)
            labels.append(TokenRole(label))
            turn_ids.append(int(turn))
        return cls(tuple(labels), tuple(turn_ids))


@dataclass(frozen=True)
class MaskViolation:
    i: int
    j: int
    expected: float
    found: float


class IMaskBuilder(ABC):
    """Interface for attention mask construction from a segmentation."""

    @abstractmethod
    def build(self, seg: Segmentation) -> np.ndarray:
        pass


def build_causal_mask(length: int) -> np.ndarray:
    """M[i, j] = 0 iff j <= i."""
    if length < 1:
        message = f"Causal mask needs length >= 1, got {length}."
        HighLevelErrors.error(message)
        raise DimensionError(message)
    visible = np.tril(np.ones((length, length), dtype=bool))
    return np.where(visible, 0.0, MASK_VALUE)


def build_focusft_mask(seg: Segmentation) -> np.ndarray:
    """Bidirectional-context / causal-response mask, identical for every head."""
    is_ctx = seg.is_context
    is_resp = ~is_ctx
    lower = np.tril(np.ones((seg.length, seg.length), dtype=bool))
    visible = (is_ctx[:, None] & is_ctx[None, :]) | (is_resp[:, None] & lower)
    return np.where(visible, 0.0, MASK_VALUE)


class CausalMaskBuilder(IMaskBuilder):
    def build(self, seg: Segmentation) -> np.ndarray:
        return build_causal_mask(seg.length)


class FocusMaskBuilder(IMaskBuilder):
    def build(self, seg: Segmentation) -> np.ndarray:
        return build_focusft_mask(seg)


def validate_mask(mask: np.ndarray, seg: Segmentation) -> List[MaskViolation]:
    """
    Compare a mask against the bidirectional-context construction for seg.

    Cells are read as visible (exactly 0) or blocked (at or below the mask threshold);
    anything else is a violation in its own right.

    Returns:
        list[MaskViolation]: Empty iff mask matches; otherwise one entry per differing cell.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (seg.length, seg.length):
        message = f"Mask shape {mask.shape} does not match segmentation length {seg.length}."
        HighLevelErrors.error(message)
        raise DimensionError(message)

    expected = build_focusft_mask(seg)
    expected_visible = expected == 0.0
    found_visible = mask == 0.0
    found_blocked = mask <= MASK_THRESHOLD
    bad = (expected_visible & ~found_visible) | (~expected_visible & ~found_blocked)

    violations = [MaskViolation(int(i), int(j), float(expected[i, j]), float(mask[i, j]))
                  for i, j in zip(*np.nonzero(bad))]
    if violations:
        DataOperation.warning(f"Mask check found {len(violations)} violation(s); first at "
                              f"({violations[0].i}, {violations[0].j}).")
    return violations
