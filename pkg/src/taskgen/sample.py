from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from src.configs import TaskKind
from src.diagnostics.regions import RegionMap
from src.masking.attention_mask import Segmentation
from src.utils.errors import TaskError
from src.utils.monitors import HighLevelErrors


@dataclass(frozen=True)
class Sample:
    """
    One generated sequence.

    Attributes:
        tokens (tuple[int]): Token ids.
        segmentation (Segmentation): Context/response labels and turn ids.
        answer_span (tuple[int]): Response positions holding the gold answer tokens.
        needle_positions (tuple[int]): Context positions of the answer-defining fact tokens.
        task_kind (TaskKind): Generator that produced the sample.
        seed (int): Generator seed.
        fact_pairs (tuple): (key index, value index) pairs the answer depends on; value -1 for aggregation.
        needle_depth (float): First needle position divided by T - 1.
        regions (RegionMap): Semantic key regions for attention budgets.
    """
    tokens: Tuple[int, ...]
    segmentation: Segmentation
    answer_span: Tuple[int, ...]
    needle_positions: Tuple[int, ...]
    task_kind: TaskKind
    seed: int
    fact_pairs: Tuple[Tuple[int, int], ...] = ()
    needle_depth: float = 0.0
    regions: Optional[RegionMap] = None

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def answer_tokens(self) -> List[int]:
        return [self.tokens[i] for i in self.answer_span]

    @property
    def response_positions(self) -> List[int]:
        return self.segmentation.response_positions

    def validate(self) -> "Sample":
        self.segmentation.validate()
        if self.segmentation.length != self.length:
            self._fail(f"{self.length} tokens but segmentation covers {self.segmentation.length}")
        responses, contexts = set(self.response_positions), set(self.segmentation.context_positions)
        if not set(self.answer_span) <= responses:
            self._fail(f"answer span {list(self.answer_span)} is not inside the response set")
        if not set(self.needle_positions) <= contexts:
            self._fail(f"needle positions {list(self.needle_positions)} are not all context")
        return self

    @staticmethod
    def _fail(detail: str) -> None:
        message = f"Malformed sample: {detail}."
        HighLevelErrors.error(message)
        raise TaskError(message)

    def to_record(self) -> "SampleRecord":
        return SampleRecord(
            tokens=list(self.tokens), labels=self.segmentation.label_string(),
            turn_ids=list(self.segmentation.turn_ids), answer_span=list(self.answer_span),
            needle_positions=list(self.needle_positions), task_kind=self.task_kind.value,
            seed=self.seed, fact_pairs=[list(p) for p in self.fact_pairs],
            needle_depth=self.needle_depth,
            regions=self.regions.to_dict() if self.regions is not None else None,
        )

    def to_json(self) -> str:
        return self.to_record().model_dump_json()

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        """
        Raises:
            pydantic.ValidationError: On malformed JSON or a record that does not fit the schema.
            TaskError: On a record whose fields are inconsistent.
        """
        return cls.from_record(SampleRecord.model_validate_json(line))

    @classmethod
    def from_record(cls, record: "SampleRecord") -> "Sample":
        return cls(
            tokens=tuple(record.tokens),
            segmentation=Segmentation.from_string(record.labels, record.turn_ids),
            answer_span=tuple(record.answer_span), needle_positions=tuple(record.needle_positions),
            task_kind=TaskKind(record.task_kind), seed=record.seed,
            fact_pairs=tuple(tuple(p) for p in record.fact_pairs), needle_depth=record.needle_depth,
            regions=RegionMap.from_dict(record.regions) if record.regions else None,
        ).validate()


class SampleRecord(BaseModel):
    """On-disk schema of one dataset line."""
    model_config = ConfigDict(extra="forbid")

    tokens: List[int]
    labels: str
    turn_ids: List[int]
    answer_span: List[int]
    needle_positions: List[int]
    task_kind: str
    seed: int
    fact_pairs: List[List[int]] = Field(default_factory=list)
    needle_depth: float = 0.0
    regions: Optional[Dict[str, Any]] = None
