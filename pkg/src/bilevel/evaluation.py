"""
Greedy exact-match evaluation under the causal mask, the depth-binned report, and
test-time adaptation: one inner step on the test input before decoding.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.configs import AdapterConfig, TrainerConfig
from src.bilevel.trainer import inner_loop, mask_builder
from src.fastweights.adapters import AdapterSet, init_adapters
from src.masking.attention_mask import Segmentation, build_causal_mask
from src.models.transformer import ModelWeights, forward
from src.taskgen.sample import Sample
from src.tensor_core.tensor import no_grad
from src.utils.errors import TaskError
from src.utils.get_size import get_size
from src.utils.monitors import HighLevelErrors, TrainingOperation


def greedy_decode(weights: ModelWeights, sample: Sample, adapters: Optional[AdapterSet] = None) -> List[int]:
    """
    Argmax prediction of every answer position from its prefix under the causal mask;
    earlier answer positions are filled with the model's own predictions.
    """
    tokens = list(sample.tokens)
    predictions = []
    with no_grad():
        for position in sample.answer_span:
            prefix = tokens[:position]
            logits = forward(weights, prefix, build_causal_mask(len(prefix)), adapters=adapters)
            predicted = int(np.argmax(logits.data[position - 1]))
            predictions.append(predicted)
            tokens[position] = predicted
    return predictions


@dataclass
class EvalRecord:
    index: int
    task_kind: str
    seed: int
    needle_depth: float
    gold: List[int]
    predicted: List[int]
    correct: bool
    adapted: Optional[List[int]] = None
    adapted_correct: Optional[bool] = None
    adapt_skipped: Optional[str] = None


@dataclass
class EvalResult:
    accuracy: float
    records: List[EvalRecord] = field(default_factory=list)
    adapted_accuracy: Optional[float] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.records])
        if frame.empty:
            return frame
        for column in ("gold", "predicted", "adapted"):
            frame[column] = frame[column].map(lambda ids: "" if ids is None else " ".join(str(t) for t in ids))
        return frame

    def save_predictions(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        TrainingOperation.info(f"Predictions written to {path} ({get_size(path)}).")
        return path

    def by_kind(self) -> pd.DataFrame:
        frame = self.to_frame()
        return frame.groupby("task_kind")["correct"].agg(["count", "mean"]).rename(
            columns={"count": "n", "mean": "accuracy"}).reset_index()

    def by_depth(self, bins: int) -> pd.DataFrame:
        return depth_report(self.records, bins)


def depth_bin(depth: float, bins: int) -> int:
    return min(int(depth * bins), bins - 1)


def depth_report(records: Sequence[EvalRecord], bins: int) -> pd.DataFrame:
    """One row per equal-width needle-depth bin over [0, 1]; empty bins report NaN accuracy."""
    rows = []
    for b in range(bins):
        hits = [r.correct for r in records if depth_bin(r.needle_depth, bins) == b]
        rows.append({"bin": b, "depth_lo": b / bins, "depth_hi": (b + 1) / bins, "n": len(hits),
                     "accuracy": float(np.mean(hits)) if hits else float("nan")})
    return pd.DataFrame(rows)


def evaluate(weights: ModelWeights, dataset: Sequence[Sample]) -> EvalResult:
    """Exact match over answer tokens with greedy causal decoding."""
    records = []
    for index, sample in enumerate(dataset):
        predicted = greedy_decode(weights, sample)
        gold = sample.answer_tokens
        records.append(EvalRecord(index, sample.task_kind.value, sample.seed, sample.needle_depth, gold,
                                  predicted, predicted == gold))
    accuracy = float(np.mean([r.correct for r in records])) if records else 0.0
    TrainingOperation.info(f"Evaluated {len(records)} samples: accuracy {accuracy:.4f}.")
    return EvalResult(accuracy, records)


@dataclass
class AdaptedDecode:
    base: List[int]
    adapted: Optional[List[int]]
    inner_losses: List[float]
    skipped: Optional[str] = None


def pseudo_response(sample: Sample) -> List[int]:
    """
    Response positions before the gold answer, provided at least one earlier assistant
    turn exists; otherwise empty (there is nothing held-in to adapt on).
    """
    answer_start = sample.answer_span[0]
    answer_turn = sample.segmentation.turn_ids[answer_start]
    earlier = [i for i in sample.response_positions if i < answer_start]
    if not any(sample.segmentation.turn_ids[i] != answer_turn for i in earlier):
        return []
    return [i for i in earlier if i >= 1]


def inference_adapt(weights: ModelWeights, sample: Sample, adapter_config: AdapterConfig,
                    trainer_config: TrainerConfig, steps: int = 1, eta_in: Optional[float] = None,
                    seed: Optional[int] = None) -> AdaptedDecode:
    """
    Adapt fresh fast weights on the test prefix (before the answer) with `steps` inner
    steps, decode with (θ, φ'), discard φ'. Samples without an earlier assistant turn
    are skipped with a notice and only the base decode is returned.
    """
    base = greedy_decode(weights, sample)
    targets = pseudo_response(sample)
    if not targets:
        notice = "no earlier assistant turn to adapt on"
        TrainingOperation.info(f"Test-time adaptation skipped for sample seed {sample.seed}: {notice}.")
        return AdaptedDecode(base, None, [], notice)

    cut = sample.answer_span[0]
    prefix = list(sample.tokens[:cut])
    seg = Segmentation(sample.segmentation.labels[:cut], sample.segmentation.turn_ids[:cut])
    mask = mask_builder(trainer_config.mode).build(seg)
    seed = adapter_config.seed if seed is None else seed
    adapters = init_adapters(adapter_config, weights.config, seed)
    result = inner_loop(weights, adapters, prefix, targets, mask, trainer_config, steps=steps, eta_in=eta_in)
    adapted = greedy_decode(weights, sample, adapters=result.adapters.detached())
    adapters.factors.clear()
    return AdaptedDecode(base, adapted, result.losses)


def evaluate_adapted(weights: ModelWeights, dataset: Sequence[Sample], adapter_config: AdapterConfig,
                     trainer_config: TrainerConfig, steps: int = 1, eta_in: Optional[float] = None) -> EvalResult:
    """Base and test-time-adapted accuracy side by side; adapted accuracy covers non-skipped samples."""
    records = []
    for index, sample in enumerate(dataset):
        outcome = inference_adapt(weights, sample, adapter_config, trainer_config, steps, eta_in,
                                  seed=adapter_config.seed + index)
        gold = sample.answer_tokens
        records.append(EvalRecord(
            index, sample.task_kind.value, sample.seed, sample.needle_depth, gold, outcome.base,
            outcome.base == gold, adapted=outcome.adapted,
            adapted_correct=None if outcome.adapted is None else outcome.adapted == gold,
            adapt_skipped=outcome.skipped,
        ))
    accuracy = float(np.mean([r.correct for r in records])) if records else 0.0
    adapted = [r.adapted_correct for r in records if r.adapted_correct is not None]
    adapted_accuracy = float(np.mean(adapted)) if adapted else None
    TrainingOperation.info(f"Adapted evaluation: base {accuracy:.4f}, adapted {adapted_accuracy} "
                           f"({len(adapted)}/{len(records)} adapted).")
    return EvalResult(accuracy, records, adapted_accuracy)


def rescore_predictions(path: Union[str, Path]) -> float:
    """Exact-match accuracy recomputed from a predictions CSV dump."""
    path = Path(path)
    if not path.exists():
        message = f"Predictions file does not exist: {path}"
        HighLevelErrors.error(message)
        raise FileNotFoundError(message)
    frame = pd.read_csv(path, dtype={"gold": str, "predicted": str}, keep_default_na=False)
    if frame.empty:
        message = f"Predictions file {path} has no rows."
        HighLevelErrors.error(message)
        raise TaskError(message)
    gold = frame["gold"].str.split().str.join(" ")
    predicted = frame["predicted"].str.split().str.join(" ")
    return float((gold == predicted).mean())


def accuracy_summary(result: EvalResult, bins: int) -> Dict[str, object]:
    summary = {"accuracy": result.accuracy, "n": len(result.records),
               "by_depth": result.by_depth(bins).to_dict(orient="records")}
    if result.adapted_accuracy is not None:
        summary["adapted_accuracy"] = result.adapted_accuracy
    return summary
