import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd

from src.utils.monitors import HighLevelErrors, TrainingOperation

METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"


@dataclass
class StepReport:
    """
    One training step.

    inner_losses holds L_inner(φ^(0)) .. L_inner(φ^(K)) for bilevel modes (K + 1 entries)
    and is empty otherwise. grad_norm_inner is the mean pre-clip inner norm, None at K = 0.
    """
    step: int
    mode: str
    inner_losses: List[float]
    outer_loss: float
    grad_norm_inner: Optional[float]
    grad_norm_outer: float
    t_inner_ms: float
    t_outer_ms: float
    lr: float
    epoch: int = 0
    sink_mass: Optional[float] = None
    inner_norms: List[float] = field(default_factory=list)

    @property
    def t_total_ms(self) -> float:
        return self.t_inner_ms + self.t_outer_ms

    def to_metrics(self, include_timings: bool) -> Dict[str, Any]:
        record = {
            "step": self.step,
            "mode": self.mode,
            "inner_losses": list(self.inner_losses),
            "outer_loss": self.outer_loss,
            "grad_norm_inner": self.grad_norm_inner,
            "grad_norm_outer": self.grad_norm_outer,
            "t_inner_ms": self.t_inner_ms if include_timings else None,
            "t_outer_ms": self.t_outer_ms if include_timings else None,
            "lr": self.lr,
            "epoch": self.epoch,
        }
        if self.sink_mass is not None:
            record["sink_mass"] = self.sink_mass
        return record

    def to_timings(self) -> Dict[str, Any]:
        return {"step": self.step, "mode": self.mode, "t_inner_ms": self.t_inner_ms,
                "t_outer_ms": self.t_outer_ms, "t_total_ms": self.t_total_ms}


class MetricsWriter:
    """
    Streams StepReports to metrics.jsonl and timings.jsonl in a run directory.

    Wall-clock fields go into metrics.jsonl only when log_timings is set, so the metrics
    file of a seeded run is byte-reproducible; timings.jsonl always has them.
    """

    def __init__(self, run_dir: Union[str, Path], log_timings: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log_timings = log_timings
        self._metrics = open(self.run_dir / METRICS_FILE, "w")
        self._timings = open(self.run_dir / TIMINGS_FILE, "w")

    def write(self, report: StepReport) -> None:
        self._metrics.write(json.dumps(report.to_metrics(self.log_timings)) + "\n")
        self._timings.write(json.dumps(report.to_timings()) + "\n")
        self._metrics.flush()
        self._timings.flush()

    def close(self) -> None:
        self._metrics.close()
        self._timings.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        message = f"Metrics file does not exist: {path}"
        HighLevelErrors.error(message)
        raise FileNotFoundError(message)
    with open(path, "r") as file:
        return [json.loads(line) for line in file if line.strip()]


def metrics_frame(path: Union[str, Path]) -> pd.DataFrame:
    return pd.DataFrame(read_jsonl(path))


def log_report(report: StepReport) -> None:
    inner = ", ".join(f"{x:.4f}" for x in report.inner_losses) or "-"
    TrainingOperation.info(f"[{report.mode}] step {report.step} epoch {report.epoch}: outer={report.outer_loss:.4f} "
                           f"inner=[{inner}] |g|={report.grad_norm_outer:.3f} lr={report.lr:.2e} "
                           f"t={report.t_total_ms:.1f}ms")
