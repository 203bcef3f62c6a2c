"""
Attention-dilution measurements over a recorded AttentionTrace.

Every metric averages (unweighted) over heads and over the query rows in R, the
response positions, unless `all_queries` is set. Nothing here mutates the trace.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.diagnostics.regions import CONTEXT_CONTENT, RegionMap, RegionTag
from src.masking.attention_mask import Segmentation
from src.models.transformer import AttentionTrace
from src.utils.errors import TaskError
from src.utils.get_size import get_size
from src.utils.monitors import AnalysisOperation, HighLevelErrors

DEFAULT_SINK_WINDOW = 5


def _task_error(message: str) -> None:
    HighLevelErrors.error(message)
    raise TaskError(message)


def query_rows(seg: Segmentation, all_queries: bool = False) -> List[int]:
    rows = list(range(seg.length)) if all_queries else seg.response_positions
    if not rows:
        _task_error("Attention metrics need at least one response query position.")
    return rows


def _query_maps(trace: AttentionTrace, seg: Segmentation, all_queries: bool) -> np.ndarray:
    """[layers x heads x |queries| x T]."""
    if not trace.maps:
        _task_error("Attention trace is empty; run the forward pass with tracing enabled.")
    stacked = trace.stacked()
    if stacked.shape[-1] != seg.length:
        _task_error(f"Trace covers {stacked.shape[-1]} positions, segmentation {seg.length}.")
    return stacked[:, :, query_rows(seg, all_queries), :]


def sink_mass(trace: AttentionTrace, seg: Segmentation, w: int = DEFAULT_SINK_WINDOW,
              all_queries: bool = False) -> Tuple[List[float], float]:
    """
    Attention mass on keys [0, w) per layer, and the unweighted mean over layers.

    Raises:
        TaskError: If R is empty or the trace is empty.
    """
    maps = _query_maps(trace, seg, all_queries)
    per_layer = [float(maps[layer, :, :, :w].sum(axis=-1).mean()) for layer in range(maps.shape[0])]
    return per_layer, float(sum(per_layer) / len(per_layer))


def region_budget(trace: AttentionTrace, regions: RegionMap, seg: Segmentation,
                  all_queries: bool = False) -> Dict[str, float]:
    """
    Share of attention landing in each tagged region; key positions outside every listed
    region are reported as Filler.

    Raises:
        ConfigError: If regions overlap or fall outside [0, T).
    """
    regions.validate()
    maps = _query_maps(trace, seg, all_queries)
    # mean over layers, heads and queries, per key position
    key_mass = maps.mean(axis=(0, 1, 2))
    budget: Dict[str, float] = {}
    covered = np.zeros(seg.length, dtype=bool)
    for region in regions.regions:
        budget[region.tag.value] = budget.get(region.tag.value, 0.0) + float(key_mass[region.start:region.stop].sum())
        covered[region.start:region.stop] = True
    filler = RegionTag.FILLER.value
    budget[filler] = budget.get(filler, 0.0) + float(key_mass[~covered].sum())
    return budget


def positional_profile(trace: AttentionTrace, seg: Segmentation, all_queries: bool = False) -> np.ndarray:
    """Entry j is the mean attention weight on key j."""
    return _query_maps(trace, seg, all_queries).mean(axis=(0, 1, 2))


def context_engagement(budget: Mapping[str, float]) -> float:
    """
    SystemUser + ToolResponse share of the budget.

    Raises:
        TaskError: If either context-content entry is missing.
    """
    missing = [tag.value for tag in CONTEXT_CONTENT if tag.value not in budget]
    if missing:
        _task_error(f"Budget lacks context-content regions {missing}.")
    return float(sum(budget[tag.value] for tag in CONTEXT_CONTENT))


@dataclass
class AttentionSummary:
    sink_mass_per_layer: List[float]
    sink_mass_mean: float
    region_budget: Dict[str, float]
    positional_profile: List[float]
    context_engagement: Optional[float]
    w: int
    layer_count: int
    layer_mean: bool = True
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        if not data["extra"]:
            data.pop("extra")
        return data

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as file:
            json.dump(self.to_dict(), file, indent=2)
        AnalysisOperation.info(f"Attention summary written to {path} ({get_size(path)}).")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AttentionSummary":
        with open(path, "r") as file:
            return cls(**json.load(file))


def summarize(trace: AttentionTrace, seg: Segmentation, regions: Optional[RegionMap] = None,
              w: int = DEFAULT_SINK_WINDOW, all_queries: bool = False) -> AttentionSummary:
    per_layer, mean = sink_mass(trace, seg, w, all_queries)
    budget = region_budget(trace, regions, seg, all_queries) if regions is not None else {}
    engagement = context_engagement(budget) if budget else None
    return AttentionSummary(
        sink_mass_per_layer=per_layer, sink_mass_mean=mean, region_budget=budget,
        positional_profile=positional_profile(trace, seg, all_queries).tolist(),
        context_engagement=engagement, w=int(w), layer_count=len(per_layer),
    )


def default_heatmap_layer(n_layers: int) -> int:
    """Middle layer, 0-based: ceil(n / 2) capped at the last layer."""
    return min(int(math.ceil(n_layers / 2)), n_layers - 1)


def head_averaged(trace: AttentionTrace, layer: int) -> np.ndarray:
    return trace.layer(layer).mean(axis=0)


def heatmap_export(trace: AttentionTrace, layer: int, path: Union[str, Path],
                   regions: Optional[RegionMap] = None, title: Optional[str] = None) -> Tuple[Path, Path]:
    """
    Write the head-averaged [T x T] map of one layer as CSV (row = query) and as an SVG
    grayscale heatmap with region boundary lines. Returns (csv_path, svg_path).
    """
    from src.diagnostics.plots import render_heatmap

    matrix = head_averaged(trace, layer)
    csv_path = Path(path).with_suffix(".csv")
    svg_path = Path(path).with_suffix(".svg")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(matrix).to_csv(csv_path, header=False, index=False, float_format="%.17g")
    render_heatmap(matrix, svg_path, regions=regions, title=title or f"Layer {layer}, head mean")
    AnalysisOperation.info(f"Heatmap for layer {layer} exported to {csv_path} and {svg_path}.")
    return csv_path, svg_path


def read_heatmap_csv(path: Union[str, Path]) -> np.ndarray:
    return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)


def positions_to_frame(profiles: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Positional profiles side by side, one column per label."""
    return pd.DataFrame({label: list(values) for label, values in profiles.items()}).rename_axis("position")
