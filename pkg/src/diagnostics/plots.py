"""SVG figures for the attention analysis and sweeps."""
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.diagnostics.regions import RegionMap, RegionTag  # noqa: E402
from src.utils.monitors import AnalysisOperation  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    AnalysisOperation.info(f"Figure saved to {path}.")
    return path


def render_heatmap(matrix: np.ndarray, path: PathLike, regions: Optional[RegionMap] = None,
                   title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(matrix, cmap="Greys", vmin=0.0, vmax=max(float(np.max(matrix)), 1e-12),
                      interpolation="nearest")
    if regions is not None:
        for region in regions.regions[1:]:
            ax.axhline(region.start - 0.5, color="tab:red", linewidth=0.6)
            ax.axvline(region.start - 0.5, color="tab:red", linewidth=0.6)
    ax.set_xlabel("Key position")
    ax.set_ylabel("Query position")
    ax.set_title(title)
    fig.colorbar(image, ax=ax)
    return _save(fig, path)


def plot_sink_per_layer(curves: Mapping[str, Sequence[float]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in curves.items():
        ax.plot(range(len(values)), [100.0 * v for v in values], "o-", label=label)
    ax.set_xlabel("Layer")
    ax.set_ylabel("Sink mass (%)")
    ax.set_title("Attention sink mass per layer")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_region_budget(budgets: Mapping[str, Mapping[str, float]], path: PathLike) -> Path:
    frame = pd.DataFrame(budgets).reindex([tag.value for tag in RegionTag]).fillna(0.0)
    fig, ax = plt.subplots(figsize=(7, 4))
    (frame * 100.0).plot.bar(ax=ax, rot=20)
    ax.set_ylabel("Attention budget (%)")
    ax.set_title("Attention budget by semantic region")
    return _save(fig, path)


def plot_positional_profile(profiles: Mapping[str, Sequence[float]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in profiles.items():
        ax.plot(range(len(values)), values, label=label, linewidth=1.0)
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("Key position")
    ax.set_ylabel("Mean attention")
    ax.set_title("Positional attention distribution")
    ax.legend()
    return _save(fig, path)


def plot_sweep(table: pd.DataFrame, axis: str, path: PathLike, metric: str = "accuracy") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table["value"].astype(str), table[metric], "o-")
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} vs {axis}")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
