from abc import ABC, abstractmethod
import json
import statistics
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from src.bilevel.evaluation import EvalResult, accuracy_summary, evaluate, evaluate_adapted, rescore_predictions
from src.bilevel.metrics import MetricsWriter
from src.bilevel.trainer import BilevelTrainer
from src.configs import RunConfig, TrainingMode, _fail, load_config_from_yaml, load_preset
from src.diagnostics.attention_metrics import (AttentionSummary, default_heatmap_layer, heatmap_export,
                                               positions_to_frame, summarize)
from src.diagnostics.plots import plot_positional_profile, plot_region_budget, plot_sink_per_layer, plot_sweep
from src.masking.attention_mask import build_causal_mask, build_focusft_mask
from src.models.checkpoint import CheckpointStore
from src.models.transformer import AttentionTrace, ModelWeights, forward, init_model
from src.taskgen.dataset import load_dataset, make_splits, save_dataset
from src.taskgen.sample import Sample
from src.tensor_core.tensor import no_grad
from src.utils.errors import TaskError
from src.utils.monitors import HighLevelErrors, PipelineOperation

SWEEP_AXES = {"layer_fraction": "layer_fraction", "K": "inner_steps", "eta_in": "eta_in", "mode": "mode"}


def resolve_config(config_path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                   **overrides: Any) -> RunConfig:
    """Config file wins over preset; the toy preset is the default."""
    if config_path is not None:
        return load_config_from_yaml(config_path, **overrides)
    return load_preset(preset or "toy", **overrides)


def validate_config(config_path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                    **overrides: Any) -> RunConfig:
    config = resolve_config(config_path, preset, **overrides)
    PipelineOperation.info(f"Configuration is valid: mode={config.mode}, task={config.task_kind}, "
                           f"{config.n_layers} layers, T={config.seq_len}.")
    return config


def traced_forward(weights: ModelWeights, sample: Sample, bidirectional: bool) -> AttentionTrace:
    seg = sample.segmentation
    mask = build_focusft_mask(seg) if bidirectional else build_causal_mask(seg.length)
    trace = AttentionTrace()
    with no_grad():
        forward(weights, sample.tokens, mask, trace=trace)
    return trace


class IExperimentPipeline(ABC):
    """Abstract class defining the experiment surface."""

    @abstractmethod
    def train(self, config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
        pass

    @abstractmethod
    def evaluate(self, checkpoint: Union[str, Path], dataset: Union[str, Path], out_dir: Union[str, Path]) -> Dict:
        pass

    @abstractmethod
    def analyze(self, checkpoint: Union[str, Path], sample_file: Union[str, Path],
                out_dir: Union[str, Path]) -> Dict[str, AttentionSummary]:
        pass

    @abstractmethod
    def sweep(self, config: RunConfig, axis: str, values: Sequence[Any], out_dir: Union[str, Path]) -> pd.DataFrame:
        pass


class ExperimentPipeline(IExperimentPipeline):
    """Train / eval / analyze / sweep over self-describing run directories."""

    def train(self, config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
        """
        Write config.yaml, generate the splits, train, checkpoint, then evaluate.

        Returns:
            Path: The run directory holding config.yaml, data/, metrics.jsonl, timings.jsonl,
            checkpoints/, predictions.csv and summary.json.
        """
        run_dir = Path(out_dir or config.output_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(config.to_yaml())
        PipelineOperation.info(f"Run directory {run_dir} (mode={config.mode}, seed={config.seed}).")

        train_set, eval_set = make_splits(config.to_task_config())
        save_dataset(train_set, run_dir / "data" / "train.jsonl")
        save_dataset(eval_set, run_dir / "data" / "eval.jsonl")

        weights = init_model(config.to_model_config())
        trainer = BilevelTrainer(weights, config.to_trainer_config(), config.to_adapter_config(), run_dir)
        with MetricsWriter(run_dir, config.log_timings) as writer:
            weights, reports = trainer.train(train_set, writer, checkpoint_dir=run_dir / "checkpoints")
        CheckpointStore(run_dir / "checkpoints" / "final").save(
            weights, {"step": trainer.step, "mode": config.mode, "seed": config.seed})

        summary: Dict[str, Any] = {
            "mode": config.mode, "seed": config.seed, "steps": len(reports),
            "initial_loss": reports[0].outer_loss, "final_loss": reports[-1].outer_loss,
            "median_step_ms": statistics.median(r.t_total_ms for r in reports),
        }
        if eval_set:
            result = evaluate(weights, eval_set)
            result.save_predictions(run_dir / "predictions.csv")
            summary.update(accuracy_summary(result, config.depth_bins))
        reference = eval_set[0] if eval_set else train_set[0]
        summary["sink_mass_causal"] = summarize(traced_forward(weights, reference, False), reference.segmentation,
                                                w=config.sink_window).sink_mass_mean
        with open(run_dir / "summary.json", "w") as file:
            json.dump(summary, file, indent=2)
        PipelineOperation.info(f"Run finished: loss {summary['initial_loss']:.4f} -> {summary['final_loss']:.4f}, "
                               f"accuracy {summary.get('accuracy')}.")
        return run_dir

    def evaluate(self, checkpoint: Union[str, Path], dataset: Union[str, Path], out_dir: Union[str, Path],
                 bins: int = 5, adapt: bool = False, config: Optional[RunConfig] = None) -> Dict[str, Any]:
        """Greedy exact-match report with per-kind and per-depth breakdowns (plus test-time adaptation)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        weights = CheckpointStore(checkpoint).load()
        samples = load_dataset(dataset)
        if adapt:
            config = config or load_preset("toy")
            result: EvalResult = evaluate_adapted(weights, samples, config.to_adapter_config(),
                                                  config.to_trainer_config())
        else:
            result = evaluate(weights, samples)
        predictions = result.save_predictions(out_dir / "predictions.csv")
        result.by_depth(bins).to_csv(out_dir / "depth_report.csv", index=False)
        result.by_kind().to_csv(out_dir / "kind_report.csv", index=False)

        report = accuracy_summary(result, bins)
        report["rescored_accuracy"] = rescore_predictions(predictions)
        with open(out_dir / "eval_report.json", "w") as file:
            json.dump(report, file, indent=2)
        PipelineOperation.info(f"Evaluation of {checkpoint}: accuracy {report['accuracy']:.4f}.")
        return report

    def analyze(self, checkpoint: Union[str, Path], sample_file: Union[str, Path], out_dir: Union[str, Path],
                index: int = 0, w: int = 5, layer: Optional[int] = None,
                all_queries: bool = False) -> Dict[str, AttentionSummary]:
        """
        Traced forward of one sample under the causal and the bidirectional-context masks;
        writes per-mask summaries, heatmaps (CSV + SVG) and comparison figures.
        """
        out_dir = Path(out_dir)
        weights = CheckpointStore(checkpoint).load()
        samples = load_dataset(sample_file)
        if not 0 <= index < len(samples):
            message = f"Sample index {index} outside dataset of {len(samples)}."
            HighLevelErrors.error(message)
            raise TaskError(message)
        sample = samples[index]
        layer = default_heatmap_layer(weights.config.n_layers) if layer is None else layer

        summaries: Dict[str, AttentionSummary] = {}
        for name, bidirectional in (("causal", False), ("focusft", True)):
            trace = traced_forward(weights, sample, bidirectional)
            summary = summarize(trace, sample.segmentation, sample.regions, w, all_queries)
            summary.extra = {"mask": name, "heatmap_layer": layer}
            summary.save(out_dir / f"summary_{name}.json")
            heatmap_export(trace, layer, out_dir / f"heatmap_{name}", sample.regions,
                           title=f"{name} mask, layer {layer}")
            summaries[name] = summary

        plot_sink_per_layer({k: s.sink_mass_per_layer for k, s in summaries.items()}, out_dir / "sink_per_layer.svg")
        if sample.regions is not None:
            plot_region_budget({k: s.region_budget for k, s in summaries.items()}, out_dir / "region_budget.svg")
        profiles = {k: s.positional_profile for k, s in summaries.items()}
        positions_to_frame(profiles).to_csv(out_dir / "positional_profile.csv")
        plot_positional_profile(profiles, out_dir / "positional_profile.svg")
        return summaries

    def sweep(self, config: RunConfig, axis: str, values: Sequence[Any], out_dir: Union[str, Path]) -> pd.DataFrame:
        """
        One training run per value, same seed. Rows carry accuracy, final loss, median
        step time and causal sink mass; the table goes to sweep.csv and an SVG line plot.
        """
        if axis not in SWEEP_AXES:
            _fail(f"Unknown sweep axis '{axis}'. Expected one of {sorted(SWEEP_AXES)}.")
        out_dir = Path(out_dir)
        rows: List[Dict[str, Any]] = []
        for value in values:
            run_config = config.with_overrides(**{SWEEP_AXES[axis]: value,
                                                  "output_dir": str(out_dir / f"{axis}={value}")})
            run_dir = self.train(run_config)
            with open(run_dir / "summary.json", "r") as file:
                summary = json.load(file)
            rows.append({"axis": axis, "value": value, "accuracy": summary.get("accuracy"),
                         "final_loss": summary["final_loss"], "median_step_ms": summary["median_step_ms"],
                         "sink_mass": summary["sink_mass_causal"], "run_dir": str(run_dir)})

        table = pd.DataFrame(rows)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "sweep.csv", index=False)
        if table["accuracy"].notna().any():
            plot_sweep(table, axis, out_dir / "sweep.svg")
        if axis == "mode":
            times = {TrainingMode.parse(v).value: t for v, t in zip(table["value"], table["median_step_ms"])}
            if TrainingMode.FOCUSFT.value in times and TrainingMode.STANDARD_SFT.value in times:
                ratio = times[TrainingMode.FOCUSFT.value] / times[TrainingMode.STANDARD_SFT.value]
                PipelineOperation.info(f"Step-time overhead FocuSFT / StandardSFT: {ratio:.2f}x.")
        PipelineOperation.info(f"Sweep over {axis} finished: {len(rows)} runs.")
        return table


def cmd_train(config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    return ExperimentPipeline().train(config, out_dir)


def cmd_eval(checkpoint: Union[str, Path], dataset: Union[str, Path], out_dir: Union[str, Path],
             bins: int = 5, adapt: bool = False, config: Optional[RunConfig] = None) -> Dict[str, Any]:
    return ExperimentPipeline().evaluate(checkpoint, dataset, out_dir, bins, adapt, config)


def cmd_analyze(checkpoint: Union[str, Path], sample_file: Union[str, Path], out_dir: Union[str, Path],
                **kwargs: Any) -> Dict[str, AttentionSummary]:
    return ExperimentPipeline().analyze(checkpoint, sample_file, out_dir, **kwargs)


def cmd_sweep(config: RunConfig, axis: str, values: Sequence[Any], out_dir: Union[str, Path]) -> pd.DataFrame:
    return ExperimentPipeline().sweep(config, axis, values, out_dir)
