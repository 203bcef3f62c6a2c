from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import re

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.utils.errors import ConfigError
from src.utils.monitors import HighLevelErrors, PipelineOperation

# Project root (two levels above this file) and the preset directory
MAIN_DIR = Path(__file__).resolve().parents[2]
PRESET_DIR = MAIN_DIR / "config"

# Specials {BOS, EOS, SEP, QUERY} plus role markers {SYS, USER, TOOL, ASSIST}
RESERVED_SYMBOLS = 8


def _fail(message: str) -> None:
    HighLevelErrors.error(message)
    raise ConfigError(message)


class TrainingMode(str, Enum):
    """The 2x2 ablation grid: (bilevel?, bidirectional context?)."""
    STANDARD_SFT = "standard_sft"
    SFT_BIDIR = "sft_bidir"
    CAUSAL_BILEVEL = "causal_bilevel"
    FOCUSFT = "focusft"

    @property
    def bilevel(self) -> bool:
        return self in (TrainingMode.CAUSAL_BILEVEL, TrainingMode.FOCUSFT)

    @property
    def bidirectional(self) -> bool:
        return self in (TrainingMode.SFT_BIDIR, TrainingMode.FOCUSFT)

    @classmethod
    def parse(cls, value: Union[str, "TrainingMode"]) -> "TrainingMode":
        """Accepts enum values and the table spellings (StandardSFT, SFT+Bidir, CausalBilevel, FocuSFT)."""
        if isinstance(value, TrainingMode):
            return value
        key = re.sub(r"[^a-z]", "", str(value).lower())
        aliases = {
            "standardsft": cls.STANDARD_SFT,
            "sft": cls.STANDARD_SFT,
            "sftbidir": cls.SFT_BIDIR,
            "causalbilevel": cls.CAUSAL_BILEVEL,
            "focusft": cls.FOCUSFT,
        }
        if key not in aliases:
            _fail(f"Unknown training mode '{value}'. Expected one of {[m.value for m in cls]}.")
        return aliases[key]


class TaskKind(str, Enum):
    SINGLE_FACT = "single_fact"
    TWO_FACT = "two_fact"
    MULTI_VALUE = "multi_value"
    AGGREGATION = "aggregation"
    AGENTIC = "agentic"


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape of the toy decoder.

    Attributes:
        n_layers (int): Number of transformer blocks.
        n_heads (int): Attention heads per block.
        d_model (int): Residual width.
        d_ff (int): FFN hidden width.
        vocab_size (int): Number of token ids.
        max_seq_len (int): Longest sequence forward() accepts.
        rope_base (float): RoPE frequency base.
        seed (int): Initialization seed.
        ffn_kind (str): "plain" (up/down, GELU) or "gated" (gate/up/down, SiLU).
        use_rope (bool): False only for position-free symmetry checks.
    """
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 64
    max_seq_len: int = 256
    rope_base: float = 10000.0
    seed: int = 0
    ffn_kind: str = "plain"
    use_rope: bool = True

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_matrices(self) -> Tuple[str, ...]:
        return ("gate", "up", "down") if self.ffn_kind == "gated" else ("up", "down")

    def ffn_shape(self, matrix_id: str) -> Tuple[int, int]:
        """(in, out) of an FFN matrix in row-vector convention y = x @ W."""
        if matrix_id == "down":
            return self.d_ff, self.d_model
        return self.d_model, self.d_ff

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                _fail(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}.")
        if self.d_model % self.n_heads != 0:
            _fail(f"ModelConfig.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads}).")
        if self.d_head % 2 != 0:
            _fail(f"ModelConfig.d_head ({self.d_head}) must be even for rotary pairing.")
        if self.ffn_kind not in ("plain", "gated"):
            _fail(f"ModelConfig.ffn_kind must be 'plain' or 'gated', got '{self.ffn_kind}'.")
        if self.rope_base <= 1.0:
            _fail(f"ModelConfig.rope_base must be > 1, got {self.rope_base}.")
        return self


@dataclass(frozen=True)
class AdapterConfig:
    """Fast-weight (LoRA) adapter settings."""
    rank: int = 8
    alpha: float = 16.0
    layer_fraction: float = 0.5
    target_matrices: Optional[Tuple[str, ...]] = None  # None hooks every FFN matrix
    seed: int = 0
    dropout: float = 0.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def targets(self, model_config: ModelConfig) -> Tuple[str, ...]:
        if self.target_matrices is None:
            return model_config.ffn_matrices
        return tuple(self.target_matrices)

    def validate(self, model_config: Optional[ModelConfig] = None) -> "AdapterConfig":
        if self.rank < 1:
            _fail(f"AdapterConfig.rank must be >= 1, got {self.rank}.")
        if not 0.0 < self.layer_fraction <= 1.0:
            _fail(f"AdapterConfig.layer_fraction must lie in (0, 1], got {self.layer_fraction}.")
        if self.dropout != 0.0:
            _fail("AdapterConfig.dropout must be 0.0; fast weights are trained without dropout.")
        if model_config is not None:
            for matrix_id in self.targets(model_config):
                if matrix_id not in model_config.ffn_matrices:
                    _fail(f"Adapter target '{matrix_id}' is not an FFN matrix of a "
                          f"'{model_config.ffn_kind}' FFN {model_config.ffn_matrices}.")
                fan_in, fan_out = model_config.ffn_shape(matrix_id)
                if self.rank > min(fan_in, fan_out):
                    _fail(f"AdapterConfig.rank {self.rank} exceeds min dimension "
                          f"{min(fan_in, fan_out)} of FFN matrix '{matrix_id}'.")
        return self


@dataclass(frozen=True)
class TrainerConfig:
    """Inner/outer loop settings. Defaults are the toy preset."""
    mode: TrainingMode = TrainingMode.FOCUSFT
    inner_steps: int = 2
    eta_in: float = 1e-2
    inner_clip: float = 1.0
    lr: float = 1e-3
    schedule: str = "cosine"
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    betas: Tuple[float, float] = (0.9, 0.999)
    epochs: int = 5
    batch_size: int = 1
    seed: int = 0
    log_every: int = 50
    trace_every: int = 0
    sink_window: int = 5
    checkpoint_every: int = 0
    log_timings: bool = False

    def validate(self) -> "TrainerConfig":
        if self.inner_steps < 0:
            _fail(f"TrainerConfig.inner_steps (K) must be >= 0, got {self.inner_steps}.")
        if self.eta_in < 0 or self.lr < 0:
            _fail("Learning rates must be non-negative.")
        if self.inner_clip <= 0 or self.max_grad_norm <= 0:
            _fail("Gradient clip norms must be positive.")
        if self.schedule not in ("cosine", "constant"):
            _fail(f"TrainerConfig.schedule must be 'cosine' or 'constant', got '{self.schedule}'.")
        if not 0.0 <= self.warmup_fraction < 1.0:
            _fail(f"TrainerConfig.warmup_fraction must lie in [0, 1), got {self.warmup_fraction}.")
        if self.epochs < 1 or self.batch_size < 1:
            _fail("TrainerConfig.epochs and batch_size must be >= 1.")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            _fail(f"AdamW betas must lie in [0, 1), got {self.betas}.")
        return self


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic long-context task settings."""
    kind: TaskKind = TaskKind.SINGLE_FACT
    seq_len: int = 256
    n_context_turns: int = 4
    n_turns: int = 5
    needle_depth: Optional[float] = None  # None draws a depth per sample
    n_keys: int = 16
    n_values: int = 16
    n_fillers: int = 24
    n_train: int = 200
    n_eval: int = 100
    eval_pair_fraction: float = 0.2
    depth_bins: int = 5
    sink_window: int = 5
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return RESERVED_SYMBOLS + self.n_keys + self.n_values + self.n_fillers

    def validate(self) -> "TaskConfig":
        if self.n_keys < 3 or self.n_values < 2 or self.n_fillers < 1:
            _fail("TaskConfig needs n_keys >= 3, n_values >= 2 and n_fillers >= 1.")
        if self.needle_depth is not None and not 0.0 <= self.needle_depth <= 1.0:
            _fail(f"TaskConfig.needle_depth must lie in [0, 1], got {self.needle_depth}.")
        if not 0.0 < self.eval_pair_fraction < 1.0:
            _fail(f"TaskConfig.eval_pair_fraction must lie in (0, 1), got {self.eval_pair_fraction}.")
        if self.n_train < 1 or self.n_eval < 0 or self.depth_bins < 1:
            _fail("TaskConfig needs n_train >= 1, n_eval >= 0 and depth_bins >= 1.")
        if self.n_turns < 2:
            _fail(f"TaskConfig.n_turns must be >= 2, got {self.n_turns}.")
        if self.n_context_turns < 1:
            _fail(f"TaskConfig.n_context_turns must be >= 1, got {self.n_context_turns}.")
        return self


class RunConfig(BaseModel):
    """
    Flat run file schema. Unknown keys are rejected and every field is validated
    before any compute starts.
    """
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    # model
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 64
    max_seq_len: int = 256
    rope_base: float = 10000.0
    ffn_kind: str = "plain"
    use_rope: bool = True
    # fast weights
    lora_rank: int = 8
    lora_alpha: float = 16.0
    layer_fraction: float = 0.5
    target_matrices: Optional[List[str]] = None
    lora_dropout: float = 0.0
    # trainer
    mode: str = "focusft"
    inner_steps: int = 2
    eta_in: float = 1e-2
    inner_clip: float = 1.0
    lr: float = 1e-3
    schedule: str = "cosine"
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 5
    batch_size: int = 1
    seed: int = 0
    # task
    task_kind: str = "single_fact"
    seq_len: int = 256
    n_context_turns: int = 4
    n_turns: int = 5
    needle_depth: Optional[float] = None
    n_keys: int = 16
    n_values: int = 16
    n_fillers: int = 24
    n_train: int = 200
    n_eval: int = 100
    eval_pair_fraction: float = 0.2
    depth_bins: int = 5
    # run
    output_dir: str = "runs/toy"
    checkpoint_every: int = 0
    log_every: int = 50
    log_timings: bool = False
    trace_every: int = 0
    sink_window: int = 5

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, value: str) -> str:
        return TrainingMode.parse(value).value

    @field_validator("task_kind")
    @classmethod
    def _known_task(cls, value: str) -> str:
        try:
            return TaskKind(value).value
        except ValueError:
            raise ValueError(f"unknown task kind '{value}', expected one of {[k.value for k in TaskKind]}")

    @model_validator(mode="after")
    def _cross_field(self) -> "RunConfig":
        try:
            model = self.to_model_config().validate()
            self.to_adapter_config().validate(model)
            self.to_trainer_config().validate()
            task = self.to_task_config().validate()
        except ConfigError as e:
            raise ValueError(str(e)) from e
        if task.vocab_size > model.vocab_size:
            raise ValueError(f"task needs {task.vocab_size} symbols but vocab_size is {model.vocab_size}")
        if self.seq_len > self.max_seq_len:
            raise ValueError(f"seq_len {self.seq_len} exceeds max_seq_len {self.max_seq_len}")
        if self.sink_window < 1 or self.sink_window > self.seq_len:
            raise ValueError(f"sink_window must lie in [1, seq_len], got {self.sink_window}")
        return self

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model,
                           d_ff=self.d_ff, vocab_size=self.vocab_size, max_seq_len=self.max_seq_len,
                           rope_base=self.rope_base, seed=self.seed, ffn_kind=self.ffn_kind,
                           use_rope=self.use_rope)

    def to_adapter_config(self) -> AdapterConfig:
        targets = tuple(self.target_matrices) if self.target_matrices else None
        return AdapterConfig(rank=self.lora_rank, alpha=self.lora_alpha, layer_fraction=self.layer_fraction,
                             target_matrices=targets, seed=self.seed, dropout=self.lora_dropout)

    def to_trainer_config(self) -> TrainerConfig:
        return TrainerConfig(mode=TrainingMode.parse(self.mode), inner_steps=self.inner_steps,
                             eta_in=self.eta_in, inner_clip=self.inner_clip, lr=self.lr,
                             schedule=self.schedule, warmup_fraction=self.warmup_fraction,
                             weight_decay=self.weight_decay, max_grad_norm=self.max_grad_norm,
                             betas=(self.adam_beta1, self.adam_beta2), epochs=self.epochs,
                             batch_size=self.batch_size, seed=self.seed, log_every=self.log_every,
                             trace_every=self.trace_every, sink_window=self.sink_window,
                             checkpoint_every=self.checkpoint_every, log_timings=self.log_timings)

    def to_task_config(self) -> TaskConfig:
        return TaskConfig(kind=TaskKind(self.task_kind), seq_len=self.seq_len,
                          n_context_turns=self.n_context_turns, n_turns=self.n_turns,
                          needle_depth=self.needle_depth, n_keys=self.n_keys, n_values=self.n_values,
                          n_fillers=self.n_fillers, n_train=self.n_train, n_eval=self.n_eval,
                          eval_pair_fraction=self.eval_pair_fraction, depth_bins=self.depth_bins,
                          sink_window=self.sink_window, seed=self.seed)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a re-validated copy with the given keys replaced (None values are ignored)."""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return build_run_config(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a flat mapping into a RunConfig, turning pydantic errors into a ConfigError."""
    try:
        return RunConfig(**data)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        _fail(f"Invalid run configuration: {details}")


def load_config_from_yaml(file_path: Union[str, Path] = PRESET_DIR / "toy.yaml",
                          **overrides: Any) -> RunConfig:
    """
    Load a run configuration from a flat YAML file.

    Parameters:
        file_path (str | Path): Path to the YAML configuration file.
        overrides: Keys replaced after loading (None values are ignored).

    Returns:
        RunConfig: Fully validated configuration.

    Raises:
        ConfigError: If the file is missing, is not a mapping, or fails validation.
    """
    path = Path(file_path)
    if not path.exists():
        _fail(f"Configuration file does not exist: {path}")
    with open(path, "r") as file:
        config_data = yaml.safe_load(file) or {}
    if not isinstance(config_data, dict):
        _fail(f"Configuration file {path} must contain a flat key-value mapping.")

    config_data.update({k: v for k, v in overrides.items() if v is not None})
    config = build_run_config(config_data)
    PipelineOperation.info(f"Loaded configuration from {path} (mode={config.mode}, seed={config.seed}).")
    return config


def load_preset(name: str, **overrides: Any) -> RunConfig:
    """Load one of the shipped presets ('toy' or 'paper')."""
    path = PRESET_DIR / f"{name}.yaml"
    if not path.exists():
        _fail(f"Unknown preset '{name}'. Available: {sorted(p.stem for p in PRESET_DIR.glob('*.yaml'))}")
    return load_config_from_yaml(path, **overrides)


__all__ = [
    "AdapterConfig", "ModelConfig", "RunConfig", "TaskConfig", "TaskKind", "TrainerConfig",
    "TrainingMode", "build_run_config", "load_config_from_yaml", "load_preset",
]
