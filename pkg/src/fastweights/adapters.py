"""
Fast weights φ: low-rank adapters on the FFN matrices of the top layers.

Each hooked matrix W (in -> out) gets a pair A [rank x in], B [out x rank] whose
contribution to the host output is scaling * (x @ A^T) @ B^T. B starts at zero, so a
fresh set has no effect on the forward pass while A still carries gradient to B.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.configs import AdapterConfig, ModelConfig
from src.tensor_core import ops
from src.tensor_core.tensor import Tensor
from src.utils.errors import ConfigError, UsageError
from src.utils.monitors import HighLevelErrors, ModelingOperation

HookKey = Tuple[int, str]


def select_layers(n_layers: int, layer_fraction: float) -> List[int]:
    """
    The round(layer_fraction * n_layers) highest-indexed layers, 0-based and ascending.

    Rounding is half-up, so 28 layers at 0.35 selects the top 10.

    Raises:
        ConfigError: If n_layers < 1 or the fraction selects no layer.
    """
    if n_layers < 1:
        message = f"select_layers needs n_layers >= 1, got {n_layers}."
        HighLevelErrors.error(message)
        raise ConfigError(message)
    count = min(n_layers, int(math.floor(layer_fraction * n_layers + 0.5)))
    if count < 1:
        message = f"layer_fraction {layer_fraction} selects no layer out of {n_layers}."
        HighLevelErrors.error(message)
        raise ConfigError(message)
    return list(range(n_layers - count, n_layers))


@dataclass
class AdapterSet:
    """Per (layer, matrix_id) low-rank factors sharing a common scaling = alpha / rank."""
    scaling: float
    rank: int
    factors: Dict[HookKey, Tuple[Tensor, Tensor]] = field(default_factory=dict)

    def has(self, layer: int, matrix_id: str) -> bool:
        return (layer, matrix_id) in self.factors

    @property
    def hooks(self) -> List[HookKey]:
        return sorted(self.factors)

    @property
    def layers(self) -> List[int]:
        return sorted({layer for layer, _ in self.factors})

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for layer, matrix_id in self.hooks:
            a, b = self.factors[(layer, matrix_id)]
            yield f"layers.{layer}.{matrix_id}.A", a
            yield f"layers.{layer}.{matrix_id}.B", b

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def detached(self) -> "AdapterSet":
        """Constant copy: no tape connection and no grad requirement."""
        return AdapterSet(scaling=self.scaling, rank=self.rank,
                          factors={key: (a.detach(), b.detach()) for key, (a, b) in self.factors.items()})

    def dense_delta(self, layer: int, matrix_id: str) -> np.ndarray:
        """Materialized [in x out] update equivalent to the adapter pair."""
        a, b = self._pair(layer, matrix_id)
        return self.scaling * (a.data.T @ b.data.T)

    def _pair(self, layer: int, matrix_id: str) -> Tuple[Tensor, Tensor]:
        if (layer, matrix_id) not in self.factors:
            message = f"No adapter registered for layer {layer}, matrix '{matrix_id}'; hooks are {self.hooks}."
            HighLevelErrors.error(message)
            raise UsageError(message)
        return self.factors[(layer, matrix_id)]


def init_adapters(config: AdapterConfig, model_config: ModelConfig,
                  seed: Optional[int] = None) -> AdapterSet:
    """
    Fresh zero-effect fast weights: A ~ N(0, 1/in), B = 0.

    Parameters:
        config (AdapterConfig): Rank, alpha, layer fraction and target matrices.
        model_config (ModelConfig): Host model shape.
        seed (int | None): Overrides config.seed (the trainer passes a per-step seed).

    Raises:
        ConfigError: If the rank exceeds a hooked matrix dimension or no layer is selected.
    """
    config.validate(model_config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    factors: Dict[HookKey, Tuple[Tensor, Tensor]] = {}
    for layer in select_layers(model_config.n_layers, config.layer_fraction):
        for matrix_id in config.targets(model_config):
            fan_in, fan_out = model_config.ffn_shape(matrix_id)
            a = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(config.rank, fan_in)),
                       requires_grad=True, name=f"layers.{layer}.{matrix_id}.A")
            b = Tensor(np.zeros((fan_out, config.rank)), requires_grad=True,
                       name=f"layers.{layer}.{matrix_id}.B")
            factors[(layer, matrix_id)] = (a, b)
    return AdapterSet(scaling=config.scaling, rank=config.rank, factors=factors)


def reset(adapters: AdapterSet, config: AdapterConfig, model_config: ModelConfig,
          seed: Optional[int] = None) -> AdapterSet:
    """Discard every learned delta and return a fresh set, equivalent to init_adapters."""
    adapters.factors.clear()
    return init_adapters(config, model_config, seed)


def adapter_delta(adapters: AdapterSet, layer: int, matrix_id: str, x: Tensor) -> Tensor:
    """
    scaling * (x @ A^T) @ B^T for row inputs x [T x in].

    Raises:
        UsageError: If (layer, matrix_id) has no registered adapter.
    """
    a, b = adapters._pair(layer, matrix_id)
    return ops.scale((x @ ops.transpose(a)) @ ops.transpose(b), adapters.scaling)


def dump_adapters(adapters: AdapterSet, directory: Union[str, Path]) -> Path:
    """Debug dump of an adapter set in the checkpoint format."""
    from src.models.checkpoint import CheckpointStore

    named = {name: p.data for name, p in adapters.named_parameters()}
    meta = {"kind": "adapters", "scaling": adapters.scaling, "rank": adapters.rank}
    path = CheckpointStore(directory).save_arrays(named, meta)
    ModelingOperation.info(f"Dumped {len(named)} adapter tensors to {path}.")
    return path
