"""
Toy pre-norm decoder: RMS-normalized residual blocks, rotary positions, mask-parameterized
multi-head attention, an FFN whose matrices accept fast-weight hooks, and a head tied to
the token embedding. Row-vector convention throughout: y = x @ W.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.configs import ModelConfig
from src.tensor_core import ops
from src.tensor_core.tensor import Tensor
from src.utils.errors import DimensionError, InputError, TaskError
from src.utils.monitors import HighLevelErrors, ModelingOperation

if TYPE_CHECKING:
    from src.fastweights.adapters import AdapterSet

INIT_STD = 0.02


@dataclass
class LayerWeights:
    attn_gain: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn_gain: Tensor
    ffn: Dict[str, Tensor]

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        named = [(f"{prefix}.attn_gain", self.attn_gain), (f"{prefix}.w_q", self.w_q),
                 (f"{prefix}.w_k", self.w_k), (f"{prefix}.w_v", self.w_v), (f"{prefix}.w_o", self.w_o),
                 (f"{prefix}.ffn_gain", self.ffn_gain)]
        named += [(f"{prefix}.ffn.{matrix_id}", self.ffn[matrix_id]) for matrix_id in sorted(self.ffn)]
        return named


@dataclass
class ModelWeights:
    """Parameters θ. The output head reuses the embedding matrix."""
    config: ModelConfig
    embedding: Tensor
    layers: List[LayerWeights]
    final_gain: Tensor

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [("embedding", self.embedding)]
        for index, layer in enumerate(self.layers):
            named += layer.named_parameters(f"layers.{index}")
        named.append(("final_gain", self.final_gain))
        return named

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ModelWeights":
        """Deep copy of the values (a weight snapshot)."""
        clone = {name: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=name)
                 for name, p in self.named_parameters()}
        return assemble_weights(self.config, clone)

    @contextmanager
    def frozen(self) -> Iterator["ModelWeights"]:
        """θ stops requiring grad inside the block, so no op on θ alone is recorded."""
        saved = [(p, p.requires_grad) for p in self.parameters()]
        for p, _ in saved:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in saved:
                p.requires_grad = flag


@dataclass
class AttentionTrace:
    """Post-softmax attention maps, one [heads x T x T] array per layer."""
    enabled: bool = True
    maps: Dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, layer: int, probs: np.ndarray) -> None:
        if self.enabled:
            self.maps[layer] = probs

    @property
    def layers(self) -> List[int]:
        return sorted(self.maps)

    def layer(self, index: int) -> np.ndarray:
        if index not in self.maps:
            message = f"Trace holds layers {self.layers}, not layer {index}."
            HighLevelErrors.error(message)
            raise TaskError(message)
        return self.maps[index]

    def stacked(self) -> np.ndarray:
        """[layers x heads x T x T]."""
        return np.stack([self.maps[index] for index in self.layers])

    @classmethod
    def from_array(cls, maps: np.ndarray) -> "AttentionTrace":
        maps = np.asarray(maps, dtype=np.float64)
        return cls(enabled=True, maps={index: maps[index] for index in range(maps.shape[0])})


def assemble_weights(config: ModelConfig, named: Dict[str, Tensor]) -> ModelWeights:
    layers = []
    for index in range(config.n_layers):
        prefix = f"layers.{index}"
        layers.append(LayerWeights(
            attn_gain=named[f"{prefix}.attn_gain"], w_q=named[f"{prefix}.w_q"],
            w_k=named[f"{prefix}.w_k"], w_v=named[f"{prefix}.w_v"], w_o=named[f"{prefix}.w_o"],
            ffn_gain=named[f"{prefix}.ffn_gain"],
            ffn={m: named[f"{prefix}.ffn.{m}"] for m in config.ffn_matrices},
        ))
    return ModelWeights(config=config, embedding=named["embedding"], layers=layers,
                        final_gain=named["final_gain"])


def init_model(config: ModelConfig) -> ModelWeights:
    """
    Deterministic initialization from config.seed.

    Linear weights are N(0, 0.02); residual-output matrices (w_o and the FFN down
    projection) use 0.02 / sqrt(2 * n_layers). Gains start at 1.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, resid_std = config.d_model, INIT_STD / np.sqrt(2 * config.n_layers)

    def normal(name: str, shape: Tuple[int, int], std: float) -> Tensor:
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

    def ones(name: str, width: int) -> Tensor:
        return Tensor(np.ones(width), requires_grad=True, name=name)

    named: Dict[str, Tensor] = {"embedding": normal("embedding", (config.vocab_size, d), INIT_STD)}
    for index in range(config.n_layers):
        prefix = f"layers.{index}"
        named[f"{prefix}.attn_gain"] = ones(f"{prefix}.attn_gain", d)
        for proj in ("w_q", "w_k", "w_v"):
            named[f"{prefix}.{proj}"] = normal(f"{prefix}.{proj}", (d, d), INIT_STD)
        named[f"{prefix}.w_o"] = normal(f"{prefix}.w_o", (d, d), resid_std)
        named[f"{prefix}.ffn_gain"] = ones(f"{prefix}.ffn_gain", d)
        for matrix_id in config.ffn_matrices:
            std = resid_std if matrix_id == "down" else INIT_STD
            named[f"{prefix}.ffn.{matrix_id}"] = normal(f"{prefix}.ffn.{matrix_id}",
                                                        config.ffn_shape(matrix_id), std)
    named["final_gain"] = ones("final_gain", d)

    weights = assemble_weights(config, named)
    ModelingOperation.info(f"Initialized model: {config.n_layers} layers, d_model={d}, "
                           f"{weights.num_parameters():,} parameters (seed={config.seed}).")
    return weights


def rope_tables(positions: Sequence[int], d_head: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T x d_head/2] with frequencies base^(-2i/d_head)."""
    if d_head % 2 != 0:
        from src.utils.errors import ConfigError
        message = f"Rotary embedding needs an even head width, got {d_head}."
        HighLevelErrors.error(message)
        raise ConfigError(message)
    freqs = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: Tensor, positions: Sequence[int], base: float = 10000.0) -> Tensor:
    """Rotate query/key rows [T x d_head] by their positions; position 0 is the identity."""
    if x.shape[0] != len(positions):
        message = f"rope_apply got {x.shape[0]} rows but {len(positions)} positions."
        HighLevelErrors.error(message)
        raise DimensionError(message)
    cos, sin = rope_tables(positions, x.shape[1], base)
    return ops.rope_rotate(x, cos, sin)


def attention(h: Tensor, layer: LayerWeights, mask: np.ndarray, config: ModelConfig,
              trace: Optional[AttentionTrace] = None, layer_index: int = 0,
              positions: Optional[Sequence[int]] = None) -> Tensor:
    """
    Multi-head attention: per head z = q k^T / sqrt(d_head) + mask, α = softmax_rows(z),
    o = α v; heads are concatenated and projected by W_O.
    """
    length = h.shape[0]
    positions = list(range(length)) if positions is None else list(positions)
    q_all, k_all, v_all = h @ layer.w_q, h @ layer.w_k, h @ layer.w_v
    d_head = config.d_head
    inv_scale = 1.0 / np.sqrt(d_head)

    outputs, probs = [], []
    for head in range(config.n_heads):
        lo, hi = head * d_head, (head + 1) * d_head
        q = ops.columns(q_all, lo, hi)
        k = ops.columns(k_all, lo, hi)
        v = ops.columns(v_all, lo, hi)
        if config.use_rope:
            q = rope_apply(q, positions, config.rope_base)
            k = rope_apply(k, positions, config.rope_base)
        scores = ops.scale(q @ ops.transpose(k), inv_scale)
        alpha = ops.softmax_rows(scores, mask)
        probs.append(alpha.data)
        outputs.append(alpha @ v)

    if trace is not None:
        trace.record(layer_index, np.stack(probs))
    merged = outputs[0] if len(outputs) == 1 else ops.concat_columns(outputs)
    return merged @ layer.w_o


def _linear(x: Tensor, weight: Tensor, adapters: Optional["AdapterSet"], layer_index: int,
            matrix_id: str) -> Tensor:
    y = x @ weight
    if adapters is not None and adapters.has(layer_index, matrix_id):
        from src.fastweights.adapters import adapter_delta
        y = y + adapter_delta(adapters, layer_index, matrix_id, x)
    return y


def feed_forward(x: Tensor, layer: LayerWeights, config: ModelConfig,
                 adapters: Optional["AdapterSet"] = None, layer_index: int = 0) -> Tensor:
    if config.ffn_kind == "gated":
        gate = ops.silu(_linear(x, layer.ffn["gate"], adapters, layer_index, "gate"))
        up = _linear(x, layer.ffn["up"], adapters, layer_index, "up")
        hidden = gate * up
    else:
        hidden = ops.gelu(_linear(x, layer.ffn["up"], adapters, layer_index, "up"))
    return _linear(hidden, layer.ffn["down"], adapters, layer_index, "down")


def forward(weights: ModelWeights, tokens: Sequence[int], mask: np.ndarray,
            adapters: Optional["AdapterSet"] = None, trace: Optional[AttentionTrace] = None,
            positions: Optional[Sequence[int]] = None) -> Tensor:
    """
    Logits [T x V] for a token sequence under an additive attention mask.

    Raises:
        InputError: If a token id is out of range or the sequence is too long.
        DimensionError: If the mask is not T x T.
    """
    config = weights.config
    tokens = [int(t) for t in tokens]
    length = len(tokens)
    if length == 0 or length > config.max_seq_len:
        message = f"Sequence length {length} outside [1, {config.max_seq_len}]."
        HighLevelErrors.error(message)
        raise InputError(message)
    bad = [t for t in tokens if not 0 <= t < config.vocab_size]
    if bad:
        message = f"Token ids {bad[:5]} outside vocabulary of size {config.vocab_size}."
        HighLevelErrors.error(message)
        raise InputError(message)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (length, length):
        message = f"Mask shape {mask.shape} does not match sequence length {length}."
        HighLevelErrors.error(message)
        raise DimensionError(message)

    h = ops.gather_rows(weights.embedding, tokens)
    for index, layer in enumerate(weights.layers):
        a = ops.rms_norm(h, layer.attn_gain)
        h = h + attention(a, layer, mask, config, trace, index, positions)
        f = ops.rms_norm(h, layer.ffn_gain)
        h = h + feed_forward(f, layer, config, adapters, index)
    h = ops.rms_norm(h, weights.final_gain)
    return h @ ops.transpose(weights.embedding)


def response_cross_entropy(logits: Tensor, tokens: Sequence[int], response_positions: Set[int]) -> Tensor:
    """
    Mean over R of -log p(x_i | x_<i), with p read from the logits at position i - 1.

    Raises:
        TaskError: If R is empty, contains position 0 or reaches past the sequence.
    """
    positions = sorted(int(i) for i in response_positions)
    if not positions:
        message = "Response set is empty; there is nothing to predict."
        HighLevelErrors.error(message)
        raise TaskError(message)
    if positions[0] < 1:
        message = "Response position 0 has no prefix to be predicted from."
        HighLevelErrors.error(message)
        raise TaskError(message)
    if positions[-1] >= len(tokens):
        message = f"Response position {positions[-1]} lies outside the {len(tokens)}-token sequence."
        HighLevelErrors.error(message)
        raise TaskError(message)
    targets = [int(tokens[i]) for i in positions]
    return ops.cross_entropy_rows(logits, [i - 1 for i in positions], targets)
