"""
Bilevel fine-tuning step.

Inner loop: K plain-SGD steps on the fast weights φ with θ frozen, minimizing the
response cross-entropy under the mode's mask. Outer step: the same loss with
(θ, φ^(K)) where φ^(K) is a detached constant; only θ is updated (AdamW, warmup-cosine).
φ is discarded after every step and re-drawn from a per-step seed.
"""
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.configs import AdapterConfig, TrainerConfig, TrainingMode
from src.diagnostics.attention_metrics import sink_mass
from src.fastweights.adapters import AdapterSet, init_adapters
from src.masking.attention_mask import CausalMaskBuilder, FocusMaskBuilder, IMaskBuilder, Segmentation
from src.models.checkpoint import CheckpointStore
from src.models.transformer import AttentionTrace, ModelWeights, forward, response_cross_entropy
from src.bilevel.metrics import MetricsWriter, StepReport, log_report
from src.taskgen.sample import Sample
from src.tensor_core.optim import ADAMW, SGD, OptimizerState, WarmupCosineSchedule, clip_grad_norm, optimizer_apply
from src.tensor_core.tensor import Tape, Tensor, backward, no_grad, tape_scope
from src.utils.errors import NumericalError, StepAbortedError, TaskError
from src.utils.monitors import HighLevelErrors, TrainingOperation


def mask_builder(mode: TrainingMode) -> IMaskBuilder:
    """Bidirectional-context mask for FocuSFT / SFT+Bidir, causal otherwise."""
    return FocusMaskBuilder() if TrainingMode.parse(mode).bidirectional else CausalMaskBuilder()


def adapter_seed(run_seed: int, step: int, micro: int = 0) -> int:
    return int(np.random.SeedSequence([run_seed, step, micro]).generate_state(1)[0])


def objective(weights: ModelWeights, tokens: Sequence[int], targets: Sequence[int], mask: np.ndarray,
              adapters: Optional[AdapterSet] = None, trace: Optional[AttentionTrace] = None) -> Tensor:
    """Response cross-entropy shared by both loops."""
    logits = forward(weights, tokens, mask, adapters=adapters, trace=trace)
    return response_cross_entropy(logits, tokens, set(targets))


def _checked_loss(compute, step: int, phase: str) -> Tensor:
    try:
        loss = compute()
    except NumericalError as e:
        report = StepAbortedError(step, phase, str(e), e)
        HighLevelErrors.error(str(report))
        raise report from e
    if not np.isfinite(loss.data).all():
        report = StepAbortedError(step, phase, f"loss is {loss.item()}")
        HighLevelErrors.error(str(report))
        raise report
    return loss


@dataclass
class InnerLoopResult:
    """φ^(K) (still the live tensors), the loss trajectory, per-step pre-clip norms and the frozen tapes."""
    adapters: AdapterSet
    losses: List[float]
    grad_norms: List[float]
    tapes: List[Tape] = field(default_factory=list)


def inner_loop(weights: ModelWeights, adapters: AdapterSet, tokens: Sequence[int], targets: Sequence[int],
               mask: np.ndarray, config: TrainerConfig, steps: Optional[int] = None,
               eta_in: Optional[float] = None, evaluate_final: bool = True, step: int = 0) -> InnerLoopResult:
    """
    K SGD steps on φ: φ <- φ - η_in * clip(∇_φ L_inner), θ frozen throughout.

    Parameters:
        steps / eta_in: Override config.inner_steps and config.eta_in.
        evaluate_final: Append L_inner(φ^(K)) with an extra forward; the trainer skips it
            and records the outer loss instead, which is the same quantity.

    Returns:
        InnerLoopResult: losses are L_inner(φ^(0..K-1)), plus L_inner(φ^(K)) when evaluate_final.

    Raises:
        StepAbortedError: On a non-finite inner loss.
    """
    steps = config.inner_steps if steps is None else int(steps)
    sgd = OptimizerState(kind=SGD, lr=config.eta_in if eta_in is None else float(eta_in))
    params = adapters.parameters()
    losses, norms, tapes = [], [], []

    with weights.frozen():
        for _ in range(steps):
            with tape_scope() as tape:
                loss = _checked_loss(lambda: objective(weights, tokens, targets, mask, adapters), step, "inner")
                adapters.zero_grad()
                backward(loss)
            tape.freeze()
            tapes.append(tape)
            losses.append(loss.item())
            norms.append(clip_grad_norm(params, config.inner_clip))
            optimizer_apply(sgd, params)
        adapters.zero_grad()
        if evaluate_final:
            with no_grad():
                final = _checked_loss(lambda: objective(weights, tokens, targets, mask, adapters), step, "inner")
            losses.append(final.item())
    return InnerLoopResult(adapters, losses, norms, tapes)


def outer_gradients(weights: ModelWeights, adapters: Optional[AdapterSet], tokens: Sequence[int],
                    targets: Sequence[int], mask: np.ndarray, trace: Optional[AttentionTrace] = None,
                    step: int = 0) -> Tuple[float, List[Optional[np.ndarray]], Tape]:
    """
    ∇_θ L_outer(θ, φ) with φ a constant. Returns (loss, one gradient per θ tensor, tape).

    Raises:
        TaskError: If φ still requires grad (it must be detached first).
        StepAbortedError: On a non-finite outer loss.
    """
    if adapters is not None and any(p.requires_grad for p in adapters.parameters()):
        message = "Outer step received live fast weights; pass adapters.detached()."
        HighLevelErrors.error(message)
        raise TaskError(message)
    weights.zero_grad()
    with tape_scope() as tape:
        loss = _checked_loss(lambda: objective(weights, tokens, targets, mask, adapters, trace), step, "outer")
        backward(loss)
    tape.freeze()
    grads = [None if p.grad is None else p.grad.copy() for p in weights.parameters()]
    weights.zero_grad()
    return loss.item(), grads, tape


class IBilevelTrainer(ABC):
    @abstractmethod
    def train(self, dataset: Sequence[Sample]) -> Tuple[ModelWeights, List[StepReport]]:
        pass


class BilevelTrainer(IBilevelTrainer):
    """
    Runs the four ablation modes: StandardSFT, SFT+Bidir, CausalBilevel and FocuSFT.

    Attributes:
        weights (ModelWeights): θ, updated in place.
        config (TrainerConfig): Loop settings; config.mode picks (bilevel?, bidirectional?).
        adapter_config (AdapterConfig): Fast-weight shape for bilevel modes.
        optimizer (OptimizerState): Outer AdamW state.
    """

    def __init__(self, weights: ModelWeights, config: TrainerConfig, adapter_config: AdapterConfig,
                 run_dir: Optional[Union[str, Path]] = None):
        self.weights = weights
        self.config = config.validate()
        self.mode = TrainingMode.parse(config.mode)
        self.adapter_config = adapter_config.validate(weights.config)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.masks = mask_builder(self.mode)
        self.optimizer = OptimizerState(kind=ADAMW, lr=config.lr, betas=tuple(config.betas),
                                        weight_decay=config.weight_decay)
        self.schedule = WarmupCosineSchedule(config.lr, 1, config.warmup_fraction, config.schedule)
        self.step = 0
        self.reports: List[StepReport] = []

    def fresh_adapters(self, step: int, micro: int = 0) -> AdapterSet:
        return init_adapters(self.adapter_config, self.weights.config, adapter_seed(self.config.seed, step, micro))

    def mask_for(self, seg: Segmentation) -> np.ndarray:
        return self.masks.build(seg)

    def inner_loop(self, sample: Sample, adapters: AdapterSet, mask: Optional[np.ndarray] = None,
                   evaluate_final: bool = True) -> InnerLoopResult:
        mask = self.mask_for(sample.segmentation) if mask is None else mask
        return inner_loop(self.weights, adapters, sample.tokens, sample.response_positions, mask, self.config,
                          evaluate_final=evaluate_final, step=self.step)

    def outer_step(self, batch: Sequence[Sample], adapters: Sequence[Optional[AdapterSet]],
                   lr: Optional[float] = None, trace: Optional[AttentionTrace] = None) -> Tuple[float, float]:
        """
        One θ update from a micro-batch, each sample paired with its (detached) φ^(K) or None.
        Gradients are averaged over the micro-batch, clipped at max_grad_norm and applied
        with AdamW. Returns (mean outer loss, pre-clip norm).
        """
        params = self.weights.parameters()
        total = [np.zeros_like(p.data) for p in params]
        losses = []
        for index, (sample, phi) in enumerate(zip(batch, adapters)):
            mask = self.mask_for(sample.segmentation)
            loss, grads, _ = outer_gradients(self.weights, phi, sample.tokens, sample.response_positions, mask,
                                             trace if index == 0 else None, step=self.step)
            losses.append(loss)
            for acc, g in zip(total, grads):
                if g is not None:
                    acc += g
        for p, acc in zip(params, total):
            p.grad = acc / len(batch)
        norm = clip_grad_norm(params, self.config.max_grad_norm)
        if not math.isfinite(norm):
            report = StepAbortedError(self.step, "outer", f"gradient norm is {norm}")
            HighLevelErrors.error(str(report))
            raise report
        optimizer_apply(self.optimizer, params, lr=self.config.lr if lr is None else lr)
        self.weights.zero_grad()
        return float(sum(losses) / len(losses)), norm

    def train_step(self, batch: Sequence[Sample], epoch: int = 0) -> StepReport:
        self.step += 1
        step = self.step
        t_inner = 0.0
        trajectories, inner_norms, detached = [], [], []

        for micro, sample in enumerate(batch):
            if not self.mode.bilevel:
                detached.append(None)
                continue
            start = time.perf_counter()
            result = self.inner_loop(sample, self.fresh_adapters(step, micro), evaluate_final=False)
            t_inner += time.perf_counter() - start
            trajectories.append(result.losses)
            inner_norms += result.grad_norms
            detached.append(result.adapters.detached())

        tracing = self.config.trace_every > 0 and step % self.config.trace_every == 0
        trace = AttentionTrace() if tracing else None
        lr = self.schedule.update_lr(step)
        start = time.perf_counter()
        outer_loss, outer_norm = self.outer_step(batch, detached, lr=lr, trace=trace)
        t_outer = time.perf_counter() - start

        inner_losses: List[float] = []
        if self.mode.bilevel:
            # L_inner(φ^(K)) equals the outer loss: same objective, mask, θ and φ^(K)
            inner_losses = [float(np.mean(column)) for column in zip(*trajectories)] + [outer_loss]
        report = StepReport(
            step=step, mode=self.mode.value, inner_losses=inner_losses, outer_loss=outer_loss,
            grad_norm_inner=float(np.mean(inner_norms)) if inner_norms else None,
            grad_norm_outer=outer_norm, t_inner_ms=1000.0 * t_inner, t_outer_ms=1000.0 * t_outer,
            lr=lr, epoch=epoch, inner_norms=inner_norms,
        )
        if tracing:
            report.sink_mass = sink_mass(trace, batch[0].segmentation, self.config.sink_window)[1]
        self.reports.append(report)
        return report

    def steps_per_epoch(self, n_samples: int) -> int:
        return int(math.ceil(n_samples / self.config.batch_size))

    def train(self, dataset: Sequence[Sample], writer: Optional[MetricsWriter] = None,
              checkpoint_dir: Optional[Union[str, Path]] = None) -> Tuple[ModelWeights, List[StepReport]]:
        """
        epochs x steps of (inner loop when bilevel, outer step); data order is a seeded
        permutation per epoch.

        Raises:
            TaskError: If the dataset is empty or a sample is malformed.
            StepAbortedError: On a non-finite loss; the last good θ is saved under
                checkpoint_dir/last before re-raising.
        """
        if not dataset:
            message = "Training dataset is empty."
            HighLevelErrors.error(message)
            raise TaskError(message)
        for sample in dataset:
            sample.validate()
        checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        n = len(dataset)
        total_steps = self.config.epochs * self.steps_per_epoch(n)
        self.schedule = WarmupCosineSchedule(self.config.lr, total_steps, self.config.warmup_fraction,
                                             self.config.schedule)
        TrainingOperation.info(f"Training {self.mode.value}: {n} samples, {self.config.epochs} epochs, "
                               f"{total_steps} steps, K={self.config.inner_steps}, eta_in={self.config.eta_in}.")
        try:
            for epoch in range(self.config.epochs):
                order = np.random.default_rng([self.config.seed, epoch]).permutation(n)
                for start in range(0, n, self.config.batch_size):
                    batch = [dataset[int(i)] for i in order[start:start + self.config.batch_size]]
                    report = self.train_step(batch, epoch)
                    if writer is not None:
                        writer.write(report)
                    if self.config.log_every and report.step % self.config.log_every == 0:
                        log_report(report)
                    if (checkpoint_dir is not None and self.config.checkpoint_every
                            and report.step % self.config.checkpoint_every == 0):
                        CheckpointStore(checkpoint_dir / f"step_{report.step:06d}").save(
                            self.weights, {"step": report.step, "mode": self.mode.value})
        except StepAbortedError:
            if checkpoint_dir is not None:
                CheckpointStore(checkpoint_dir / "last").save(self.weights, {"step": self.step, "aborted": True})
            raise
        TrainingOperation.info(f"Finished {self.mode.value}: final outer loss {self.reports[-1].outer_loss:.4f}.")
        return self.weights, self.reports
