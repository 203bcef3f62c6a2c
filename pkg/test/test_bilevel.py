from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import src.bilevel.trainer as trainer_module
import src.masking.attention_mask as mask_module
from src.bilevel.evaluation import (depth_report, evaluate, evaluate_adapted, inference_adapt, pseudo_response,
                                    rescore_predictions)
from src.bilevel.metrics import MetricsWriter, read_jsonl
from src.bilevel.trainer import BilevelTrainer, adapter_seed, inner_loop, objective, outer_gradients
from src.configs import TaskConfig, TaskKind, TrainerConfig, TrainingMode
from src.fastweights.adapters import init_adapters
from src.masking.attention_mask import build_focusft_mask
from src.models.checkpoint import CheckpointStore
from src.models.transformer import init_model
from src.taskgen.dataset import make_splits
from src.taskgen.generators import generate
from src.tensor_core.tensor import Tensor, no_grad
from src.utils.errors import StepAbortedError, TaskError
from test.helpers import central_difference, relative_error


@pytest.fixture
def train_set(small_task):
    return make_splits(small_task)[0]


def run_losses(model_config, adapter_config, dataset, steps, **trainer_fields):
    fields = dict(inner_steps=2, eta_in=1e-2, lr=1e-3, epochs=3, log_every=0, seed=0)
    fields.update(trainer_fields)
    trainer = BilevelTrainer(init_model(model_config), TrainerConfig(**fields), adapter_config)
    _, reports = trainer.train(dataset)
    return [r.outer_loss for r in reports][:steps]


def live_adapters(adapter_config, model_config, rng):
    """Fast weights with a non-zero B so they actually change the forward pass."""
    adapters = init_adapters(adapter_config, model_config)
    for _, b in adapters.factors.values():
        b.data = rng.normal(scale=0.1, size=b.shape)
    return adapters


class TestModeEquivalence:
    def test_focusft_without_inner_steps_is_sft_bidir(self, small_config, adapter_config, train_set):
        focus = run_losses(small_config, adapter_config, train_set, 20, mode=TrainingMode.FOCUSFT, inner_steps=0)
        bidir = run_losses(small_config, adapter_config, train_set, 20, mode=TrainingMode.SFT_BIDIR)
        assert len(focus) == 20
        assert focus == bidir

    def test_causal_bilevel_without_inner_steps_is_standard_sft(self, small_config, adapter_config, train_set):
        bilevel = run_losses(small_config, adapter_config, train_set, 20, mode=TrainingMode.CAUSAL_BILEVEL,
                             inner_steps=0)
        standard = run_losses(small_config, adapter_config, train_set, 20, mode=TrainingMode.STANDARD_SFT)
        assert bilevel == standard

    def test_mask_choice_matters(self, small_config, adapter_config, train_set):
        causal = run_losses(small_config, adapter_config, train_set, 5, mode=TrainingMode.STANDARD_SFT)
        bidir = run_losses(small_config, adapter_config, train_set, 5, mode=TrainingMode.SFT_BIDIR)
        assert causal != bidir


class TestInnerLoop:
    def test_base_weights_are_untouched(self, tiny_model, tiny_config, adapter_config, trainer_config,
                                        tiny_tokens, tiny_segmentation, rng):
        snapshot = tiny_model.copy()
        adapters = live_adapters(adapter_config, tiny_config, rng)
        mask = build_focusft_mask(tiny_segmentation)
        result = inner_loop(tiny_model, adapters, tiny_tokens, tiny_segmentation.response_positions, mask,
                            trainer_config)
        for (name, p), (_, q) in zip(tiny_model.named_parameters(), snapshot.named_parameters()):
            assert_array_equal(p.data, q.data, err_msg=name)
            assert p.grad is None
            assert p.requires_grad
        assert len(result.losses) == 3
        assert len(result.grad_norms) == 2
        assert all(tape.frozen for tape in result.tapes)

    def test_zero_learning_rate_keeps_fast_weights(self, tiny_model, tiny_config, adapter_config, trainer_config,
                                                   tiny_tokens, tiny_segmentation, rng):
        adapters = live_adapters(adapter_config, tiny_config, rng)
        before = [p.data.copy() for p in adapters.parameters()]
        result = inner_loop(tiny_model, adapters, tiny_tokens, tiny_segmentation.response_positions,
                            build_focusft_mask(tiny_segmentation), trainer_config, eta_in=0.0)
        for p, saved in zip(adapters.parameters(), before):
            assert_array_equal(p.data, saved)
        assert result.losses[0] == result.losses[-1]

    def test_no_final_evaluation(self, tiny_model, tiny_config, adapter_config, trainer_config, tiny_tokens,
                                 tiny_segmentation):
        adapters = init_adapters(adapter_config, tiny_config)
        result = inner_loop(tiny_model, adapters, tiny_tokens, tiny_segmentation.response_positions,
                            build_focusft_mask(tiny_segmentation), trainer_config, steps=3, evaluate_final=False)
        assert len(result.losses) == 3

    def test_one_step_lowers_inner_loss(self, tiny_model, tiny_config, adapter_config, tiny_tokens,
                                        tiny_segmentation):
        config = TrainerConfig(inner_steps=1, eta_in=1e-3, inner_clip=1e6)
        adapters = init_adapters(adapter_config, tiny_config)
        for _, b in adapters.factors.values():
            b.data = np.full(b.shape, 1e-2)
        result = inner_loop(tiny_model, adapters, tiny_tokens, tiny_segmentation.response_positions,
                            build_focusft_mask(tiny_segmentation), config)
        assert result.losses[1] < result.losses[0]


class TestOuterGradients:
    def test_fast_weights_are_constant(self, tiny_model, tiny_config, adapter_config, tiny_tokens,
                                       tiny_segmentation, rng):
        phi = live_adapters(adapter_config, tiny_config, rng).detached()
        mask = build_focusft_mask(tiny_segmentation)
        targets = tiny_segmentation.response_positions
        _, grads, tape = outer_gradients(tiny_model, phi, tiny_tokens, targets, mask)
        assert tape.foreign_edges() == []

        names = [name for name, _ in tiny_model.named_parameters()]
        index = names.index("layers.1.ffn.up")
        param = tiny_model.parameters()[index]

        def loss():
            with no_grad():
                return objective(tiny_model, tiny_tokens, targets, mask, phi).item()

        numeric = central_difference(loss, param.data)
        assert relative_error(grads[index], numeric) < 1e-5

    def test_fresh_fast_weights_match_plain_gradient(self, tiny_model, tiny_config, adapter_config, tiny_tokens,
                                                     tiny_segmentation):
        mask = build_focusft_mask(tiny_segmentation)
        targets = tiny_segmentation.response_positions
        phi = init_adapters(adapter_config, tiny_config).detached()
        loss_phi, grads_phi, _ = outer_gradients(tiny_model, phi, tiny_tokens, targets, mask)
        loss_plain, grads_plain, _ = outer_gradients(tiny_model, None, tiny_tokens, targets, mask)
        assert loss_phi == loss_plain
        for g_phi, g_plain in zip(grads_phi, grads_plain):
            assert_allclose(g_phi, g_plain, atol=1e-14)

    def test_live_fast_weights_are_rejected(self, tiny_model, tiny_config, adapter_config, tiny_tokens,
                                            tiny_segmentation):
        adapters = init_adapters(adapter_config, tiny_config)
        with pytest.raises(TaskError):
            outer_gradients(tiny_model, adapters, tiny_tokens, tiny_segmentation.response_positions,
                            build_focusft_mask(tiny_segmentation))


class TestBilevelTrainer:
    def test_seeded_runs_are_identical(self, small_config, adapter_config, trainer_config, train_set):
        first = BilevelTrainer(init_model(small_config), trainer_config, adapter_config)
        second = BilevelTrainer(init_model(small_config), trainer_config, adapter_config)
        w1, r1 = first.train(train_set)
        w2, r2 = second.train(train_set)
        assert [r.outer_loss for r in r1] == [r.outer_loss for r in r2]
        assert [r.inner_losses for r in r1] == [r.inner_losses for r in r2]
        for p, q in zip(w1.parameters(), w2.parameters()):
            assert_array_equal(p.data, q.data)

    def test_step_reports(self, small_config, adapter_config, trainer_config, train_set):
        trainer = BilevelTrainer(init_model(small_config), trainer_config, adapter_config)
        _, reports = trainer.train(train_set)
        assert [r.step for r in reports] == list(range(1, len(train_set) + 1))
        assert trainer.step == len(train_set)
        for report in reports:
            assert len(report.inner_losses) == trainer_config.inner_steps + 1
            assert report.inner_losses[-1] == report.outer_loss
            assert report.grad_norm_inner is not None

    def test_non_bilevel_reports_have_no_inner_losses(self, small_config, adapter_config, trainer_config,
                                                      train_set):
        config = replace(trainer_config, mode=TrainingMode.STANDARD_SFT)
        _, reports = BilevelTrainer(init_model(small_config), config, adapter_config).train(train_set[:2])
        assert all(r.inner_losses == [] and r.grad_norm_inner is None for r in reports)

    def test_fast_weights_redrawn_per_step(self, small_config, adapter_config, trainer_config):
        trainer = BilevelTrainer(init_model(small_config), trainer_config, adapter_config)
        a1 = trainer.fresh_adapters(1).factors[(2, "up")][0].data
        a2 = trainer.fresh_adapters(2).factors[(2, "up")][0].data
        assert not np.array_equal(a1, a2)
        assert_array_equal(a1, trainer.fresh_adapters(1).factors[(2, "up")][0].data)
        assert adapter_seed(0, 1, 0) != adapter_seed(0, 1, 1)

    def test_training_lowers_the_loss(self, small_config, adapter_config, train_set):
        losses = run_losses(small_config, adapter_config, train_set, 32, mode=TrainingMode.FOCUSFT,
                            lr=3e-3, epochs=4)
        assert np.mean(losses[-8:]) < np.mean(losses[:8])

    def test_single_cosine_step_moves_the_weights(self, small_config, adapter_config, small_task):
        dataset, _ = make_splits(small_task, n_train=1, n_eval=0)
        config = TrainerConfig(mode=TrainingMode.STANDARD_SFT, inner_steps=0, warmup_fraction=0.0, epochs=1,
                               log_every=0)
        weights = init_model(small_config)
        before = [p.data.copy() for p in weights.parameters()]
        _, reports = BilevelTrainer(weights, config, adapter_config).train(dataset)
        assert reports[0].lr == config.lr
        assert any(not np.array_equal(b, p.data) for b, p in zip(before, weights.parameters()))

    def test_memorizes_a_single_sample(self, small_config, adapter_config, small_task):
        dataset, _ = make_splits(small_task, n_train=1, n_eval=0)
        config = TrainerConfig(mode=TrainingMode.STANDARD_SFT, inner_steps=0, lr=1e-2, schedule="constant",
                               warmup_fraction=0.0, weight_decay=0.0, epochs=60, log_every=0)
        weights, reports = BilevelTrainer(init_model(small_config), config, adapter_config).train(dataset)
        assert reports[-1].outer_loss < 0.5
        assert evaluate(weights, dataset).accuracy == 1.0

    def test_empty_dataset(self, small_config, adapter_config, trainer_config):
        with pytest.raises(TaskError):
            BilevelTrainer(init_model(small_config), trainer_config, adapter_config).train([])

    @pytest.mark.parametrize("mode, phase", [(TrainingMode.FOCUSFT, "inner"), (TrainingMode.STANDARD_SFT, "outer")])
    def test_non_finite_loss_aborts_and_saves(self, mode, phase, small_config, adapter_config, trainer_config,
                                              train_set, tmp_path, monkeypatch):
        weights = init_model(small_config)
        snapshot = weights.copy()
        monkeypatch.setattr(trainer_module, "objective", lambda *args, **kwargs: Tensor(np.nan))
        trainer = BilevelTrainer(weights, replace(trainer_config, mode=mode), adapter_config)
        with pytest.raises(StepAbortedError) as caught:
            trainer.train(train_set, checkpoint_dir=tmp_path)
        assert caught.value.step == 1
        assert caught.value.phase == phase
        store = CheckpointStore(tmp_path / "last")
        assert store.meta()["aborted"] is True
        for p, q in zip(store.load().parameters(), snapshot.parameters()):
            assert_array_equal(p.data, q.data)

    def test_periodic_checkpoints(self, small_config, adapter_config, trainer_config, train_set, tmp_path):
        config = replace(trainer_config, checkpoint_every=4)
        BilevelTrainer(init_model(small_config), config, adapter_config).train(train_set, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000004", "step_000008"]
        assert CheckpointStore(tmp_path / "step_000008").meta()["step"] == 8


class TestMetrics:
    def test_metrics_file_is_reproducible(self, small_config, adapter_config, trainer_config, train_set,
                                          tmp_path):
        for name in ("a", "b"):
            with MetricsWriter(tmp_path / name) as writer:
                BilevelTrainer(init_model(small_config), trainer_config, adapter_config).train(train_set, writer)
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        records = read_jsonl(tmp_path / "a" / "metrics.jsonl")
        assert len(records) == len(train_set)
        assert all(r["t_inner_ms"] is None and len(r["inner_losses"]) == 3 for r in records)
        assert len(read_jsonl(tmp_path / "a" / "timings.jsonl")) == len(train_set)

    def test_timings_opt_in(self, small_config, adapter_config, trainer_config, train_set, tmp_path):
        with MetricsWriter(tmp_path, log_timings=True) as writer:
            BilevelTrainer(init_model(small_config), trainer_config, adapter_config).train(train_set[:2], writer)
        assert all(r["t_outer_ms"] > 0 for r in read_jsonl(tmp_path / "metrics.jsonl"))


class TestEvaluation:
    def test_rescore_matches_accuracy(self, small_config, small_task, tmp_path):
        _, eval_set = make_splits(small_task)
        result = evaluate(init_model(small_config), eval_set)
        path = result.save_predictions(tmp_path / "predictions.csv")
        assert rescore_predictions(path) == pytest.approx(result.accuracy)
        assert len(result.records) == len(eval_set)

    def test_depth_report_has_every_bin(self, small_config, small_task):
        _, eval_set = make_splits(small_task)
        result = evaluate(init_model(small_config), eval_set)
        report = depth_report(result.records, 5)
        assert list(report["bin"]) == [0, 1, 2, 3, 4]
        assert report["n"].sum() == len(eval_set)

    def test_never_builds_the_focus_mask(self, small_config, small_task, monkeypatch):
        def forbidden(seg):
            raise AssertionError("evaluation must decode under the causal mask")

        monkeypatch.setattr(mask_module, "build_focusft_mask", forbidden)
        _, eval_set = make_splits(small_task)
        evaluate(init_model(small_config), eval_set)

    def test_missing_predictions_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            rescore_predictions(tmp_path / "nope.csv")


class TestInferenceAdapt:
    @pytest.fixture
    def agentic_sample(self):
        return generate(TaskConfig(kind=TaskKind.AGENTIC, seq_len=48, n_turns=3), seed=5)

    def test_zero_step_size_matches_base(self, small_config, adapter_config, trainer_config, agentic_sample):
        outcome = inference_adapt(init_model(small_config), agentic_sample, adapter_config,
                                  replace(trainer_config, eta_in=0.0))
        assert outcome.skipped is None
        assert outcome.adapted == outcome.base
        assert len(outcome.inner_losses) == 2

    def test_pseudo_response_precedes_the_answer(self, agentic_sample):
        targets = pseudo_response(agentic_sample)
        assert targets
        assert max(targets) < agentic_sample.answer_span[0]
        assert set(targets) <= set(agentic_sample.response_positions)

    def test_single_turn_sample_is_skipped(self, small_config, adapter_config, trainer_config, small_task):
        _, eval_set = make_splits(small_task)
        outcome = inference_adapt(init_model(small_config), eval_set[0], adapter_config, trainer_config)
        assert outcome.adapted is None
        assert "earlier assistant turn" in outcome.skipped

    def test_adapted_accuracy_covers_adapted_samples(self, small_config, adapter_config, trainer_config,
                                                     agentic_sample, small_task):
        _, eval_set = make_splits(small_task)
        result = evaluate_adapted(init_model(small_config), [agentic_sample] + eval_set[:2], adapter_config,
                                  trainer_config)
        assert result.adapted_accuracy in (0.0, 1.0)
        assert [r.adapt_skipped is None for r in result.records] == [True, False, False]
