import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.configs import AdapterConfig, ModelConfig
from src.fastweights.adapters import adapter_delta, dump_adapters, init_adapters, reset, select_layers
from src.masking.attention_mask import build_causal_mask
from src.models.checkpoint import CheckpointStore
from src.models.transformer import forward, init_model, response_cross_entropy
from src.tensor_core.optim import SGD, OptimizerState, optimizer_apply
from src.tensor_core.tensor import Tensor, backward, no_grad, tape_scope
from src.utils.errors import ConfigError, UsageError


class TestSelectLayers:
    def test_top_fraction_of_deep_stack(self):
        assert select_layers(28, 0.35) == list(range(18, 28))

    def test_half(self):
        assert select_layers(4, 0.5) == [2, 3]

    def test_all_layers(self):
        assert select_layers(6, 1.0) == list(range(6))

    def test_single_layer_model(self):
        assert select_layers(1, 0.5) == [0]

    @pytest.mark.parametrize("n_layers, fraction", [(0, 0.5), (4, 0.1)])
    def test_selects_nothing(self, n_layers, fraction):
        with pytest.raises(ConfigError):
            select_layers(n_layers, fraction)


class TestInitAdapters:
    def test_hooks_cover_selected_ffn_matrices(self, tiny_config, adapter_config):
        adapters = init_adapters(adapter_config, tiny_config)
        assert adapters.hooks == [(1, "down"), (1, "up")]
        a, b = adapters.factors[(1, "up")]
        assert a.shape == (4, 16) and b.shape == (32, 4)
        assert adapters.scaling == pytest.approx(2.0)

    def test_fresh_set_has_zero_delta(self, tiny_config, adapter_config, rng):
        adapters = init_adapters(adapter_config, tiny_config)
        x = Tensor(rng.normal(size=(5, 16)))
        with no_grad():
            delta = adapter_delta(adapters, 1, "up", x)
        assert_array_equal(delta.data, np.zeros((5, 32)))

    def test_same_seed_same_draw(self, tiny_config, adapter_config):
        first = init_adapters(adapter_config, tiny_config, seed=11)
        second = init_adapters(adapter_config, tiny_config, seed=11)
        other = init_adapters(adapter_config, tiny_config, seed=12)
        assert_array_equal(first.factors[(1, "up")][0].data, second.factors[(1, "up")][0].data)
        assert not np.array_equal(first.factors[(1, "up")][0].data, other.factors[(1, "up")][0].data)

    def test_rank_larger_than_matrix(self, tiny_config):
        with pytest.raises(ConfigError):
            init_adapters(AdapterConfig(rank=64, alpha=64.0), tiny_config)

    def test_gated_ffn_hooks_three_matrices(self, adapter_config):
        config = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=16, max_seq_len=16,
                             ffn_kind="gated")
        assert init_adapters(adapter_config, config).hooks == [(1, "down"), (1, "gate"), (1, "up")]

    def test_fraction_of_base_parameters(self, small_config):
        weights = init_model(small_config)
        adapters = init_adapters(AdapterConfig(rank=4, alpha=8.0, layer_fraction=0.5), small_config)
        assert adapters.num_parameters() < 0.1 * weights.num_parameters()


class TestAdapterDelta:
    def test_one_sgd_step_moves_the_output(self, tiny_model, tiny_config, adapter_config, tiny_tokens):
        adapters = init_adapters(adapter_config, tiny_config)
        mask = build_causal_mask(len(tiny_tokens))
        with no_grad():
            before = forward(tiny_model, tiny_tokens, mask, adapters=adapters).data
        with tiny_model.frozen():
            with tape_scope():
                loss = response_cross_entropy(forward(tiny_model, tiny_tokens, mask, adapters=adapters),
                                              tiny_tokens, {8, 9, 10})
                backward(loss)
        _, b = adapters.factors[(1, "up")]
        assert np.any(b.grad != 0.0)
        optimizer_apply(OptimizerState(kind=SGD, lr=0.1), adapters.parameters())
        with no_grad():
            after = forward(tiny_model, tiny_tokens, mask, adapters=adapters).data
        assert not np.allclose(before, after)
        assert all(p.grad is None for p in tiny_model.parameters())

    def test_matches_dense_delta(self, tiny_config, adapter_config, rng):
        adapters = init_adapters(adapter_config, tiny_config)
        for _, b in adapters.factors.values():
            b.data = rng.normal(size=b.shape)
        x = rng.normal(size=(6, 32))
        with no_grad():
            delta = adapter_delta(adapters, 1, "down", Tensor(x)).data
        assert_allclose(delta, x @ adapters.dense_delta(1, "down"), atol=1e-12)

    def test_exact_factorization_reproduces_target(self, rng):
        config = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, vocab_size=8, max_seq_len=8)
        adapters = init_adapters(AdapterConfig(rank=4, alpha=4.0, layer_fraction=1.0,
                                               target_matrices=("up",)), config)
        target = rng.normal(size=(4, 4))
        a, b = adapters.factors[(0, "up")]
        a.data = np.eye(4)
        b.data = target.T
        assert_allclose(adapters.dense_delta(0, "up"), target, atol=1e-12)

    def test_unregistered_hook(self, tiny_config, adapter_config):
        adapters = init_adapters(adapter_config, tiny_config)
        with pytest.raises(UsageError):
            adapter_delta(adapters, 0, "up", Tensor(np.zeros((2, 16))))


class TestLifecycle:
    def test_reset_discards_learned_delta(self, tiny_config, adapter_config, rng):
        adapters = init_adapters(adapter_config, tiny_config, seed=5)
        for _, b in adapters.factors.values():
            b.data = rng.normal(size=b.shape)
        fresh = reset(adapters, adapter_config, tiny_config, seed=5)
        assert not adapters.factors
        assert_array_equal(fresh.dense_delta(1, "up"), np.zeros((16, 32)))
        assert_array_equal(fresh.factors[(1, "up")][0].data,
                           init_adapters(adapter_config, tiny_config, seed=5).factors[(1, "up")][0].data)

    def test_detached_copy_is_constant(self, tiny_config, adapter_config):
        adapters = init_adapters(adapter_config, tiny_config)
        frozen = adapters.detached()
        assert not any(p.requires_grad for p in frozen.parameters())
        assert all(p.requires_grad for p in adapters.parameters())
        assert frozen.hooks == adapters.hooks

    def test_dump_uses_checkpoint_format(self, tiny_config, adapter_config, tmp_path):
        adapters = init_adapters(adapter_config, tiny_config)
        dump_adapters(adapters, tmp_path / "phi")
        arrays, meta = CheckpointStore(tmp_path / "phi").load_arrays()
        assert meta["kind"] == "adapters"
        assert sorted(arrays) == sorted(name for name, _ in adapters.named_parameters())
        assert_array_equal(arrays["layers.1.up.A"], adapters.factors[(1, "up")][0].data)
