import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.diagnostics.attention_metrics import (AttentionSummary, context_engagement, default_heatmap_layer,
                                               heatmap_export, positional_profile, read_heatmap_csv,
                                               region_budget, sink_mass, summarize)
from src.diagnostics.regions import Region, RegionMap, RegionTag
from src.masking.attention_mask import Segmentation, build_causal_mask
from src.models.transformer import AttentionTrace, forward
from src.tensor_core.tensor import no_grad
from src.utils.errors import ConfigError, TaskError


def uniform_trace(n_layers, n_heads, length):
    return AttentionTrace.from_array(np.full((n_layers, n_heads, length, length), 1.0 / length))


@pytest.fixture
def long_segmentation():
    """T = 100: 90 context positions followed by a 10-token response."""
    return Segmentation.from_string("C" * 90 + "R" * 10, [0] * 90 + [1] * 10)


class TestSinkMass:
    def test_all_mass_on_first_key(self, tiny_segmentation):
        maps = np.zeros((2, 2, 12, 12))
        maps[..., 0] = 1.0
        per_layer, mean = sink_mass(AttentionTrace.from_array(maps), tiny_segmentation, w=1)
        assert per_layer == [1.0, 1.0]
        assert mean == 1.0

    def test_uniform_rows(self, long_segmentation):
        _, mean = sink_mass(uniform_trace(2, 4, 100), long_segmentation, w=5)
        assert mean == pytest.approx(0.05)

    def test_mean_is_unweighted_over_layers(self, tiny_segmentation):
        maps = np.full((2, 1, 12, 12), 1.0 / 12)
        maps[1] = 0.0
        maps[1, ..., 0] = 1.0
        per_layer, mean = sink_mass(AttentionTrace.from_array(maps), tiny_segmentation, w=3)
        assert per_layer == pytest.approx([0.25, 1.0])
        assert mean == pytest.approx(0.625)

    def test_only_response_rows_count(self, tiny_segmentation):
        maps = np.zeros((1, 1, 12, 12))
        maps[..., 11] = 1.0
        maps[0, 0, tiny_segmentation.response_positions] = 0.0
        maps[0, 0, tiny_segmentation.response_positions, 0] = 1.0
        assert sink_mass(AttentionTrace.from_array(maps), tiny_segmentation, w=1)[1] == 1.0
        assert sink_mass(AttentionTrace.from_array(maps), tiny_segmentation, w=1, all_queries=True)[1] == \
            pytest.approx(3 / 12)

    def test_empty_response_set(self):
        seg = Segmentation.from_string("CCC", [0, 0, 0])
        with pytest.raises(TaskError):
            sink_mass(uniform_trace(1, 1, 3), seg)

    def test_empty_trace(self, tiny_segmentation):
        with pytest.raises(TaskError):
            sink_mass(AttentionTrace(), tiny_segmentation)


class TestRegionBudget:
    def test_region_share_under_uniform_attention(self, long_segmentation):
        regions = RegionMap((Region(RegionTag.TOOL_RESPONSE, 10, 35),), length=100)
        budget = region_budget(uniform_trace(1, 2, 100), regions, long_segmentation)
        assert budget[RegionTag.TOOL_RESPONSE.value] == pytest.approx(0.25)
        assert budget[RegionTag.FILLER.value] == pytest.approx(0.75)

    def test_budget_sums_to_one(self, long_segmentation):
        regions = RegionMap((Region(RegionTag.SINK_WINDOW, 0, 5), Region(RegionTag.SYSTEM_USER, 5, 20),
                             Region(RegionTag.TOOL_RESPONSE, 20, 90),
                             Region(RegionTag.ASSISTANT_RESPONSE, 90, 100)), length=100)
        rng = np.random.default_rng(0)
        maps = rng.random((2, 2, 100, 100))
        maps /= maps.sum(axis=-1, keepdims=True)
        budget = region_budget(AttentionTrace.from_array(maps), regions, long_segmentation)
        assert sum(budget.values()) == pytest.approx(1.0)

    def test_overlapping_regions(self, long_segmentation):
        regions = RegionMap((Region(RegionTag.SYSTEM_USER, 5, 20), Region(RegionTag.TOOL_RESPONSE, 15, 30)),
                            length=100)
        with pytest.raises(ConfigError):
            region_budget(uniform_trace(1, 1, 100), regions, long_segmentation)

    def test_misplaced_sink_window(self):
        with pytest.raises(ConfigError):
            RegionMap((Region(RegionTag.SINK_WINDOW, 1, 6),), length=100, sink_window=5).validate()

    def test_context_engagement(self):
        budget = {"SinkWindow": 0.5, "SystemUser": 0.27, "ToolResponse": 0.143, "AssistantResponse": 0.087}
        assert context_engagement(budget) == pytest.approx(0.413)

    def test_engagement_needs_context_regions(self):
        with pytest.raises(TaskError):
            context_engagement({"SinkWindow": 1.0})


class TestBlockOracle:
    """Response rows split evenly between a uniform context block [0, 90) and a uniform response block [90, 100)."""

    @pytest.fixture
    def block_trace(self):
        maps = np.zeros((2, 3, 100, 100))
        maps[..., :90] = 0.5 / 90
        maps[..., 90:] = 0.5 / 10
        return AttentionTrace.from_array(maps)

    @pytest.fixture
    def regions(self):
        return RegionMap((Region(RegionTag.SINK_WINDOW, 0, 5), Region(RegionTag.SYSTEM_USER, 5, 20),
                          Region(RegionTag.TOOL_RESPONSE, 20, 90),
                          Region(RegionTag.ASSISTANT_RESPONSE, 90, 100)), length=100)

    def test_sink_mass(self, block_trace, long_segmentation):
        per_layer, mean = sink_mass(block_trace, long_segmentation, w=5)
        assert_allclose(per_layer, [0.5 * 5 / 90] * 2, atol=1e-9)
        assert abs(mean - 0.5 * 5 / 90) < 1e-9

    def test_region_budget_and_engagement(self, block_trace, regions, long_segmentation):
        budget = region_budget(block_trace, regions, long_segmentation)
        expected = {"SinkWindow": 0.5 * 5 / 90, "SystemUser": 0.5 * 15 / 90, "ToolResponse": 0.5 * 70 / 90,
                    "AssistantResponse": 0.5, "Filler": 0.0}
        assert budget.keys() == expected.keys()
        for tag, share in expected.items():
            assert abs(budget[tag] - share) < 1e-9, tag
        assert abs(context_engagement(budget) - 0.5 * 85 / 90) < 1e-9

    def test_positional_profile(self, block_trace, long_segmentation):
        expected = np.concatenate([np.full(90, 0.5 / 90), np.full(10, 0.05)])
        assert_allclose(positional_profile(block_trace, long_segmentation), expected, atol=1e-9)


class TestPositionalProfile:
    def test_sums_to_one(self, tiny_model, tiny_tokens, tiny_segmentation):
        trace = AttentionTrace()
        with no_grad():
            forward(tiny_model, tiny_tokens, build_causal_mask(12), trace=trace)
        profile = positional_profile(trace, tiny_segmentation)
        assert profile.shape == (12,)
        assert profile.sum() == pytest.approx(1.0)

    def test_uniform(self, long_segmentation):
        assert_allclose(positional_profile(uniform_trace(1, 1, 100), long_segmentation), np.full(100, 0.01))


class TestExports:
    def test_heatmap_round_trip(self, tiny_model, tiny_tokens, tmp_path):
        trace = AttentionTrace()
        with no_grad():
            forward(tiny_model, tiny_tokens, build_causal_mask(12), trace=trace)
        csv_path, svg_path = heatmap_export(trace, 1, tmp_path / "heatmap_causal")
        matrix = read_heatmap_csv(csv_path)
        assert_allclose(matrix, trace.layer(1).mean(axis=0), atol=1e-9)
        assert np.all(matrix[np.triu_indices(12, 1)] == 0.0)
        assert svg_path.suffix == ".svg" and svg_path.stat().st_size > 0

    def test_summary_round_trip(self, tiny_segmentation, tmp_path):
        regions = RegionMap.from_turns([(RegionTag.SYSTEM_USER, 0, 7), (RegionTag.ASSISTANT_RESPONSE, 7, 10),
                                        (RegionTag.TOOL_RESPONSE, 10, 12)], length=12, sink_window=2)
        summary = summarize(uniform_trace(2, 2, 12), tiny_segmentation, regions, w=2)
        assert summary.layer_count == 2
        assert summary.context_engagement == pytest.approx(7 / 12)
        loaded = AttentionSummary.load(summary.save(tmp_path / "summary_causal.json"))
        assert loaded == summary

    @pytest.mark.parametrize("n_layers, expected", [(1, 0), (2, 1), (4, 2), (5, 3), (28, 14)])
    def test_default_heatmap_layer(self, n_layers, expected):
        assert default_heatmap_layer(n_layers) == expected
