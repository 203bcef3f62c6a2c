import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.masking.attention_mask import (CausalMaskBuilder, FocusMaskBuilder, Segmentation, TokenRole,
                                        build_causal_mask, build_focusft_mask, validate_mask)
from src.tensor_core.ops import MASK_VALUE
from src.utils.errors import DimensionError, TaskError


def random_segmentation(rng, max_length=40):
    """Alternating turns of random lengths, starting with either label."""
    length = int(rng.integers(1, max_length + 1))
    labels, turn_ids = [], []
    label = TokenRole.CONTEXT if rng.random() < 0.5 else TokenRole.RESPONSE
    turn = 0
    while len(labels) < length:
        width = min(int(rng.integers(1, 9)), length - len(labels))
        labels += [label] * width
        turn_ids += [turn] * width
        turn += 1
        label = TokenRole.RESPONSE if label is TokenRole.CONTEXT else TokenRole.CONTEXT
    return Segmentation(tuple(labels), tuple(turn_ids))


def oracle_visible(seg, i, j):
    context = seg.labels[i] is TokenRole.CONTEXT and seg.labels[j] is TokenRole.CONTEXT
    response = seg.labels[i] is TokenRole.RESPONSE and j <= i
    return context or response


@pytest.fixture
def five_tokens():
    """C = {0, 1, 2}, R = {3, 4}."""
    return Segmentation.from_string("CCCRR", [0, 0, 0, 1, 1])


class TestBuildFocusMask:
    def test_context_sees_future_context(self, five_tokens):
        assert build_focusft_mask(five_tokens)[0, 2] == 0.0

    def test_response_rows_are_causal(self, five_tokens):
        mask = build_focusft_mask(five_tokens)
        assert mask[3, 4] == MASK_VALUE
        assert mask[4, 1] == 0.0

    def test_context_never_sees_response(self, five_tokens):
        assert build_focusft_mask(five_tokens)[1, 3] == MASK_VALUE

    def test_context_does_not_see_earlier_response(self):
        seg = Segmentation.from_string("CRRC", [0, 1, 1, 2])
        mask = build_focusft_mask(seg)
        assert mask[3, 1] == MASK_VALUE
        assert mask[0, 3] == 0.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            seg = random_segmentation(rng)
            mask = build_focusft_mask(seg)
            for i in range(seg.length):
                for j in range(seg.length):
                    assert (mask[i, j] == 0.0) == oracle_visible(seg, i, j)
                    assert mask[i, j] in (0.0, MASK_VALUE)

    def test_response_rows_equal_causal_rows(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            seg = random_segmentation(rng)
            focus, causal = build_focusft_mask(seg), build_causal_mask(seg.length)
            rows = seg.response_positions
            assert_array_equal(focus[rows], causal[rows])
            assert np.all((focus == 0.0).sum(axis=1) >= 1)

    def test_pure_function_of_segmentation(self, five_tokens):
        assert_array_equal(build_focusft_mask(five_tokens), build_focusft_mask(five_tokens))

    def test_builders(self, five_tokens):
        assert_array_equal(FocusMaskBuilder().build(five_tokens), build_focusft_mask(five_tokens))
        assert_array_equal(CausalMaskBuilder().build(five_tokens), build_causal_mask(5))


class TestBuildCausalMask:
    def test_single_position(self):
        assert_array_equal(build_causal_mask(1), [[0.0]])

    def test_lower_triangle(self):
        mask = build_causal_mask(3)
        assert np.all(mask[np.tril_indices(3)] == 0.0)
        assert np.all(mask[np.triu_indices(3, 1)] == MASK_VALUE)

    def test_row_counts(self):
        mask = build_causal_mask(7)
        assert_array_equal((mask == 0.0).sum(axis=1), np.arange(1, 8))

    def test_empty(self):
        with pytest.raises(DimensionError):
            build_causal_mask(0)


class TestValidateMask:
    def test_round_trip_is_clean(self, five_tokens):
        assert validate_mask(build_focusft_mask(five_tokens), five_tokens) == []

    def test_causal_mask_misses_future_context(self, five_tokens):
        violations = validate_mask(build_causal_mask(5), five_tokens)
        assert violations
        assert any(v.i < v.j and v.j <= 2 for v in violations)

    def test_single_corrupted_cell(self, five_tokens):
        mask = build_focusft_mask(five_tokens)
        mask[4, 0] = MASK_VALUE
        violations = validate_mask(mask, five_tokens)
        assert len(violations) == 1
        assert (violations[0].i, violations[0].j, violations[0].expected, violations[0].found) == \
            (4, 0, 0.0, MASK_VALUE)

    def test_shape_mismatch(self, five_tokens):
        with pytest.raises(DimensionError):
            validate_mask(build_causal_mask(4), five_tokens)


class TestSegmentation:
    def test_positions(self, five_tokens):
        assert five_tokens.context_positions == [0, 1, 2]
        assert five_tokens.response_positions == [3, 4]
        assert five_tokens.turns() == [(0, TokenRole.CONTEXT, 0, 3), (1, TokenRole.RESPONSE, 3, 5)]

    def test_text_round_trip(self, five_tokens):
        text = five_tokens.to_text()
        assert text.splitlines()[3] == "3\tR\t1"
        assert Segmentation.from_text(text) == five_tokens

    def test_label_change_inside_turn(self):
        with pytest.raises(TaskError):
            Segmentation.from_string("CCR", [0, 0, 0]).validate()

    def test_decreasing_turn_ids(self):
        assert Segmentation.from_string("CCR", [1, 0, 2]).problems()
