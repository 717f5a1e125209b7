#!/usr/bin/env python3
"""Tests for metrics.py"""
import pytest

from lstransducer.errors import ContractError, DataError
from lstransducer.metrics import EvalResult, edit_distance, evaluate, token_error_rate


class TestEditDistance:
    """Test the Levenshtein distance over token ids."""

    def test_identical(self):
        assert edit_distance([3, 4, 5], [3, 4, 5]) == 0

    def test_single_operations(self):
        assert edit_distance([3, 4, 5], [3, 5]) == 1
        assert edit_distance([3, 5], [3, 4, 5]) == 1
        assert edit_distance([3, 4, 5], [3, 6, 5]) == 1

    def test_empty_sides(self):
        assert edit_distance([], [3, 4]) == 2
        assert edit_distance([3, 4, 5], []) == 3
        assert edit_distance([], []) == 0

    def test_symmetric(self):
        a, b = [3, 4, 4, 5, 6], [4, 3, 5, 6, 6, 7]
        assert edit_distance(a, b) == edit_distance(b, a) == 4


class TestTokenErrorRate:
    """Test corpus-level scoring."""

    def test_micro_average(self):
        result = token_error_rate([([3, 4], [3, 4]), ([3, 4, 5, 6], [3])])
        assert result.errors == 3
        assert result.ref_tokens == 6
        assert result.token_error_rate == pytest.approx(0.5)

    def test_empty_reference_total(self):
        assert EvalResult(errors=0, ref_tokens=0, utterances=0).token_error_rate == 0.0

    def test_missing_hypothesis_is_empty_output(self):
        result = evaluate({"a": [3, 4], "b": [5]}, {"a": [3, 4]})
        assert result.missing == 1
        assert result.errors == 1
        assert result.utterances == 2

    def test_perfect_hypotheses(self):
        refs = {"a": [3, 4], "b": [5, 6, 7]}
        assert evaluate(refs, dict(refs)).token_error_rate == 0.0

    def test_unknown_hypothesis_id(self):
        with pytest.raises(DataError, match="unknown utterances"):
            evaluate({"a": [3]}, {"a": [3], "z": [4]})

    def test_no_references(self):
        with pytest.raises(ContractError):
            evaluate({}, {})
