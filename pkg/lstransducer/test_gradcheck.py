#!/usr/bin/env python3
"""Tests for gradcheck.py"""
import numpy as np
import pytest

from lstransducer.config import TrainConfig
from lstransducer.gradcheck import (
    GradCheckEntry,
    GradCheckReport,
    check_composition,
    check_lst_loss,
    check_primitives,
    numeric_gradient,
    relative_error,
    run_suite,
)


class TestHelpers:
    """Test the finite-difference helpers."""

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-4)

    def test_relative_error_is_entrywise(self):
        """A small entry with a large relative gap is not hidden by large neighbours."""
        a = np.array([100.0, 1e-3])
        b = np.array([100.0, 2e-3])
        assert relative_error(a, b) == pytest.approx(0.5)

    def test_weighted_numeric_gradient(self):
        x = np.array([[0.3, -0.7]])
        w = np.array([[2.0, -1.0]])
        grad = numeric_gradient(lambda: np.sin(x), x, 1e-3, weights=w)
        np.testing.assert_allclose(grad, w * np.cos(x), rtol=1e-10)

    def test_numeric_gradient_of_quadratic(self):
        x = np.array([[1.0, -2.0, 0.5]])
        grad = numeric_gradient(lambda: float((x ** 2).sum()), x, 1e-6)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-8)
        np.testing.assert_array_equal(x, [[1.0, -2.0, 0.5]])

    def test_report_from_entries(self):
        entries = [GradCheckEntry("a", 1.0, 1.0, 1e-9), GradCheckEntry("b", 1.0, 1.1, 0.1)]
        report = GradCheckReport.from_entries(entries, 1e-4)
        assert report.max_rel_error == 0.1
        assert report.passed is False
        assert report.worst().name == "b"
        assert GradCheckReport.from_entries([], 1e-4).passed is False


class TestSuites:
    """Test the primitive and loss checks."""

    def test_primitives_pass(self):
        report = check_primitives(seed=0)
        assert report.passed, report.worst()
        assert report.max_rel_error < 1e-5
        assert len(report.entries) >= 27

    def test_loss_check_passes(self, tiny_model, tiny_data):
        report = check_lst_loss(tiny_model, tiny_data[0], TrainConfig(), n_params=10)
        assert len(report.entries) == 10
        assert report.passed, report.worst()

    def test_loss_check_covers_the_weight_column(self, tiny_model, tiny_data):
        report = check_lst_loss(tiny_model, tiny_data[1], TrainConfig(), n_params=10)
        names = [e.name for e in report.entries]
        assert any(n.startswith("enc.out.") for n in names)
        assert any(n.startswith("joint.") for n in names)

    def test_loss_check_leaves_model_unchanged(self, tiny_model, tiny_data):
        before = {p: tiny_model.params[p].data.copy() for p in tiny_model.params.paths()}
        check_lst_loss(tiny_model, tiny_data[0], TrainConfig(), n_params=5)
        for p, arr in before.items():
            assert tiny_model.params[p].data.tobytes() == arr.tobytes()

    def test_primitives_pass_over_many_seeds(self):
        worst = max((check_primitives(seed=s) for s in range(100)), key=lambda r: r.max_rel_error)
        assert worst.max_rel_error < 1e-5, worst.worst()

    def test_composition_passes_over_many_seeds(self):
        for seed in range(100):
            report = check_composition(seed=seed)
            assert len(report.entries) == 5
            assert report.passed, (seed, report.worst())

    def test_suite_reports_every_stage(self, tiny_model, tiny_data):
        reports = run_suite(tiny_model, tiny_data[:1], TrainConfig(), seed=0, n_params=4)
        assert [name for name, _ in reports] == ["primitives", "composition", tiny_data[0].utt_id]
        assert all(report.passed for _, report in reports)
