#!/usr/bin/env python3
"""
Tests for alignment.py

Worked CIF and AIF examples, parallel/sequential equality, causality of the
boundaries and the quantity loss.
"""
import numpy as np
import pytest

from lstransducer.alignment import (
    aif_boundaries,
    aif_extract,
    boundary_from_cumsum,
    cif_integrate,
    cif_scale,
    frame_weights,
    full_fire_count,
    plan_alignment,
    quantity_loss,
)
from lstransducer.autodiff import Value, backward, sum_all
from lstransducer.errors import ContractError, DegenerateAlignmentError, DimensionError
from lstransducer.nn_blocks import EncoderOutput

CIF_WEIGHTS = np.array([0.2, 0.9, 0.2, 0.3, 0.6, 0.1])


def _col(values):
    return Value(np.asarray(values, dtype=np.float64).reshape(-1, 1))


class TestFrameWeights:
    """Test the sigmoid weight channels."""

    def test_channels(self):
        E = np.random.default_rng(0).normal(size=(5, 6))
        alpha, w = frame_weights(EncoderOutput(Value(E)))
        np.testing.assert_allclose(alpha.data[:, 0], 1.0 / (1.0 + np.exp(-E[:, -1])), atol=1e-15)
        np.testing.assert_allclose(w.data[:, 0], 1.0 / (1.0 + np.exp(-E[:, -2])), atol=1e-15)

    def test_sum_gradient_is_sigmoid_derivative(self):
        E = Value(np.random.default_rng(1).normal(size=(4, 6)))
        alpha, _ = frame_weights(EncoderOutput(E))
        backward(sum_all(alpha))
        a = alpha.data[:, 0]
        np.testing.assert_allclose(E.grad[:, -1], a * (1.0 - a), atol=1e-15)
        np.testing.assert_array_equal(E.grad[:, :-1], 0.0)

    def test_needs_four_columns(self):
        with pytest.raises(ContractError, match="d >= 4"):
            frame_weights(EncoderOutput(Value(np.zeros((3, 3)))))


class TestCif:
    """Test integrate-and-fire."""

    def test_worked_example(self):
        """Weights 0.2 0.9 0.2 0.3 0.6 0.1 fire two labels with the documented mixtures."""
        e = np.random.default_rng(0).normal(size=(6, 3))
        out = cif_integrate(Value(e), _col(CIF_WEIGHTS), mode="train")
        assert out.L == 2
        c1 = 0.2 * e[0] + 0.8 * e[1]
        c2 = 0.1 * e[1] + 0.2 * e[2] + 0.3 * e[3] + 0.4 * e[4]
        np.testing.assert_allclose(out.C.data[0], c1, atol=1e-12)
        np.testing.assert_allclose(out.C.data[1], c2, atol=1e-12)

    def test_decode_mode_fires_tail(self):
        e = np.random.default_rng(1).normal(size=(6, 3))
        out = cif_integrate(Value(e), _col(CIF_WEIGHTS), mode="decode", keep_weights=True)
        assert out.L == 3
        np.testing.assert_allclose(out.C.data[2], 0.2 * e[4] + 0.1 * e[5], atol=1e-12)
        np.testing.assert_allclose(out.attn.sum(axis=0), CIF_WEIGHTS, atol=1e-12)

    def test_scale(self):
        scaled = cif_scale(_col(CIF_WEIGHTS), 2)
        assert scaled.data.sum() == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(scaled.data[:, 0], CIF_WEIGHTS * 2.0 / 2.3, atol=1e-12)

    def test_scaled_weights_fire_exactly_l(self):
        alpha = np.random.default_rng(2).uniform(0.05, 0.9, size=9)
        scaled = cif_scale(_col(alpha), 4)
        e = np.random.default_rng(3).normal(size=(9, 2))
        assert cif_integrate(Value(e), scaled, mode="train").L == 4
        assert full_fire_count(scaled.data) == 4

    def test_random_fire_counts(self):
        """Training mode fires floor(sum alpha) labels, decode mode also fires the tail."""
        rng = np.random.default_rng(8)
        for _ in range(200):
            T = int(rng.integers(1, 20))
            alpha = rng.uniform(0.0, 1.0, size=T)
            e = rng.normal(size=(T, 2))
            total = float(alpha.sum())
            assert cif_integrate(Value(e), _col(alpha), mode="train").L == int(np.floor(total))
            assert cif_integrate(Value(e), _col(alpha), mode="decode").L == int(np.ceil(total))
            assert full_fire_count(alpha) == int(np.floor(total))

    def test_scale_zero_mass(self):
        with pytest.raises(DegenerateAlignmentError):
            cif_scale(_col([0.0, 0.0]), 1)

    def test_integration_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(6, 2))
        proj = rng.normal(size=(2, 2))

        def loss(weights):
            out = cif_integrate(Value(e), _col(weights), mode="train")
            return float((out.C.data * proj).sum())

        alpha = _col(CIF_WEIGHTS)
        out = cif_integrate(Value(e), alpha, mode="train")
        backward(sum_all(out.C * Value(proj)))
        h = 1e-7
        for t in range(6):
            up, down = CIF_WEIGHTS.copy(), CIF_WEIGHTS.copy()
            up[t] += h
            down[t] -= h
            numeric = (loss(up) - loss(down)) / (2 * h)
            assert alpha.grad[t, 0] == pytest.approx(numeric, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cif_integrate(Value(np.zeros((4, 2))), _col([0.5, 0.5]))


class TestAifBoundaries:
    """Test boundary placement from prefix sums."""

    def test_worked_example(self):
        assert aif_boundaries([0.4, 0.4, 0.4], 2) == [2, 3]

    def test_equality_does_not_fire(self):
        assert aif_boundaries([0.5, 0.5, 0.5], 1) == [2]

    def test_long_trace(self):
        """Prefix sums first exceed 1 at frame 5 and 2 at frame 11."""
        alpha = [0.2, 0.2, 0.2, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.5, 0.1]
        assert aif_boundaries(alpha, 2) == [4, 10]

    def test_unresolved_boundary(self):
        cumsum = np.cumsum([0.4, 0.4])
        assert boundary_from_cumsum(cumsum, 1) is None
        assert boundary_from_cumsum(np.cumsum([0.4, 0.4, 0.4]), 1) == 2

    def test_needs_a_label(self):
        with pytest.raises(ContractError):
            aif_boundaries([0.5], 0)

    def test_random_boundaries_fire_on_strict_exceedance(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            T = int(rng.integers(1, 30))
            alpha = rng.uniform(0.0, 1.0, size=T)
            L = int(rng.integers(1, 12))
            cumsum = np.cumsum(alpha)
            bounds = aif_boundaries(alpha, L)
            assert bounds == sorted(bounds)
            for j, b in enumerate(bounds, start=1):
                if b < T:
                    assert cumsum[b] > j
                else:
                    assert cumsum[-1] <= j
                assert b == 0 or cumsum[b - 1] <= j

    def test_plan(self):
        alpha = [0.4, 0.4, 0.4]
        plan = plan_alignment(_col(alpha), _col([0.5, 0.9, 0.2]), 2)
        assert plan.T == 3
        assert plan.boundaries == [2, 3]
        assert plan.total == pytest.approx(1.2, abs=1e-15)
        np.testing.assert_array_equal(plan.cumsum, np.cumsum(alpha))


class TestAifExtract:
    """Test attention extraction."""

    def _inputs(self, seed=0, T=8, L=3, dq=4):
        rng = np.random.default_rng(seed)
        return Value(rng.normal(size=(T, dq))), Value(rng.normal(size=(L, dq)))

    def test_parallel_equals_sequential(self):
        values, queries = self._inputs()
        bounds = [2, 5, 8]
        par = aif_extract(values, queries, bounds, mode="parallel", keep_attn=True)
        seq = aif_extract(values, queries, bounds, mode="sequential", keep_attn=True)
        assert par.C.data.tobytes() == seq.C.data.tobytes()
        np.testing.assert_array_equal(par.attn, seq.attn)

    def test_attention_stays_inside_boundary(self):
        values, queries = self._inputs(seed=1)
        out = aif_extract(values, queries, [1, 4, 6], keep_attn=True)
        for j, b in enumerate([1, 4, 6]):
            np.testing.assert_array_equal(out.attn[j, b:], 0.0)
            assert out.attn[j, :b].sum() == pytest.approx(1.0, abs=1e-12)

    def test_frames_after_boundary_do_not_matter(self):
        values, queries = self._inputs(seed=2)
        changed = values.data.copy()
        changed[5:] += 3.0
        a = aif_extract(values, queries, [2, 5, 5]).C.data
        b = aif_extract(Value(changed), queries, [2, 5, 5]).C.data
        assert a.tobytes() == b.tobytes()

    def test_zero_boundary_clamped_to_first_frame(self):
        values, queries = self._inputs(seed=3, L=1)
        out = aif_extract(values, queries, [0])
        np.testing.assert_allclose(out.C.data[0], values.data[0], atol=1e-12)

    def test_boundary_beyond_frames(self):
        values, queries = self._inputs(L=1)
        with pytest.raises(ContractError, match="outside"):
            aif_extract(values, queries, [9])

    def test_query_width_mismatch(self):
        values, _ = self._inputs()
        with pytest.raises(DimensionError):
            aif_extract(values, Value(np.zeros((1, 3))), [2])


class TestQuantityLoss:
    """Test the count loss."""

    def test_value(self):
        alpha = _col(CIF_WEIGHTS)
        w = _col([1.0, 1.0, 1.0, 1.0, 1.0])
        assert quantity_loss(alpha, w, 2, 5).item() == pytest.approx(0.3, abs=1e-12)

    def test_gradient_is_sign(self):
        alpha = _col(CIF_WEIGHTS)
        w = _col([1.0, 1.0])
        backward(quantity_loss(alpha, w, 3, 1))
        np.testing.assert_array_equal(alpha.grad, -1.0)
        np.testing.assert_array_equal(w.grad, 1.0)

    def test_needs_positive_counts(self):
        with pytest.raises(ContractError):
            quantity_loss(_col([0.5]), _col([0.5]), 0, 1)
