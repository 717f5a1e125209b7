#!/usr/bin/env python3
"""
Central finite-difference checks for the autodiff primitives and the training loss.

Every check compares gradients entry by entry:

    rel = max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)

Primitive and composition gradients use a fourth-order central stencil taken on
the output arrays, so outputs a perturbation does not touch cancel exactly.

The loss check compares single parameter entries, each with an analytic
gradient of at least LOSS_CHECK_MIN_GRAD so round-off cannot dominate the ratio.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Value,
    absolute,
    add,
    add_scalar,
    backward,
    concat,
    constant,
    cross_entropy,
    div,
    embedding,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mean_all,
    mul,
    ordered_matmul,
    relu,
    row_softmax,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    sub,
    sum_all,
    sum_axis,
    tanh,
    transpose,
)
from .config import TrainConfig
from .constants import (
    LOSS_CHECK_MIN_GRAD,
    LOSS_CHECK_PARAMS,
    LOSS_FD_STEP,
    LOSS_REL_TOLERANCE,
    PRIMITIVE_FD_STEP,
    PRIMITIVE_REL_TOLERANCE,
    REL_ERROR_FLOOR,
)
from .dataset import Utterance
from .nn_blocks import LSTransducerModel
from .seeding import named_rng
from .training import lst_loss

logger = logging.getLogger(__name__)

# Parameter groups the loss check draws from, in round-robin order
LOSS_CHECK_GROUPS = ("enc.layer", "enc.out.weight", "aif.proj", "pred.", "joint.")


@dataclass
class GradCheckEntry:
    name: str
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """
    Outcome of one finite-difference suite.

    Attributes:
        max_rel_error: Worst relative error over all entries
        entries: One record per checked primitive or parameter entry
        tolerance: Threshold the suite was judged against
        passed: max_rel_error < tolerance (and at least one entry checked)
    """
    max_rel_error: float
    entries: List[GradCheckEntry] = field(default_factory=list)
    tolerance: float = PRIMITIVE_REL_TOLERANCE
    passed: bool = False

    @classmethod
    def from_entries(cls, entries: List[GradCheckEntry], tolerance: float) -> "GradCheckReport":
        worst = max((e.rel_error for e in entries), default=float("inf"))
        return cls(max_rel_error=worst, entries=entries, tolerance=tolerance,
                   passed=bool(entries) and worst < tolerance)

    def worst(self) -> Optional[GradCheckEntry]:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.rel_error)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_ERROR_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(f: Callable[[], np.ndarray], x: np.ndarray, h: float,
                     weights: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Fourth-order central differences of f with respect to every entry of x.

    x is perturbed in place and restored. When weights is given, f returns an
    array and the gradient is that of sum(weights * f()).
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        taps = []
        for step in (2.0 * h, h, -h, -2.0 * h):
            x[idx] = orig + step
            taps.append(np.asarray(f(), dtype=np.float64))
        x[idx] = orig
        up2, up1, down1, down2 = taps
        d = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * h)
        grad[idx] = float(np.sum(d if weights is None else weights * d))
    return grad


# ==============================================================================
# PRIMITIVES
# ==============================================================================

def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[..., Value], List[np.ndarray]]]:
    n = lambda *shape: rng.normal(size=shape)
    mask = rng.random((3, 4)) < 0.4
    return [
        ("matmul", lambda a, b: matmul(a, b), [n(3, 4), n(4, 2)]),
        ("ordered_matmul", lambda a, b: ordered_matmul(a, b), [n(3, 4), n(4, 2)]),
        ("transpose", lambda a: transpose(a), [n(3, 4)]),
        ("add", lambda a, b: add(a, b), [n(3, 4), n(1, 4)]),
        ("sub", lambda a, b: sub(a, b), [n(3, 4), n(3, 1)]),
        ("mul", lambda a, b: mul(a, b), [n(3, 4), n(3, 4)]),
        ("div", lambda a, b: div(a, b), [n(3, 4), 1.0 + rng.random((1, 1))]),
        ("scale", lambda a: scale(a, 1.7), [n(3, 4)]),
        ("add_scalar", lambda a: add_scalar(a, -0.3), [n(3, 4)]),
        ("sigmoid", lambda a: sigmoid(a), [n(3, 4)]),
        ("tanh", lambda a: tanh(a), [n(3, 4)]),
        ("relu", lambda a: relu(a), [_away_from_zero(rng, (3, 4))]),
        ("absolute", lambda a: absolute(a), [_away_from_zero(rng, (3, 4))]),
        ("embedding", lambda t: embedding(t, [0, 2, 2, 4]), [n(5, 3)]),
        ("concat", lambda a, b: concat([a, b], axis=1), [n(3, 2), n(3, 3)]),
        ("slice_cols", lambda a: slice_cols(a, 1, 3), [n(3, 4)]),
        ("slice_rows", lambda a: slice_rows(a, 1, 3), [n(3, 4)]),
        ("layer_norm", lambda x, g, b: layer_norm(x, g, b), [n(3, 5), 1.0 + 0.1 * n(1, 5), n(1, 5)]),
        ("row_softmax", lambda a: row_softmax(a), [n(3, 5)]),
        ("row_softmax_ordered", lambda a: row_softmax(a, ordered=True), [n(3, 5)]),
        ("log_softmax", lambda a: log_softmax(a), [n(3, 5)]),
        ("cross_entropy", lambda a: cross_entropy(a, [0, 4, 2]), [n(3, 5)]),
        ("sum_all", lambda a: sum_all(a), [n(3, 4)]),
        ("mean_all", lambda a: mean_all(a), [n(3, 4)]),
        ("sum_axis0", lambda a: sum_axis(a, 0), [n(3, 4)]),
        ("sum_axis1", lambda a: sum_axis(a, 1), [n(3, 4)]),
        ("masked_fill", lambda a: masked_fill(a, mask, -3.0), [n(3, 4)]),
    ]


def _check_case(name: str, build: Callable[..., Value], arrays: Sequence[np.ndarray],
                rng: np.random.Generator, h: float) -> List[GradCheckEntry]:
    inputs = [Value(np.array(a, dtype=np.float64)) for a in arrays]
    out = build(*inputs)
    weights = rng.normal(size=out.shape)
    backward(sum_all(mul(out, constant(weights))))
    entries = []
    for k, v in enumerate(inputs):
        numeric = numeric_gradient(lambda: build(*inputs).data, v.data, h, weights)
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad
        rel = relative_error(analytic, numeric)
        label = name if len(inputs) == 1 else f"{name}[{k}]"
        entries.append(GradCheckEntry(label, float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), rel))
        logger.debug("%s: relative error %.3e", label, rel)
    return entries


def check_primitives(seed: int = 0, h: float = PRIMITIVE_FD_STEP,
                     tolerance: float = PRIMITIVE_REL_TOLERANCE) -> GradCheckReport:
    """Check each primitive's backward against central differences of a random projection of its output."""
    rng = named_rng(seed, "gradcheck")
    entries = []
    for name, build, arrays in _primitive_cases(rng):
        entries.extend(_check_case(name, build, arrays, rng, h))
    return GradCheckReport.from_entries(entries, tolerance)


def _three_layer(x: Value, w1: Value, b1: Value, w2: Value, w3: Value) -> Value:
    hidden = tanh(add(matmul(x, w1), b1))
    hidden = sigmoid(matmul(hidden, w2))
    return log_softmax(matmul(hidden, w3))


def check_composition(seed: int = 0, h: float = PRIMITIVE_FD_STEP,
                      tolerance: float = PRIMITIVE_REL_TOLERANCE) -> GradCheckReport:
    """Reverse sweep through tanh -> sigmoid -> log-softmax layers against central differences."""
    rng = named_rng(seed, "gradcheck.composition")
    arrays = [
        rng.normal(size=(4, 6)),
        0.5 * rng.normal(size=(6, 5)),
        0.5 * rng.normal(size=(1, 5)),
        0.5 * rng.normal(size=(5, 5)),
        0.5 * rng.normal(size=(5, 3)),
    ]
    return GradCheckReport.from_entries(_check_case("three_layer", _three_layer, arrays, rng, h), tolerance)


# ==============================================================================
# TRAINING LOSS
# ==============================================================================

def _group_candidates(model: LSTransducerModel, group: str) -> List[Tuple[str, Optional[int]]]:
    """(path, column) pairs for a group; column None means any entry."""
    if group == "enc.out.weight":
        col = model.cfg.encoder_dim - 1
        return [("enc.out.w", col), ("enc.out.b", col)]
    return [(p, None) for p in model.params.paths(group)]


def _sample_entries(model: LSTransducerModel, n_params: int, rng: np.random.Generator) -> List[Tuple[str, Tuple[int, int]]]:
    picked = []
    seen = set()
    groups = [g for g in LOSS_CHECK_GROUPS if _group_candidates(model, g)]
    attempts = 0
    while len(picked) < n_params and attempts < 200 * n_params:
        attempts += 1
        group = groups[len(picked) % len(groups)]
        path, col = _group_candidates(model, group)[int(rng.integers(len(_group_candidates(model, group))))]
        v = model.params[path]
        if v.grad is None:
            continue
        r = int(rng.integers(v.shape[0]))
        c = col if col is not None else int(rng.integers(v.shape[1]))
        if (path, (r, c)) in seen or abs(v.grad[r, c]) < LOSS_CHECK_MIN_GRAD:
            continue
        seen.add((path, (r, c)))
        picked.append((path, (r, c)))
    if len(picked) < n_params:
        logger.warning("Only %d of %d parameter entries had a usable gradient", len(picked), n_params)
    return picked


def check_lst_loss(
    model: LSTransducerModel,
    utt: Utterance,
    cfg: Optional[TrainConfig] = None,
    n_params: int = LOSS_CHECK_PARAMS,
    seed: int = 0,
    h: float = LOSS_FD_STEP,
    tolerance: float = LOSS_REL_TOLERANCE,
) -> GradCheckReport:
    """
    Compare d total / d theta with central differences on sampled entries.

    Entries are drawn round-robin from the encoder layers, the weight-channel
    column of the encoder output layer, the AIF projection, the prediction
    network and the joint network. The model is left unchanged.
    """
    cfg = cfg or TrainConfig()
    rng = named_rng(seed, "gradcheck")
    model.params.zero_grad()
    backward(lst_loss(model, utt, cfg).total)
    entries = []
    for path, idx in _sample_entries(model, n_params, rng):
        v = model.params[path]
        analytic = float(v.grad[idx])
        orig = v.data[idx]
        v.data[idx] = orig + h
        up = lst_loss(model, utt, cfg).total.item()
        v.data[idx] = orig - h
        down = lst_loss(model, utt, cfg).total.item()
        v.data[idx] = orig
        numeric = (up - down) / (2.0 * h)
        rel = relative_error(np.array([analytic]), np.array([numeric]))
        entries.append(GradCheckEntry(f"{path}{list(idx)}", analytic, numeric, rel))
        logger.debug("%s%s: analytic %.6e numeric %.6e rel %.3e", path, list(idx), analytic, numeric, rel)
    model.params.zero_grad()
    return GradCheckReport.from_entries(entries, tolerance)


def run_suite(model: LSTransducerModel, utts: Sequence[Utterance], cfg: TrainConfig, seed: int,
              n_params: int = LOSS_CHECK_PARAMS) -> List[Tuple[str, GradCheckReport]]:
    """Primitive and composition suites followed by one loss check per utterance."""
    reports = [("primitives", check_primitives(seed)), ("composition", check_composition(seed))]
    for utt in utts:
        reports.append((utt.utt_id, check_lst_loss(model, utt, cfg, n_params=n_params, seed=seed)))
    return reports
