#!/usr/bin/env python3
"""
Frame-weight alignment: CIF integration and AIF attention extraction.

Both mechanisms read per-frame weights alpha from the encoder's weight channel.
CIF integrates frames by weighted sum and fires each time the running total
crosses the next integer. AIF only uses the running total to locate the
boundary T_j of label j (the last frame whose prefix sum does not exceed j)
and then attends over frames 1..T_j with a prediction-network query.

Example (CIF, weights 0.2 0.9 0.2 0.3 0.6 0.1):

    cumsum     0.2  1.1  1.3  1.6  2.2  2.3
    c_1 = 0.2 e_1 + 0.8 e_2
    c_2 = 0.1 e_2 + 0.2 e_3 + 0.3 e_4 + 0.4 e_5
    tail 0.2 e_5 + 0.1 e_6 fires only in decode mode
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Value,
    absolute,
    add,
    add_scalar,
    concat,
    div,
    make_node,
    masked_fill,
    ordered_matmul,
    row_softmax,
    scale,
    sigmoid,
    slice_rows,
    sum_all,
    transpose,
)
from .constants import CIF_FIRE_EPS, LOG_SENTINEL
from .errors import ContractError, DegenerateAlignmentError, DimensionError
from .nn_blocks import EncoderOutput

logger = logging.getLogger(__name__)


@dataclass
class AlignmentPlan:
    """Weights, their prefix sums and the fired boundaries for one utterance."""
    alpha: np.ndarray
    w_phone: np.ndarray
    cumsum: np.ndarray
    boundaries: List[int]

    @property
    def T(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def total(self) -> float:
        return float(self.cumsum[-1]) if self.cumsum.size else 0.0


@dataclass
class LabelRepr:
    """L x d_v integrated representations, plus attention/integration weights when kept."""
    C: Value
    attn: Optional[np.ndarray] = None

    @property
    def L(self) -> int:
        return self.C.shape[0]


def frame_weights(enc: EncoderOutput) -> Tuple[Value, Value]:
    """alpha = sigmoid(last column), w_phone = sigmoid(second-to-last), both T x 1."""
    if enc.d < 4:
        raise ContractError(f"encoder output needs d >= 4, got {enc.d}")
    return sigmoid(enc.weight_channel()), sigmoid(enc.phone_channel())


def aif_boundaries(alpha, L: int) -> List[int]:
    """
    Boundaries T_1..T_L from the running sum of alpha.

    T_j is the number of frames read before the prefix sum first strictly
    exceeds j; equality does not fire. If j is never exceeded, T_j = T.

    Example:
        >>> aif_boundaries([0.4, 0.4, 0.4], 2)
        [2, 3]
    """
    if L < 1:
        raise ContractError(f"aif_boundaries needs L >= 1, got {L}")
    cumsum = np.cumsum(np.asarray(alpha, dtype=np.float64).reshape(-1))
    thresholds = np.arange(1, L + 1, dtype=np.float64)
    return [int(b) for b in np.searchsorted(cumsum, thresholds, side="right")]


def boundary_from_cumsum(cumsum: np.ndarray, j: int) -> Optional[int]:
    """
    Boundary of label j from a possibly partial prefix-sum vector.

    Returns None while no received frame exceeds j (the boundary is still
    open); the caller decides whether the stream has ended.
    """
    idx = int(np.searchsorted(cumsum, float(j), side="right"))
    if idx < cumsum.shape[0]:
        return idx
    return None


def plan_alignment(alpha: Value, w_phone: Value, L: int) -> AlignmentPlan:
    a = alpha.data.reshape(-1).copy()
    return AlignmentPlan(
        alpha=a,
        w_phone=w_phone.data.reshape(-1).copy(),
        cumsum=np.cumsum(a),
        boundaries=aif_boundaries(a, L) if L >= 1 else [],
    )


def cif_scale(alpha: Value, L: int) -> Value:
    """alpha * L / sum(alpha), so the scaled weights sum to L."""
    if L < 1:
        raise ContractError(f"cif_scale needs L >= 1, got {L}")
    total = float(alpha.data.sum())
    if not total > 0:
        raise DegenerateAlignmentError(f"cannot rescale weights with sum {total}")
    return div(scale(alpha, float(L)), sum_all(alpha))


def _cif_weight_matrix(cum: np.ndarray, rows: int) -> np.ndarray:
    prev = np.concatenate([[0.0], cum[:-1]])
    j = np.arange(rows, dtype=np.float64)[:, None]
    upper = np.minimum(cum[None, :], j + 1.0)
    lower = np.maximum(prev[None, :], j)
    return np.maximum(upper - lower, 0.0)


def cif_weights(alpha: Value, rows: int) -> Value:
    """
    rows x T integration weights W[j, t] = overlap of frame t's weight interval
    [cum_{t-1}, cum_t] with the label interval [j, j+1].

    Differentiable in alpha through the prefix sums (piecewise linear).
    """
    a = alpha.data.reshape(-1)
    if a.shape[0] == 0:
        raise ContractError("cif_weights needs T >= 1")
    cum = np.cumsum(a)
    prev = np.concatenate([[0.0], cum[:-1]])
    W = _cif_weight_matrix(cum, rows)
    j = np.arange(rows, dtype=np.float64)[:, None]
    active = W > 0
    d_upper = active & (cum[None, :] < j + 1.0)
    d_lower = active & (prev[None, :] > j)
    shape = alpha.shape

    def _back(g):
        d_cum = (g * d_upper).sum(axis=0)
        d_prev = -(g * d_lower).sum(axis=0)
        d_cum[:-1] += d_prev[1:]
        # cum_t = sum_{s <= t} alpha_s
        d_alpha = np.cumsum(d_cum[::-1])[::-1]
        return (d_alpha.reshape(shape),)

    return make_node(W, (alpha,), _back, "cif_weights")


def cif_integrate(values: Value, alpha: Value, mode: str = "decode", keep_weights: bool = False) -> LabelRepr:
    """
    Integrate-and-fire over T frames.

    Args:
        values: T x d_v frame representations
        alpha: T x 1 weights (scaled to sum L in training)
        mode: "train" emits only full fires; "decode" also fires the residual tail
        keep_weights: Keep the integration matrix in LabelRepr.attn

    Returns:
        LabelRepr with one row per fire
    """
    if values.shape[0] != alpha.shape[0] or alpha.shape[1] != 1:
        raise DimensionError("cif_integrate", values.shape, alpha.shape)
    if values.shape[0] < 1:
        raise ContractError("cif_integrate needs T >= 1")
    if mode not in ("train", "decode"):
        raise ContractError(f"cif_integrate mode must be 'train' or 'decode', got {mode!r}")
    total = float(alpha.data.sum())
    fires = int(math.floor(total + CIF_FIRE_EPS))
    if mode == "decode" and total - fires > CIF_FIRE_EPS:
        fires += 1
    if fires == 0:
        return LabelRepr(C=Value(np.zeros((0, values.shape[1]))), attn=np.zeros((0, values.shape[0])) if keep_weights else None)
    W = cif_weights(alpha, fires)
    return LabelRepr(C=ordered_matmul(W, values), attn=W.data.copy() if keep_weights else None)


def full_fire_count(alpha) -> int:
    return int(math.floor(float(np.sum(alpha)) + CIF_FIRE_EPS))


def _check_boundaries(boundaries: Sequence[int], T: int) -> List[int]:
    out = []
    for b in boundaries:
        if b > T or b < 0:
            raise ContractError(f"boundary {b} outside [0, {T}]")
        out.append(max(int(b), 1))
    return out


def aif_extract(
    values: Value,
    queries: Value,
    boundaries: Sequence[int],
    scale_qk: bool = True,
    mode: str = "parallel",
    keep_attn: bool = False,
) -> LabelRepr:
    """
    c_j = softmax(q_j K_{1:T_j}^T) V_{1:T_j} with K = V = `values`.

    `mode="parallel"` runs all labels at once with a boundary mask (teacher
    forcing); `mode="sequential"` loops over labels on sliced keys. Both use
    left-to-right reductions and produce bit-identical C. Boundaries are
    clamped to at least one frame.

    Args:
        values: T x d_q projected content rows (keys and values)
        queries: at least L x d_q query rows; row j is used for label j
        boundaries: T_1..T_L
        scale_qk: Divide dot products by sqrt(d_q)
    """
    T, dq = values.shape
    L = len(boundaries)
    if L == 0:
        return LabelRepr(C=Value(np.zeros((0, dq))), attn=np.zeros((0, T)) if keep_attn else None)
    if queries.shape[1] != dq:
        raise DimensionError("aif_extract", queries.shape, values.shape)
    if queries.shape[0] < L:
        raise ContractError(f"aif_extract: {L} boundaries but only {queries.shape[0]} queries")
    bounds = _check_boundaries(boundaries, T)
    if queries.shape[0] > L:
        queries = slice_rows(queries, 0, L)
    factor = 1.0 / math.sqrt(dq) if scale_qk else 1.0

    if mode == "parallel":
        logits = scale(ordered_matmul(queries, transpose(values)), factor)
        mask = np.arange(T)[None, :] >= np.asarray(bounds)[:, None]
        attn = row_softmax(masked_fill(logits, mask, LOG_SENTINEL), ordered=True)
        C = ordered_matmul(attn, values)
        return LabelRepr(C=C, attn=attn.data.copy() if keep_attn else None)

    if mode != "sequential":
        raise ContractError(f"aif_extract mode must be 'parallel' or 'sequential', got {mode!r}")
    rows = []
    attn_rows = []
    for j, tj in enumerate(bounds):
        c_j, a_j = aif_extract_one(values, slice_rows(queries, j, j + 1), tj, factor)
        rows.append(c_j)
        if keep_attn:
            full = np.zeros(T)
            full[:tj] = a_j
            attn_rows.append(full)
    return LabelRepr(C=concat(rows, axis=0), attn=np.vstack(attn_rows) if keep_attn else None)


def aif_extract_one(values: Value, query: Value, boundary: int, factor: float) -> Tuple[Value, np.ndarray]:
    """One label's representation from frames 1..boundary (the decoder's per-step path)."""
    tj = max(int(boundary), 1)
    if tj > values.shape[0]:
        raise ContractError(f"boundary {boundary} beyond {values.shape[0]} frames")
    keys = slice_rows(values, 0, tj)
    attn = row_softmax(scale(ordered_matmul(query, transpose(keys)), factor), ordered=True)
    return ordered_matmul(attn, keys), attn.data[0].copy()


def quantity_loss(alpha: Value, w_phone: Value, L: int, P: int) -> Value:
    """|sum(alpha) - L| + |sum(w) - P|, subgradient 0 at exact equality."""
    if L < 1 or P < 1:
        raise ContractError(f"quantity_loss needs L >= 1 and P >= 1, got L={L}, P={P}")
    label_term = absolute(add_scalar(sum_all(alpha), -float(L)))
    phone_term = absolute(add_scalar(sum_all(w_phone), -float(P)))
    return add(label_term, phone_term)
