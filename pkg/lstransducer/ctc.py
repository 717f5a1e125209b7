#!/usr/bin/env python3
"""
CTC loss, CTC prefix scores and a brute-force enumeration oracle.

All recursions run in log space over posteriors `logp` (T x V, rows
log-normalised, blank at id 0). Frame indices are 0-based here; a horizon
T_h means frames 0..T_h-1 have been read.

Prefix-score recursion for h = g + q over the frames of the horizon, with
gamma_n / gamma_b the forward variables of prefixes ending in a label /
in blank:

    gamma_n(h)[0] = logp[0, q] if g == [sos] else -inf
    gamma_b(h)[0] = -inf
    phi[t]        = gamma_b(g)[t-1]                      if last(g) == q
                  = logaddexp(gamma_b(g), gamma_n(g))[t-1] otherwise
    gamma_n(h)[t] = logaddexp(gamma_n(h)[t-1], phi[t]) + logp[t, q]
    gamma_b(h)[t] = logaddexp(gamma_b(h)[t-1], gamma_n(h)[t-1]) + logp[t, blank]
    psi           = logaddexp over t of (phi[t] + logp[t, q]), started at gamma_n(h)[0]

psi is the prefix score log p(h, ... | E_{1:T_h}). The [eos] score of g is
logaddexp(gamma_n(g), gamma_b(g)) at the last frame, allowed only once every
frame has been read (otherwise the LOG_SENTINEL is returned).
"""
from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .autodiff import Value, log_softmax, make_node
from .constants import BLANK_ID, EOS_ID, LOG_SENTINEL, ORACLE_MAX_PATHS, ORACLE_PATH_CACHE_SIZE, SOS_ID
from .errors import ContractError

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


def ctc_posteriors(logits: Value) -> Value:
    """Per-frame log-probabilities over the vocabulary (blank included)."""
    return log_softmax(logits)


# ==============================================================================
# CTC LOSS
# ==============================================================================

@dataclass
class CtcLossResult:
    """Negative log-likelihood node plus a feasibility flag (loss is +inf when infeasible)."""
    loss: Value
    feasible: bool

    @property
    def value(self) -> float:
        return self.loss.item()


def _extended_labels(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """skip[s]: state s may be entered from s-2 (a label differing from the one two back)."""
    skip = np.zeros(ext.shape[0], dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def ctc_forward_backward(logp: np.ndarray, target: Sequence[int], blank: int = BLANK_ID) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Log-space forward and backward variables over the blank-interleaved lattice.

    Both include the emission at their own frame, so
    la[t, s] + lb[t, s] - logp[t, ext[s]] is the log mass of paths through (t, s).

    Returns:
        (la, lb, log_likelihood); log_likelihood is -inf when infeasible
    """
    T = logp.shape[0]
    ext = _extended_labels(target, blank)
    S = ext.shape[0]
    skip = _skip_allowed(ext, blank)
    emit = logp[:, ext]

    la = np.full((T, S), NEG_INF)
    la[0, 0] = emit[0, 0]
    if S > 1:
        la[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = la[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        la[t] = acc + emit[t]

    lb = np.full((T, S), NEG_INF)
    lb[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        lb[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = lb[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        lb[t] = acc + emit[t]

    if S > 1:
        log_like = float(np.logaddexp(la[T - 1, S - 1], la[T - 1, S - 2]))
    else:
        log_like = float(la[T - 1, 0])
    return la, lb, log_like


def ctc_loss(logp: Value, target: Sequence[int], blank: int = BLANK_ID) -> CtcLossResult:
    """
    -log sum over alignment paths collapsing to `target`.

    The gradient with respect to logp[t, k] is
    -exp(logsumexp_{s: ext[s] = k}(la + lb - logp[t, k]) - log_likelihood).
    An infeasible target (too few frames for its labels and repeats) gives a
    +inf loss, feasible=False and a zero gradient.

    Raises:
        ContractError: Empty target or a blank inside the target
    """
    target = [int(t) for t in target]
    if not target:
        raise ContractError("ctc_loss needs a non-empty target")
    if any(t == blank for t in target):
        raise ContractError("ctc_loss target must not contain blank")
    LP = logp.data
    if LP.shape[0] < 1:
        raise ContractError("ctc_loss needs T >= 1")
    la, lb, log_like = ctc_forward_backward(LP, target, blank)
    feasible = bool(np.isfinite(log_like))
    shape = LP.shape
    ext = _extended_labels(target, blank)

    def _back(g):
        out = np.zeros(shape)
        if not feasible:
            return (out,)
        occ = la + lb - LP[:, ext]
        with np.errstate(divide="ignore"):
            for k in np.unique(ext):
                cols = occ[:, ext == k]
                out[:, k] = -np.exp(logsumexp(cols, axis=1) - log_like)
        return (out * g[0, 0],)

    loss = -log_like if feasible else np.inf
    return CtcLossResult(loss=make_node(np.array([[loss]]), (logp,), _back, "ctc_loss"), feasible=feasible)


# ==============================================================================
# PREFIX SCORES
# ==============================================================================

@dataclass
class PrefixScoreState:
    """
    Forward variables of prefix g over frames 0..horizon-1.

    `parent` is the state of g without its last token (None for [sos]), which
    is what lets the horizon be extended without recomputing from scratch.
    """
    prefix: Tuple[int, ...]
    gamma_n: np.ndarray
    gamma_b: np.ndarray
    parent: Optional["PrefixScoreState"] = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return int(self.gamma_n.shape[0])

    @property
    def last(self) -> Optional[int]:
        """Last label of g; [sos] counts as no label."""
        return None if self.parent is None else self.prefix[-1]

    def complete_score(self, horizon: Optional[int] = None) -> float:
        """log(gamma_n + gamma_b) at the last frame of the horizon."""
        h = self.horizon if horizon is None else horizon
        return float(np.logaddexp(self.gamma_n[h - 1], self.gamma_b[h - 1]))


def initial_state(logp: np.ndarray, horizon: int, sos: int = SOS_ID, blank: int = BLANK_ID) -> PrefixScoreState:
    """State of the empty hypothesis [sos]: all-blank forward mass."""
    if horizon < 1:
        raise ContractError(f"prefix score needs a horizon >= 1, got {horizon}")
    return PrefixScoreState(
        prefix=(sos,),
        gamma_n=np.full(horizon, NEG_INF),
        gamma_b=np.cumsum(logp[:horizon, blank]),
    )


def _recurse(gn: np.ndarray, gb: np.ndarray, parent: PrefixScoreState, lp_q: np.ndarray, lp_blank: np.ndarray,
             same_last: np.ndarray, start: int, stop: int, psi: Optional[np.ndarray] = None) -> None:
    """Fill rows start..stop-1 of gn/gb (T x K) in place; accumulate psi when given."""
    for t in range(start, stop):
        merged = np.logaddexp(parent.gamma_b[t - 1], parent.gamma_n[t - 1])
        phi = np.where(same_last, parent.gamma_b[t - 1], merged)
        gn[t] = np.logaddexp(gn[t - 1], phi) + lp_q[t]
        gb[t] = np.logaddexp(gb[t - 1], gn[t - 1]) + lp_blank[t]
        if psi is not None:
            psi[:] = np.logaddexp(psi, phi + lp_q[t])


def extend_state(state: PrefixScoreState, logp: np.ndarray, horizon: int, blank: int = BLANK_ID) -> PrefixScoreState:
    """
    Return the state of the same prefix over a longer horizon.

    Only frames old_horizon..horizon-1 are computed; the parent chain is
    extended first. A shorter or equal horizon returns the state unchanged.
    """
    if horizon <= state.horizon:
        return state
    if horizon > logp.shape[0]:
        raise ContractError(f"horizon {horizon} beyond the {logp.shape[0]} available frames")
    if state.parent is None:
        fresh = initial_state(logp, horizon, sos=state.prefix[0], blank=blank)
        return fresh
    parent = extend_state(state.parent, logp, horizon, blank)
    q = state.prefix[-1]
    old = state.horizon
    gn = np.full((horizon, 1), NEG_INF)
    gb = np.full((horizon, 1), NEG_INF)
    gn[:old, 0] = state.gamma_n
    gb[:old, 0] = state.gamma_b
    same_last = np.array([parent.last == q])
    _recurse(gn, gb, parent, logp[:horizon, [q]], logp[:horizon, blank], same_last, old, horizon)
    return PrefixScoreState(prefix=state.prefix, gamma_n=gn[:, 0], gamma_b=gb[:, 0], parent=parent)


@dataclass
class CandidateScores:
    """Prefix scores for a batch of extensions of one prefix at one horizon."""
    parent: PrefixScoreState
    candidates: np.ndarray
    scores: np.ndarray
    gamma_n: np.ndarray
    gamma_b: np.ndarray

    def state_for(self, q: int) -> PrefixScoreState:
        k = int(np.nonzero(self.candidates == q)[0][0])
        return PrefixScoreState(
            prefix=self.parent.prefix + (int(q),),
            gamma_n=self.gamma_n[:, k].copy(),
            gamma_b=self.gamma_b[:, k].copy(),
            parent=self.parent,
        )


def _check_state(g: Sequence[int], state: PrefixScoreState) -> None:
    if tuple(g) != state.prefix:
        raise ContractError(f"prefix state for {state.prefix} used with hypothesis {tuple(g)}")


def prefix_scores_online(
    state: PrefixScoreState,
    candidates: Sequence[int],
    logp: np.ndarray,
    horizon: int,
    total_frames: int,
    eos_rule: bool = True,
    eos: int = EOS_ID,
    blank: int = BLANK_ID,
) -> CandidateScores:
    """
    Scores of g + q for every q in `candidates` over frames 0..horizon-1.

    For q = [eos]: the complete-sequence score of g when horizon == total_frames;
    before that, the LOG_SENTINEL when `eos_rule` is on, or the truncated
    complete-sequence score when it is off.

    Raises:
        ContractError: horizon 0, horizon > total_frames, or blank among candidates
    """
    if horizon < 1:
        raise ContractError(f"online prefix score needs a horizon >= 1, got {horizon}")
    if horizon > total_frames:
        raise ContractError(f"horizon {horizon} exceeds the {total_frames} frames of the utterance")
    cands = np.asarray(candidates, dtype=np.int64)
    if np.any(cands == blank):
        raise ContractError("blank cannot extend a prefix")
    g = extend_state(state, logp, horizon, blank)
    K = cands.shape[0]
    is_eos = cands == eos
    labels = np.where(is_eos, blank, cands)
    lp_q = logp[:horizon][:, labels]
    lp_blank = logp[:horizon, blank]
    gn = np.full((horizon, K), NEG_INF)
    gb = np.full((horizon, K), NEG_INF)
    if g.parent is None:
        gn[0] = lp_q[0]
    psi = gn[0].copy()
    same_last = cands == (g.last if g.last is not None else -1)
    _recurse(gn, gb, g, lp_q, lp_blank, same_last, 1, horizon, psi)

    if np.any(is_eos):
        if horizon == total_frames or not eos_rule:
            psi[is_eos] = g.complete_score(horizon)
        else:
            psi[is_eos] = LOG_SENTINEL
        gn[:, is_eos] = NEG_INF
        gb[:, is_eos] = NEG_INF
    return CandidateScores(parent=g, candidates=cands, scores=psi, gamma_n=gn, gamma_b=gb)


def prefix_score_online(
    g: Sequence[int],
    q: int,
    state: PrefixScoreState,
    logp: np.ndarray,
    horizon: int,
    total_frames: int,
    eos_rule: bool = True,
    eos: int = EOS_ID,
) -> Tuple[float, PrefixScoreState]:
    """Single-candidate form of prefix_scores_online; returns (score, state of g + q)."""
    _check_state(g, state)
    batch = prefix_scores_online(state, [q], logp, horizon, total_frames, eos_rule, eos=eos)
    return float(batch.scores[0]), batch.state_for(q)


def prefix_score_offline(g: Sequence[int], q: int, state: PrefixScoreState, logp: np.ndarray,
                         eos: int = EOS_ID) -> Tuple[float, PrefixScoreState]:
    """Prefix score over every frame of logp ([eos] gives the complete-sequence score)."""
    T = logp.shape[0]
    return prefix_score_online(g, q, state, logp, T, T, eos_rule=True, eos=eos)


# ==============================================================================
# ENUMERATION ORACLE
# ==============================================================================

def collapse(path: Sequence[int], blank: int = BLANK_ID) -> Tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(int(tok))
        prev = tok
    return tuple(out)


@functools.lru_cache(maxsize=ORACLE_PATH_CACHE_SIZE)
def _paths(T: int, V: int, blank: int) -> Tuple[np.ndarray, List[Tuple[int, ...]], np.ndarray]:
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    index: Dict[Tuple[int, ...], int] = {}
    inverse = np.empty(paths.shape[0], dtype=np.int64)
    for i, p in enumerate(paths):
        inverse[i] = index.setdefault(collapse(p, blank), len(index))
    strings = [None] * len(index)
    for s, i in index.items():
        strings[i] = s
    return paths, strings, inverse


def brute_force_ctc_oracle(probs: np.ndarray, mode: str, sequence: Sequence[int], blank: int = BLANK_ID) -> float:
    """
    Sum path probabilities by enumerating all V^T alignment paths.

    Args:
        probs: T x V per-frame probabilities
        mode: "label-prob" (strings equal to `sequence`) or "prefix-prob"
              (strings starting with `sequence`, exact match included)
        sequence: labels without [sos]

    Raises:
        ContractError: V^T above ORACLE_MAX_PATHS, or an unknown mode
    """
    T, V = probs.shape
    if V ** T > ORACLE_MAX_PATHS:
        raise ContractError(f"oracle refuses V^T = {V ** T} paths (limit {ORACLE_MAX_PATHS})")
    if mode not in ("label-prob", "prefix-prob"):
        raise ContractError(f"unknown oracle mode {mode!r}")
    paths, strings, inverse = _paths(T, V, blank)
    path_prob = np.prod(probs[np.arange(T)[None, :], paths], axis=1)
    per_string = np.bincount(inverse, weights=path_prob, minlength=len(strings))
    seq = tuple(int(s) for s in sequence)
    n = len(seq)
    if mode == "label-prob":
        return float(sum(p for s, p in zip(strings, per_string) if s == seq))
    return float(sum(p for s, p in zip(strings, per_string) if s[:n] == seq))


@dataclass
class OracleReport:
    """Worst absolute log-probability gaps between the recursions and enumeration."""
    trials: int
    loss_delta: float = 0.0
    offline_delta: float = 0.0
    online_delta: float = 0.0
    eos_delta: float = 0.0

    @property
    def max_delta(self) -> float:
        return max(self.loss_delta, self.offline_delta, self.online_delta, self.eos_delta)


def _log_gap(ours: float, reference: float) -> float:
    if reference <= 0.0:
        return 0.0 if ours == NEG_INF else float("inf")
    return abs(ours - float(np.log(reference)))


def _walk(prefix: Sequence[int], logp: np.ndarray, horizon: int, total: int, eos: int) -> PrefixScoreState:
    state = initial_state(logp, horizon)
    for tok in prefix:
        _, state = prefix_score_online(state.prefix, tok, state, logp, horizon, total, eos=eos)
    return state


def run_oracle_trials(trials: int, max_T: int, max_V: int, rng: np.random.Generator) -> OracleReport:
    """
    Compare ctc_loss, the offline prefix score, the online prefix score and
    the [eos] branch with enumeration on random posteriors.

    Each trial draws T in [1, max_T], V in [2, max_V], Dirichlet posteriors,
    a target, a prefix g and an extension q. The online score is checked at a
    random horizon against enumeration over the truncated posteriors. [eos]
    uses id V, outside the label range, so every label 1..V-1 is a plain token.
    """
    if max_T < 1 or max_V < 2:
        raise ContractError(f"oracle trials need max_T >= 1 and max_V >= 2, got {max_T}, {max_V}")
    report = OracleReport(trials=trials)
    for _ in range(trials):
        T = int(rng.integers(1, max_T + 1))
        V = int(rng.integers(2, max_V + 1))
        probs = rng.dirichlet(np.ones(V), size=T)
        logp = np.log(probs)
        eos = V

        target = [int(x) for x in rng.integers(1, V, size=int(rng.integers(1, T + 1)))]
        loss = ctc_loss(Value(logp), target)
        ours = -loss.value if loss.feasible else NEG_INF
        report.loss_delta = max(report.loss_delta, _log_gap(ours, brute_force_ctc_oracle(probs, "label-prob", target)))

        g = [int(x) for x in rng.integers(1, V, size=int(rng.integers(0, T)))]
        q = int(rng.integers(1, V))
        state = _walk(g, logp, T, T, eos)
        score, _ = prefix_score_offline(state.prefix, q, state, logp, eos=eos)
        report.offline_delta = max(report.offline_delta, _log_gap(score, brute_force_ctc_oracle(probs, "prefix-prob", g + [q])))

        eos_score, _ = prefix_score_offline(state.prefix, eos, state, logp, eos=eos)
        report.eos_delta = max(report.eos_delta, _log_gap(eos_score, brute_force_ctc_oracle(probs, "label-prob", g)))

        h = int(rng.integers(1, T + 1))
        state_h = _walk(g, logp, h, T, eos)
        online, _ = prefix_score_online(state_h.prefix, q, state_h, logp, h, T, eos=eos)
        report.online_delta = max(report.online_delta, _log_gap(online, brute_force_ctc_oracle(probs[:h], "prefix-prob", g + [q])))
    logger.info("CTC oracle: %d trials, max |delta| %.3e", trials, report.max_delta)
    return report
