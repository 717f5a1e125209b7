#!/usr/bin/env python3
"""
Label-synchronous streaming beam search.

At label position j every live hypothesis shares the same boundary T_j (the
weights alpha come from the encoder alone), so one step of the search is:

    1. resolve T_j from the prefix sums of alpha; wait for more frames if
       no received frame exceeds j yet and the stream is still open
    2. per hypothesis: query = D_inter row, c_j = attention over frames 1..T_j,
       log p_lst = log softmax(joint(c_j, H_pre row)) with blank masked
    3. per candidate q: S_ctc = online prefix score at horizon T_j,
       S_lst += log p_lst(q), S_lm += log p_lm(q)
    4. S = beta * S_ctc + (1 - beta) * S_lst + lm_weight * S_lm;
       keep the best `beam` candidates, retire those ending in [eos]

The prefix score is a total, so S_ctc is replaced each step while S_lst and
S_lm accumulate. Ties on S go to the lexicographically smaller token sequence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy.special import expit

from .alignment import aif_extract_one, boundary_from_cumsum, cif_integrate
from .autodiff import Value, constant, log_softmax, masked_fill, slice_rows
from .config import BeamConfig
from .constants import BLANK_ID, EOS_ID, LOG_SENTINEL, SOS_ID
from .ctc import PrefixScoreState, ctc_posteriors, initial_state, prefix_scores_online
from .errors import ContractError, DataError, VocabularyMismatchError
from .nn_blocks import EncoderOutput, LSTransducerModel

logger = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    """One beam entry. `tokens` starts with [sos]; a finished one ends with [eos]."""
    tokens: Tuple[int, ...]
    s_lst: float = 0.0
    s_ctc: float = 0.0
    s_lm: float = 0.0
    score: float = 0.0
    ctc_state: Optional[PrefixScoreState] = field(default=None, repr=False)
    boundaries: Tuple[int, ...] = ()
    done: bool = False

    @property
    def labels(self) -> Tuple[int, ...]:
        """Emitted tokens without [sos] and the closing [eos]."""
        body = self.tokens[1:]
        if self.done and body and body[-1] == EOS_ID:
            body = body[:-1]
        return body


@dataclass
class DecodeResult:
    """n-best list sorted by score; `truncated` when nothing reached [eos] within the cap."""
    nbest: List[Hypothesis]
    truncated: bool = False
    total_alpha: float = 0.0

    @property
    def best(self) -> Hypothesis:
        return self.nbest[0]


class UniformLM:
    """Assigns log(1/V) to every token; a fusion baseline and test fixture."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def next_token_logprobs(self, tokens: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, -math.log(self.vocab_size))


def combine_scores(beta: float, lm_weight: float, s_ctc, s_lst, s_lm):
    """beta * S_ctc + (1 - beta) * S_lst + lm_weight * S_lm, with zero weights contributing nothing."""
    total = (1.0 - beta) * np.asarray(s_lst, dtype=np.float64)
    if beta > 0:
        total = total + beta * np.asarray(s_ctc, dtype=np.float64)
    if lm_weight > 0:
        total = total + lm_weight * np.asarray(s_lm, dtype=np.float64)
    return total


def lst_step_score(model: LSTransducerModel, c_i: Value, h_row: Value) -> np.ndarray:
    """log p_lst over the vocabulary for one label position; blank sits at LOG_SENTINEL."""
    logits = model.joint_logits(c_i, h_row)
    mask = np.zeros(logits.shape, dtype=bool)
    mask[:, BLANK_ID] = True
    return log_softmax(masked_fill(logits, mask, LOG_SENTINEL)).data[0].copy()


def check_lm_vocabulary(model: LSTransducerModel, lm) -> None:
    if lm is not None and lm.vocab_size != model.cfg.vocab_size:
        raise VocabularyMismatchError(
            f"external LM vocabulary {lm.vocab_size} != model vocabulary {model.cfg.vocab_size}"
        )


def shallow_fusion_score(tokens: Sequence[int], lm, vocab_size: Optional[int] = None) -> float:
    """
    Chain-rule LM log-probability of tokens[1:] given tokens[0] ([sos]).

    This is the S_lm the decoder accumulates for a hypothesis.

    Raises:
        VocabularyMismatchError: `vocab_size` given and different from the LM's
    """
    if vocab_size is not None and lm.vocab_size != vocab_size:
        raise VocabularyMismatchError(f"external LM vocabulary {lm.vocab_size} != {vocab_size}")
    tokens = list(tokens)
    total = 0.0
    for n in range(1, len(tokens)):
        total += float(lm.next_token_logprobs(tokens[:n])[tokens[n]])
    return total


class UtteranceView:
    """
    Encoder-side quantities of the frames received so far.

    Rows computed for earlier chunks are kept as they were, so a label whose
    boundary was resolved early keeps seeing exactly the rows it saw then.
    """

    def __init__(self, model: LSTransducerModel):
        self.model = model
        self.feats = np.zeros((0, model.cfg.feat_dim))
        self.E = np.zeros((0, model.cfg.encoder_dim))
        self.logp = np.zeros((0, model.cfg.vocab_size))
        self.alpha = np.zeros(0)
        self.cumsum = np.zeros(0)
        self.values: Optional[Value] = None
        self.final = False
        self._cif_rows: Optional[Value] = None

    @property
    def T(self) -> int:
        return int(self.E.shape[0])

    @property
    def total_alpha(self) -> float:
        return float(self.cumsum[-1]) if self.T else 0.0

    def extend(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, self.model.cfg.feat_dim)
        if frames.shape[0] == 0:
            return
        old = self.T
        self.feats = np.vstack([self.feats, frames])
        enc = self.model.encoder_forward(self.feats)
        logp = ctc_posteriors(self.model.ctc_logits(enc)).data
        self.E = np.vstack([self.E, enc.E.data[old:]])
        self.logp = np.vstack([self.logp, logp[old:]])
        self.alpha = expit(self.E[:, -1])
        self.cumsum = np.cumsum(self.alpha)
        self.values = self.model.aif_values(EncoderOutput(constant(self.E)))
        self._cif_rows = None

    def close(self) -> None:
        self.final = True
        self._cif_rows = None

    def boundary(self, j: int) -> Optional[int]:
        """T_j clamped to >= 1, T when the stream is closed and j is never exceeded, else None."""
        b = boundary_from_cumsum(self.cumsum, j)
        if b is None:
            if not self.final:
                return None
            b = self.T
        return max(b, 1)

    def length_cap(self, config: BeamConfig) -> int:
        """Longest label count (with [eos]) a hypothesis may reach; needs a closed stream for the alpha term."""
        if not self.final:
            return config.max_output_length
        return min(config.max_output_length, int(math.ceil(self.total_alpha)) + config.length_cap_margin)

    def label_repr(self, i: int, query: Value, boundary: int) -> Value:
        """c for label position i (0-based) at the given boundary."""
        cfg = self.model.cfg
        if cfg.alignment == "aif":
            factor = 1.0 / math.sqrt(cfg.query_dim) if cfg.aif_scale_qk else 1.0
            c, _ = aif_extract_one(self.values, query, boundary, factor)
            return c
        if self._cif_rows is None:
            self._cif_rows = cif_integrate(
                self.values, constant(self.alpha.reshape(-1, 1)), mode="decode" if self.final else "train"
            ).C
        if i < self._cif_rows.shape[0]:
            return slice_rows(self._cif_rows, i, i + 1)
        return constant(np.zeros((1, cfg.query_dim)))

    def lst_logprobs(self, tokens: Sequence[int], i: int, boundary: int) -> np.ndarray:
        pred = self.model.prediction_network_forward(tokens)
        query = slice_rows(pred.D_inter, i, i + 1)
        h_row = slice_rows(pred.H_pre, i, i + 1)
        return lst_step_score(self.model, self.label_repr(i, query, boundary), h_row)


class StreamingDecoder:
    """
    Beam search that runs each label step as soon as its boundary is known.

    Example:
        >>> dec = StreamingDecoder(model, BeamConfig())
        >>> for chunk in np.array_split(frames, 4):
        ...     dec.accept_frames(chunk)
        >>> result = dec.finalize()
    """

    def __init__(self, model: LSTransducerModel, config: BeamConfig, lm=None):
        check_lm_vocabulary(model, lm)
        self.model = model
        self.config = config
        self.lm = lm if config.lm_weight > 0 else None
        self.view = UtteranceView(model)
        self.candidates = np.array([t for t in range(model.cfg.vocab_size) if t != BLANK_ID], dtype=np.int64)
        self.live: List[Hypothesis] = [Hypothesis(tokens=(SOS_ID,))]
        self.finished: List[Hypothesis] = []
        self.step = 0
        self._last_live: List[Hypothesis] = list(self.live)
        self._stopped = False
        self._result: Optional[DecodeResult] = None

    def accept_frames(self, frames: np.ndarray) -> None:
        if self._result is not None:
            raise ContractError("decoder already finalized")
        self.view.extend(frames)
        self._advance()

    def finalize(self) -> DecodeResult:
        if self._result is not None:
            return self._result
        if self.view.T == 0:
            raise ContractError("cannot decode an utterance with no frames")
        self.view.close()
        self._advance()
        self._result = self._build_result()
        return self._result

    def _advance(self) -> None:
        while self.live and not self._stopped:
            j = self.step + 1
            if j > self.view.length_cap(self.config):
                self._stopped = True
                break
            boundary = self.view.boundary(j)
            if boundary is None:
                return
            self._expand(self.step, boundary)
            self.step += 1

    def _expand(self, i: int, boundary: int) -> None:
        cfg = self.config
        view = self.view
        pool = []
        for hyp in self.live:
            state = hyp.ctc_state or initial_state(view.logp, boundary)
            batch = prefix_scores_online(state, self.candidates, view.logp, boundary, view.T, cfg.eos_rule)
            if batch.parent.horizon != boundary:
                raise ContractError(f"prefix horizon {batch.parent.horizon} out of step with boundary {boundary}")
            lp_lst = view.lst_logprobs(hyp.tokens, i, boundary)
            s_lst = hyp.s_lst + lp_lst[self.candidates]
            s_ctc = batch.scores
            if self.lm is not None:
                s_lm = hyp.s_lm + self.lm.next_token_logprobs(hyp.tokens)[self.candidates]
            else:
                s_lm = np.full(self.candidates.shape[0], hyp.s_lm)
            total = combine_scores(cfg.beta, cfg.lm_weight, s_ctc, s_lst, s_lm)
            for k, q in enumerate(self.candidates):
                if cfg.beta > 0 and s_ctc[k] <= LOG_SENTINEL:
                    continue
                pool.append((float(total[k]), hyp.tokens + (int(q),), hyp, batch, k, float(s_lst[k]), float(s_lm[k])))
        pool.sort(key=lambda item: (-item[0], item[1]))
        survivors = pool[:cfg.beam]
        self.live = []
        for score, tokens, parent, batch, k, s_lst_k, s_lm_k in survivors:
            q = int(self.candidates[k])
            hyp = Hypothesis(
                tokens=tokens,
                s_lst=s_lst_k,
                s_ctc=float(batch.scores[k]),
                s_lm=s_lm_k,
                score=score,
                boundaries=parent.boundaries + (boundary,),
                done=q == EOS_ID,
            )
            if hyp.done:
                self.finished.append(hyp)
            else:
                hyp.ctc_state = batch.state_for(q)
                self.live.append(hyp)
        if self.live:
            self._last_live = list(self.live)
        logger.debug("step %d boundary %d: %d live, %d finished", i + 1, boundary, len(self.live), len(self.finished))

    def _build_result(self) -> DecodeResult:
        def order(h: Hypothesis):
            return (-h.score, h.tokens)

        if self.finished:
            nbest = sorted(self.finished, key=order)[: self.config.beam]
            return DecodeResult(nbest=nbest, truncated=False, total_alpha=self.view.total_alpha)
        fallback = sorted(self.live or self._last_live, key=order)
        logger.warning("no hypothesis reached [eos] within %d labels; returning the best unfinished one", self.step)
        return DecodeResult(nbest=fallback[: self.config.beam], truncated=True, total_alpha=self.view.total_alpha)


def decode_utterance(
    model: LSTransducerModel,
    frames: np.ndarray,
    config: BeamConfig,
    lm=None,
    chunk_size: Optional[int] = None,
) -> DecodeResult:
    """
    Decode one utterance; with `chunk_size` the frames are fed incrementally.

    Raises:
        ContractError: No frames
        VocabularyMismatchError: LM and model disagree on the vocabulary
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractError(f"decode_utterance needs a non-empty T x F frame matrix, got shape {frames.shape}")
    decoder = StreamingDecoder(model, config, lm)
    if chunk_size is None or chunk_size >= frames.shape[0]:
        decoder.accept_frames(frames)
    else:
        for start in range(0, frames.shape[0], chunk_size):
            decoder.accept_frames(frames[start:start + chunk_size])
    return decoder.finalize()


def rescore_lst(model: LSTransducerModel, frames: np.ndarray, tokens: Sequence[int], with_eos: bool = True) -> float:
    """
    Recompute S_lst of a label sequence from scratch (all frames at once).

    Uses the same per-step path as decode_utterance, so a finished
    hypothesis's accumulated s_lst is reproduced exactly.
    """
    view = UtteranceView(model)
    view.extend(frames)
    view.close()
    seq = [SOS_ID] + [int(t) for t in tokens] + ([EOS_ID] if with_eos else [])
    total = 0.0
    for i in range(len(seq) - 1):
        boundary = view.boundary(i + 1)
        total = total + view.lst_logprobs(seq[: i + 1], i, boundary)[seq[i + 1]]
    return float(total)


# ==============================================================================
# N-BEST FILES
# ==============================================================================

@dataclass
class NBestEntry:
    utt_id: str
    rank: int
    score: float
    s_lst: float
    s_ctc: float
    tokens: List[int]
    boundaries: List[int]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_nbest(out: TextIO, utt_id: str, result: DecodeResult) -> None:
    """One line per hypothesis: utt_id, rank, S, S_lst, S_ctc, tokens, boundaries (tab-separated)."""
    for rank, hyp in enumerate(result.nbest, start=1):
        fields_ = [
            utt_id,
            str(rank),
            _fmt(hyp.score),
            _fmt(hyp.s_lst),
            _fmt(hyp.s_ctc),
            " ".join(str(t) for t in hyp.labels),
            ",".join(str(b) for b in hyp.boundaries),
        ]
        out.write("\t".join(fields_) + "\n")


def read_nbest(path: str) -> Dict[str, List[NBestEntry]]:
    """Parse an n-best file back into entries grouped by utterance, in file order."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"n-best file not found: {path}")
    grouped: Dict[str, List[NBestEntry]] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        try:
            entry = NBestEntry(
                utt_id=parts[0],
                rank=int(parts[1]),
                score=float(parts[2]),
                s_lst=float(parts[3]),
                s_ctc=float(parts[4]),
                tokens=[int(t) for t in parts[5].split()],
                boundaries=[int(b) for b in parts[6].split(",") if b],
            )
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        grouped.setdefault(entry.utt_id, []).append(entry)
    return grouped


def best_tokens(nbest: Dict[str, List[NBestEntry]]) -> Dict[str, List[int]]:
    """1-best token sequence per utterance (lowest rank)."""
    return {utt: min(entries, key=lambda e: e.rank).tokens for utt, entries in nbest.items()}
