#!/usr/bin/env python3
"""
Composite-loss training, LM pretraining and text-only adaptation.

Training loss of one utterance with L target tokens:

    total = gamma * L_ctc + (1 - gamma) * L_ce + mu * L_qua * L

L_ce is the teacher-forced cross entropy of the joint network over positions
1..L (plus one [eos] position whose boundary is T when `train_eos` is on),
L_ctc the CTC loss of the encoder branch and L_qua the quantity loss of the
weight and phone channels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .alignment import (
    AlignmentPlan,
    aif_extract,
    cif_integrate,
    cif_scale,
    frame_weights,
    plan_alignment,
    quantity_loss,
)
from .autodiff import (
    ParamStore,
    Value,
    add,
    backward,
    concat,
    constant,
    cross_entropy,
    masked_fill,
    scale,
    slice_rows,
)
from .config import ModelConfig, TrainConfig
from .constants import BLANK_ID, EOS_ID, FINAL_CHECKPOINT_NAME, LOG_SENTINEL, METRICS_LOG_NAME, SOS_ID
from .ctc import ctc_loss, ctc_posteriors
from .dataset import Utterance, write_metrics_csv
from .errors import ContractError, NumericError
from .nn_blocks import LSTransducerModel, TokenLM, prediction_network_forward
from .seeding import named_rng

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """The total loss node and its parts (ce, ctc and qua unscaled)."""
    total: Value
    ce: Value
    ctc: Value
    qua: Value
    ctc_feasible: bool
    plan: AlignmentPlan
    L: int

    @property
    def alpha_sum(self) -> float:
        return self.plan.total

    @property
    def count_error(self) -> float:
        return abs(self.alpha_sum - self.L)


@dataclass
class EpochMetrics:
    epoch: int
    total: float
    ce: float
    ctc: float
    qua: float
    count_error: float
    skipped: int = 0

    def as_row(self) -> Dict[str, float]:
        return {
            "epoch": self.epoch,
            "total": self.total,
            "ce": self.ce,
            "ctc": self.ctc,
            "qua": self.qua,
            "count_error": self.count_error,
            "skipped": self.skipped,
        }


@dataclass
class TrainReport:
    history: List[EpochMetrics] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


@dataclass
class LMEpochMetrics:
    epoch: int
    nll: float
    perplexity: float

    def as_row(self) -> Dict[str, float]:
        return {"epoch": self.epoch, "nll": self.nll, "perplexity": self.perplexity}


def blank_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[:, BLANK_ID] = True
    return mask


def _label_reprs(model: LSTransducerModel, values: Value, alpha: Value, queries: Value, plan: AlignmentPlan,
                 L: int, positions: int) -> Value:
    cfg = model.cfg
    if cfg.alignment == "aif":
        bounds = list(plan.boundaries)
        if positions > L:
            bounds = bounds + [plan.T]
        return aif_extract(values, queries, bounds, scale_qk=cfg.aif_scale_qk, mode="parallel").C
    C = cif_integrate(values, cif_scale(alpha, L), mode="train").C
    if C.shape[0] > L:
        C = slice_rows(C, 0, L)
    pad = positions - C.shape[0]
    if pad > 0:
        # [eos] (and any unfired label) sees no acoustic evidence
        C = concat([C, constant(np.zeros((pad, C.shape[1])))], axis=0)
    return C


def lst_loss(model: LSTransducerModel, utt: Utterance, cfg: TrainConfig) -> LossBreakdown:
    """
    Teacher-forced loss of one utterance.

    Raises:
        ContractError: Invalid utterance (no tokens, blank or out-of-range ids)
    """
    tokens = [int(t) for t in utt.tokens]
    L = len(tokens)
    if L < 1:
        raise ContractError(f"{utt.utt_id}: needs at least one token")
    model.vocab.check_prediction_input(tokens)

    enc = model.encoder_forward(utt.feats)
    alpha, w_phone = frame_weights(enc)
    ctc = ctc_loss(ctc_posteriors(model.ctc_logits(enc)), tokens)
    qua = quantity_loss(alpha, w_phone, L, max(utt.phone_count, 1))
    plan = plan_alignment(alpha, w_phone, L)

    pred = model.prediction_network_forward([SOS_ID] + tokens)
    positions = L + 1 if cfg.train_eos else L
    targets = tokens + [EOS_ID] if cfg.train_eos else tokens
    queries = slice_rows(pred.D_inter, 0, positions)
    C = _label_reprs(model, model.aif_values(enc), alpha, queries, plan, L, positions)
    logits = model.joint_logits(C, pred.H_pre)
    ce = cross_entropy(masked_fill(logits, blank_mask(logits.shape), LOG_SENTINEL), targets)

    total = scale(qua, cfg.mu * L)
    if cfg.gamma < 1.0:
        total = add(scale(ce, 1.0 - cfg.gamma), total)
    if cfg.gamma > 0.0:
        total = add(scale(ctc.loss, cfg.gamma), total)
    return LossBreakdown(
        total=total,
        ce=ce,
        ctc=ctc.loss,
        qua=qua,
        ctc_feasible=ctc.feasible,
        plan=plan,
        L=L,
    )


def learning_rate(base: float, step: int, warmup: int) -> float:
    """Linear warmup to `base`, then inverse square-root decay."""
    if warmup <= 0:
        return base
    step = max(step, 1)
    return base * min(step / warmup, math.sqrt(warmup / step))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: LSTransducerModel,
    dataset: Sequence[Utterance],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
) -> TrainReport:
    """
    Optimise the composite loss with adaptive-moment steps.

    Each epoch visits the utterances in a permutation drawn from the
    "shuffle" stream; gradients of a batch are summed in utterance order.
    With `out_dir`, a checkpoint is written after every epoch together with
    the metrics log and final.lstk.

    Raises:
        ContractError: Empty dataset
        NumericError: A non-finite loss; the weights are rolled back to the
            last completed epoch (and saved as final.lstk when out_dir is set)
    """
    if not dataset:
        raise ContractError("train needs a non-empty dataset")
    rng = named_rng(cfg.seed, "shuffle")
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        good = model.params.snapshot()
        sums = np.zeros(5)
        seen = 0
        skipped = 0
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            model.params.zero_grad()
            parts = []
            for idx in batch:
                utt = dataset[int(idx)]
                res = lst_loss(model, utt, cfg)
                if cfg.gamma > 0 and not res.ctc_feasible:
                    logger.warning("Skipping %s: CTC target infeasible with %d frames", utt.utt_id, utt.T)
                    skipped += 1
                    continue
                value = res.total.item()
                if not math.isfinite(value):
                    _roll_back(model, good, out_dir)
                    raise NumericError(f"non-finite loss {value} at epoch {epoch} on {utt.utt_id}")
                parts.append(res)
            if not parts:
                continue
            for res in parts:
                backward(scale(res.total, 1.0 / len(parts)))
                sums += [res.total.item(), res.ce.item(), res.ctc.item() if res.ctc_feasible else 0.0,
                         res.qua.item(), res.count_error]
                seen += 1
            lr = learning_rate(cfg.learning_rate, model.params.step_count + 1, cfg.warmup_steps)
            model.params.step(lr, clip=cfg.grad_clip)
        means = sums / max(seen, 1)
        metrics = EpochMetrics(epoch, *[float(m) for m in means], skipped=skipped)
        report.history.append(metrics)
        logger.info(
            "epoch %d: total %.4f ce %.4f ctc %.4f qua %.4f |sum(alpha)-L| %.3f",
            epoch, metrics.total, metrics.ce, metrics.ctc, metrics.qua, metrics.count_error,
        )
        if out_dir is not None:
            report.checkpoints.append(model.save(out_dir, f"epoch{epoch:03d}.lstk"))
            write_metrics_csv(str(Path(out_dir) / METRICS_LOG_NAME), [m.as_row() for m in report.history])
    if out_dir is not None:
        report.checkpoints.append(model.save(out_dir, FINAL_CHECKPOINT_NAME))
        write_metrics_csv(str(Path(out_dir) / METRICS_LOG_NAME), [m.as_row() for m in report.history])
    return report


def _roll_back(model, snapshot: Dict[str, np.ndarray], out_dir: Optional[str]) -> None:
    model.params.restore(snapshot)
    if out_dir is not None:
        model.save(out_dir, FINAL_CHECKPOINT_NAME)
        logger.error("Diverged; last good weights written to %s", Path(out_dir) / FINAL_CHECKPOINT_NAME)


# ==============================================================================
# LANGUAGE-MODEL OBJECTIVE
# ==============================================================================

def lm_nll(params: ParamStore, cfg: ModelConfig, tokens: Sequence[int]) -> Value:
    """
    Next-token negative log-likelihood of tokens followed by [eos], given [sos].

    The prediction network scores the whole vocabulary here (blank included),
    so an untrained network sits near perplexity V.
    """
    seq = [int(t) for t in tokens]
    out = prediction_network_forward(params, cfg, [SOS_ID] + seq)
    return cross_entropy(out.lm_logits, seq + [EOS_ID])


def perplexity(lm: TokenLM, corpus: Sequence[Sequence[int]]) -> float:
    """exp(mean per-target NLL), [eos] targets included."""
    total = 0.0
    count = 0
    for seq in corpus:
        total += lm_nll(lm.params, lm.cfg, seq).item()
        count += len(seq) + 1
    if count == 0:
        raise ContractError("perplexity needs a non-empty corpus")
    return math.exp(total / count)


def _train_lm(
    params: ParamStore,
    model_cfg: ModelConfig,
    corpus: Sequence[Sequence[int]],
    cfg: TrainConfig,
    epochs: int,
    trainable: Optional[Callable[[str], bool]],
    stream: str,
) -> List[LMEpochMetrics]:
    rng = named_rng(cfg.seed, stream)
    history = []
    for epoch in range(1, epochs + 1):
        good = params.snapshot()
        nll = 0.0
        targets = 0
        for batch in _batches(len(corpus), cfg.batch_size, rng):
            params.zero_grad()
            losses = [lm_nll(params, model_cfg, corpus[int(i)]) for i in batch]
            for loss, idx in zip(losses, batch):
                value = loss.item()
                if not math.isfinite(value):
                    params.restore(good)
                    raise NumericError(f"non-finite LM loss {value} at epoch {epoch}")
                nll += value
                targets += len(corpus[int(idx)]) + 1
                backward(scale(loss, 1.0 / len(losses)))
            lr = learning_rate(cfg.learning_rate, params.step_count + 1, cfg.warmup_steps)
            params.step(lr, trainable=trainable, clip=cfg.grad_clip)
        mean = nll / max(targets, 1)
        history.append(LMEpochMetrics(epoch, mean, math.exp(mean)))
        logger.info("%s epoch %d: nll/token %.4f perplexity %.3f", stream, epoch, mean, math.exp(mean))
    return history


def pretrain_lm(
    model_cfg: ModelConfig,
    corpus: Sequence[Sequence[int]],
    cfg: TrainConfig,
    init: Optional[TokenLM] = None,
    epochs: Optional[int] = None,
):
    """
    Train the prediction network as a standalone LM on a text corpus.

    With `init`, training continues from a copy of that LM (how a target-domain
    LM is fine-tuned from a source LM); otherwise weights come from the "init"
    stream. The result loads into an LSTransducerModel path for path.

    Returns:
        (TokenLM, list of LMEpochMetrics)
    """
    if not corpus:
        raise ContractError("pretrain_lm needs a non-empty corpus")
    if init is not None:
        lm = TokenLM(init.cfg, init.params.copy())
    else:
        lm = TokenLM.initialise(model_cfg, cfg.seed)
    history = _train_lm(lm.params, lm.cfg, corpus, cfg, cfg.lm_epochs if epochs is None else epochs, None, "shuffle.lm")
    return lm, history


def adaptation_trainable(model_cfg: ModelConfig, freeze_below: Optional[int]) -> Callable[[str], bool]:
    """
    Predicate for parameters adaptation may change.

    Trainable: prediction-network layers with index >= freeze_below, the final
    layer norm and the LM classifier. Everything else (encoder, AIF, joint,
    embedding and the lower layers) stays fixed.
    """
    cut = model_cfg.pred_tap_layer if freeze_below is None else freeze_below
    if cut > model_cfg.pred_layers:
        raise ContractError(f"freeze_below {cut} exceeds the {model_cfg.pred_layers} prediction layers")

    def _trainable(path: str) -> bool:
        if path.startswith("pred.ln_f.") or path.startswith("pred.lm."):
            return True
        if path.startswith("pred.layer"):
            index = int(path[len("pred.layer"):].split(".", 1)[0])
            return index >= cut
        return False

    return _trainable


def adapt_prediction_network(
    model: LSTransducerModel,
    corpus: Sequence[Sequence[int]],
    cfg: TrainConfig,
    epochs: Optional[int] = None,
):
    """
    Fine-tune the upper prediction-network layers on target-domain text.

    Returns:
        (the same model, adapted in place; list of LMEpochMetrics)
    """
    if not corpus:
        raise ContractError("adaptation needs a non-empty target corpus")
    trainable = adaptation_trainable(model.cfg, cfg.freeze_below)
    history = _train_lm(model.params, model.cfg, corpus, cfg,
                        cfg.adapt_epochs if epochs is None else epochs, trainable, "shuffle.adapt")
    return model, history
