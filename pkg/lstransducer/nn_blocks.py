#!/usr/bin/env python3
"""
Toy-scale encoder, prediction network and joint network.

Dataflow:

    frames ──> encoder ──> E (T x d)
                           ├─ columns 0..d-3  content  ──> CTC classifier, AIF keys/values
                           ├─ column d-2      phone channel w
                           └─ column d-1      weight channel alpha

    [sos] y_1..y_N ──> prediction network ──> D_inter (tap layer, AIF queries)
                                          ├─> H_pre (final layer)
                                          └─> lm_logits (standalone LM)

    joint_logits(C, H_pre) = C @ joint.wa + H_pre @ joint.wb + joint.b

Both self-attention stacks are pre-layer-norm and causally masked, so row t
never reads inputs after t.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import (
    ParamStore,
    Value,
    add,
    constant,
    embedding,
    layer_norm,
    masked_fill,
    matmul,
    relu,
    row_softmax,
    scale,
    slice_cols,
    slice_rows,
    tanh,
    transpose,
)
from .config import ModelConfig, load_settings, save_model_config
from .constants import (
    BLANK_ID,
    EOS_ID,
    FINAL_CHECKPOINT_NAME,
    LOG_SENTINEL,
    MODEL_CONFIG_NAME,
    NUM_RESERVED_TOKENS,
    SOS_ID,
    UNK_ID,
)
from .errors import ContractError, DimensionError, VocabularyMismatchError
from .seeding import named_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Vocabulary:
    """Token ids: blank=0, unk=1, sos/eos=2, normal tokens 3..V-1."""
    size: int
    blank: int = BLANK_ID
    unk: int = UNK_ID
    sos: int = SOS_ID
    eos: int = EOS_ID

    def __post_init__(self):
        if self.size < NUM_RESERVED_TOKENS + 1:
            raise ContractError(f"vocabulary needs at least {NUM_RESERVED_TOKENS + 1} ids, got {self.size}")

    @property
    def normal_tokens(self) -> List[int]:
        return list(range(NUM_RESERVED_TOKENS, self.size))

    def check_ids(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if not (0 <= tok < self.size):
                raise ContractError(f"token id {tok} outside vocabulary of size {self.size}")

    def check_prediction_input(self, tokens: Sequence[int]) -> None:
        """Prediction-network input must not contain blank."""
        self.check_ids(tokens)
        if any(t == self.blank for t in tokens):
            raise ContractError("blank id is not a valid prediction-network input")


@dataclass
class EncoderOutput:
    """T x d encoder frames with the two weight channels at the end."""
    E: Value

    @property
    def T(self) -> int:
        return self.E.shape[0]

    @property
    def d(self) -> int:
        return self.E.shape[1]

    def content(self) -> Value:
        return slice_cols(self.E, 0, self.d - 2)

    def phone_channel(self) -> Value:
        return slice_cols(self.E, self.d - 2, self.d - 1)

    def weight_channel(self) -> Value:
        return slice_cols(self.E, self.d - 1, self.d)


@dataclass
class PredNetOutput:
    """(N+1)-row outputs of the prediction network."""
    D_inter: Value
    H_pre: Value
    lm_logits: Value


# ==============================================================================
# PARAMETER INITIALISATION
# ==============================================================================

def _gauss(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def _init_stack(params: ParamStore, rng: np.random.Generator, prefix: str, layers: int, width: int,
                ff: int, std: float) -> None:
    for i in range(layers):
        base = f"{prefix}.layer{i}"
        params.add(f"{base}.ln1.g", np.ones((1, width)))
        params.add(f"{base}.ln1.b", np.zeros((1, width)))
        for name in ("wq", "wk", "wv", "wo"):
            params.add(f"{base}.attn.{name}", _gauss(rng, (width, width), std))
        params.add(f"{base}.ln2.g", np.ones((1, width)))
        params.add(f"{base}.ln2.b", np.zeros((1, width)))
        params.add(f"{base}.ff.w1", _gauss(rng, (width, ff), std))
        params.add(f"{base}.ff.b1", np.zeros((1, ff)))
        params.add(f"{base}.ff.w2", _gauss(rng, (ff, width), std))
        params.add(f"{base}.ff.b2", np.zeros((1, width)))
    params.add(f"{prefix}.ln_f.g", np.ones((1, width)))
    params.add(f"{prefix}.ln_f.b", np.zeros((1, width)))


def init_prediction_params(cfg: ModelConfig, params: ParamStore, rng: np.random.Generator) -> None:
    """Add the `pred.*` parameters (shared by the transducer and the standalone LM)."""
    params.add("pred.embed", _gauss(rng, (cfg.vocab_size, cfg.model_dim), cfg.init_std))
    _init_stack(params, rng, "pred", cfg.pred_layers, cfg.model_dim, cfg.ff_dim, cfg.init_std)
    params.add("pred.lm.w", _gauss(rng, (cfg.model_dim, cfg.vocab_size), cfg.classifier_init_std))
    params.add("pred.lm.b", np.zeros((1, cfg.vocab_size)))


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """
    Draw every transducer parameter from the "init" stream.

    Weights are Gaussian (init_std, classifiers classifier_init_std), biases
    zero and layer-norm gains one. Creation order is fixed, so equal seeds
    give bit-identical stores.
    """
    rng = named_rng(seed, "init")
    params = ParamStore()
    h = cfg.model_dim
    params.add("enc.in.w", _gauss(rng, (cfg.feat_dim * cfg.encoder_context, h), cfg.init_std))
    params.add("enc.in.b", np.zeros((1, h)))
    _init_stack(params, rng, "enc", cfg.encoder_layers, h, cfg.ff_dim, cfg.init_std)
    params.add("enc.out.w", _gauss(rng, (h, cfg.encoder_dim), cfg.init_std))
    params.add("enc.out.b", np.zeros((1, cfg.encoder_dim)))
    params.add("ctc.w", _gauss(rng, (cfg.content_dim, cfg.vocab_size), cfg.classifier_init_std))
    params.add("ctc.b", np.zeros((1, cfg.vocab_size)))
    params.add("aif.proj.w", _gauss(rng, (cfg.content_dim, cfg.query_dim), cfg.init_std))
    params.add("aif.proj.b", np.zeros((1, cfg.query_dim)))
    init_prediction_params(cfg, params, rng)
    params.add("joint.wa", _gauss(rng, (cfg.query_dim, cfg.vocab_size), cfg.classifier_init_std))
    if not cfg.tie_joint_lm:
        params.add("joint.wb", _gauss(rng, (h, cfg.vocab_size), cfg.classifier_init_std))
    params.add("joint.b", np.zeros((1, cfg.vocab_size)))
    return params


# ==============================================================================
# BUILDING BLOCKS
# ==============================================================================

def sinusoidal_positions(rows: int, width: int) -> np.ndarray:
    pos = np.arange(rows, dtype=np.float64)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(rows: int) -> np.ndarray:
    """True above the diagonal (positions a row may not attend to)."""
    return np.triu(np.ones((rows, rows), dtype=bool), k=1)


def linear(params: ParamStore, prefix: str, x: Value) -> Value:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def causal_block(params: ParamStore, prefix: str, x: Value) -> Value:
    """Pre-LN single-head causal self-attention followed by a ReLU feed-forward."""
    width = x.shape[1]
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = matmul(h, params[f"{prefix}.attn.wq"])
    k = matmul(h, params[f"{prefix}.attn.wk"])
    v = matmul(h, params[f"{prefix}.attn.wv"])
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(width))
    attn = row_softmax(masked_fill(scores, causal_mask(x.shape[0]), LOG_SENTINEL))
    x = add(x, matmul(matmul(attn, v), params[f"{prefix}.attn.wo"]))
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    ff = matmul(relu(add(matmul(h, params[f"{prefix}.ff.w1"]), params[f"{prefix}.ff.b1"])), params[f"{prefix}.ff.w2"])
    return add(x, add(ff, params[f"{prefix}.ff.b2"]))


def stack_context(frames: np.ndarray, context: int) -> np.ndarray:
    """Row t holds frames t, t-1, ..., t-context+1 (zeros before the start)."""
    T, F = frames.shape
    out = np.zeros((T, F * context))
    for c in range(context):
        out[c:, c * F:(c + 1) * F] = frames[:T - c] if c < T else 0.0
    return out


# ==============================================================================
# NETWORKS
# ==============================================================================

def encoder_forward(params: ParamStore, cfg: ModelConfig, frames: np.ndarray) -> EncoderOutput:
    """
    Causal toy encoder: stacked past frames -> tanh projection -> positions ->
    causal self-attention layers -> linear to d.

    Raises:
        ContractError: Empty input
        DimensionError: Feature dimension differs from the config
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractError(f"encoder needs a non-empty T x F frame matrix, got shape {frames.shape}")
    if frames.shape[1] != cfg.feat_dim:
        raise DimensionError("encoder_forward", frames.shape, (frames.shape[0], cfg.feat_dim), "feature dim")
    x = constant(stack_context(frames, cfg.encoder_context))
    x = tanh(linear(params, "enc.in", x))
    x = add(x, constant(sinusoidal_positions(frames.shape[0], cfg.model_dim)))
    for i in range(cfg.encoder_layers):
        x = causal_block(params, f"enc.layer{i}", x)
    x = layer_norm(x, params["enc.ln_f.g"], params["enc.ln_f.b"])
    return EncoderOutput(linear(params, "enc.out", x))


def prediction_network_forward(params: ParamStore, cfg: ModelConfig, tokens: Sequence[int]) -> PredNetOutput:
    """
    Run the prediction network on [sos] y_1..y_N.

    Row n depends on tokens[0..n] only. D_inter is the residual stream after
    `pred_tap_layer` layers; H_pre is the final layer-normed output.

    Raises:
        ContractError: Empty input or a blank id in the input
    """
    tokens = list(tokens)
    if not tokens:
        raise ContractError("prediction network needs at least the [sos] token")
    Vocabulary(cfg.vocab_size).check_prediction_input(tokens)
    x = embedding(params["pred.embed"], tokens)
    x = add(x, constant(sinusoidal_positions(len(tokens), cfg.model_dim)))
    d_inter: Optional[Value] = None
    for i in range(cfg.pred_layers):
        x = causal_block(params, f"pred.layer{i}", x)
        if i + 1 == cfg.pred_tap_layer:
            d_inter = x
    h_pre = layer_norm(x, params["pred.ln_f.g"], params["pred.ln_f.b"])
    return PredNetOutput(D_inter=d_inter, H_pre=h_pre, lm_logits=linear(params, "pred.lm", h_pre))


def joint_logits(params: ParamStore, cfg: ModelConfig, C: Value, H_pre: Value) -> Value:
    """
    logits[j] = C[j] @ wa + H_pre[j] @ wb + b, for the first L = rows(C) rows of H_pre.

    The C-side classifier carries no bias, so the map is additive up to b:
    joint(C, H) = joint(C, 0) + joint(0, H) - b.
    """
    L = C.shape[0]
    if H_pre.shape[0] < L:
        raise ContractError(f"joint_logits: C has {L} rows but H_pre only {H_pre.shape[0]}")
    if H_pre.shape[0] > L:
        H_pre = slice_rows(H_pre, 0, L)
    wb = params["pred.lm.w"] if cfg.tie_joint_lm else params["joint.wb"]
    return add(add(matmul(C, params["joint.wa"]), matmul(H_pre, wb)), params["joint.b"])


class LSTransducerModel:
    """Parameters plus config, with the forward passes bound to them."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self.vocab = Vocabulary(cfg.vocab_size)

    @classmethod
    def initialise(cls, cfg: ModelConfig, seed: int) -> "LSTransducerModel":
        return cls(cfg, init_params(cfg, seed))

    def encoder_forward(self, frames: np.ndarray) -> EncoderOutput:
        return encoder_forward(self.params, self.cfg, frames)

    def prediction_network_forward(self, tokens: Sequence[int]) -> PredNetOutput:
        return prediction_network_forward(self.params, self.cfg, tokens)

    def joint_logits(self, C: Value, H_pre: Value) -> Value:
        return joint_logits(self.params, self.cfg, C, H_pre)

    def ctc_logits(self, enc: EncoderOutput) -> Value:
        """T x V classifier logits over the content columns."""
        return linear(self.params, "ctc", enc.content())

    def aif_values(self, enc: EncoderOutput) -> Value:
        """FC(content): the shared key/value rows for AIF (and CIF) integration."""
        return linear(self.params, "aif.proj", enc.content())

    def load_prediction_network(self, lm_params: ParamStore) -> None:
        """Copy every `pred.*` entry from an LM store, path for path."""
        paths = self.params.paths("pred.")
        missing = [p for p in paths if p not in lm_params]
        if missing:
            raise ContractError(f"LM checkpoint lacks prediction-network entries: {missing[:3]}")
        if lm_params["pred.embed"].shape[0] != self.cfg.vocab_size:
            raise VocabularyMismatchError(
                f"LM vocabulary {lm_params['pred.embed'].shape[0]} != model vocabulary {self.cfg.vocab_size}"
            )
        for p in paths:
            self.params.assign(p, lm_params[p].data)

    def save(self, directory: str, name: str = FINAL_CHECKPOINT_NAME) -> Path:
        return _save(self.cfg, self.params, directory, name)

    @classmethod
    def load(cls, directory: str, name: str = FINAL_CHECKPOINT_NAME) -> "LSTransducerModel":
        cfg, params = _load(directory, name)
        model = cls(cfg, params)
        for p in init_params(cfg, 0).paths():
            if p not in params:
                raise ContractError(f"checkpoint {name} is not a transducer checkpoint (missing {p})")
        return model


class TokenLM:
    """
    The prediction network used on its own as a next-token language model.

    Its store holds only `pred.*` entries, so it loads into an
    LSTransducerModel path for path.
    """

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self.vocab = Vocabulary(cfg.vocab_size)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @classmethod
    def initialise(cls, cfg: ModelConfig, seed: int) -> "TokenLM":
        params = ParamStore()
        init_prediction_params(cfg, params, named_rng(seed, "init"))
        return cls(cfg, params)

    @classmethod
    def from_model(cls, model: LSTransducerModel) -> "TokenLM":
        params = ParamStore()
        for p in model.params.paths("pred."):
            params.add(p, model.params[p].data.copy())
        return cls(model.cfg, params)

    def forward(self, tokens: Sequence[int]) -> PredNetOutput:
        return prediction_network_forward(self.params, self.cfg, tokens)

    def next_token_logprobs(self, tokens: Sequence[int]) -> np.ndarray:
        """log p(. | tokens) over the whole vocabulary, from the last row."""
        logits = self.forward(tokens).lm_logits.data[-1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    def save(self, directory: str, name: str = FINAL_CHECKPOINT_NAME) -> Path:
        return _save(self.cfg, self.params, directory, name)

    @classmethod
    def load(cls, directory: str, name: str = FINAL_CHECKPOINT_NAME) -> "TokenLM":
        cfg, params = _load(directory, name)
        if "pred.embed" not in params:
            raise ContractError(f"checkpoint {name} holds no prediction network")
        lm_params = ParamStore()
        for p in params.paths("pred."):
            lm_params.add(p, params[p].data)
        return cls(cfg, lm_params)


def _save(cfg: ModelConfig, params: ParamStore, directory: str, name: str) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_model_config(cfg, str(out / MODEL_CONFIG_NAME))
    params.save(str(out / name))
    return out / name


def _load(directory: str, name: str):
    base = Path(directory)
    cfg = load_settings(str(base / MODEL_CONFIG_NAME)).model
    return cfg, ParamStore.load(str(base / name))
