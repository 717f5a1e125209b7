#!/usr/bin/env python3
"""
Synthetic speech-like task and the dataset / text-corpus file formats.

A "world" is fixed by the seed: every normal token owns a 1-3 sub-unit
("phone") spelling, every phone a random F-dimensional embedding, and two
Markov chains over tokens prefer disjoint successors. An utterance draws N
tokens from its domain's chain and emits, for each token, dur frames equal to
the mean embedding of the token's phones plus Gaussian noise.

Dataset file layout, per utterance:

    utt_id N P T F domain
    y_1 ... y_N
    T lines of F space-separated floats

Text corpus: one space-separated token-id sequence per line.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .config import SynthSpec
from .constants import MAX_PHONES_PER_TOKEN, MIN_PHONES_PER_TOKEN, NUM_RESERVED_TOKENS
from .errors import ContractError, DataError
from .seeding import named_rng

logger = logging.getLogger(__name__)

DOMAINS = ("source", "target")


@dataclass
class Utterance:
    """Frames, target tokens y_1..y_N, phone count P and domain tag."""
    utt_id: str
    feats: np.ndarray
    tokens: List[int]
    phone_count: int
    domain: str = "source"

    @property
    def N(self) -> int:
        return len(self.tokens)

    @property
    def T(self) -> int:
        return int(self.feats.shape[0])

    def validate(self) -> None:
        if self.N < 1:
            raise ContractError(f"{self.utt_id}: needs at least one token")
        if self.phone_count < self.N:
            raise ContractError(f"{self.utt_id}: phone count {self.phone_count} < token count {self.N}")
        if self.T < self.N:
            raise ContractError(f"{self.utt_id}: {self.T} frames cannot carry {self.N} tokens")


@dataclass
class MarkovChain:
    """First-order chain over the full vocabulary (reserved ids carry no mass)."""
    initial: np.ndarray
    transition: np.ndarray

    def sample(self, rng: np.random.Generator, length: int) -> List[int]:
        V = self.initial.shape[0]
        tokens = [int(rng.choice(V, p=self.initial))]
        for _ in range(length - 1):
            tokens.append(int(rng.choice(V, p=self.transition[tokens[-1]])))
        return tokens


def true_sequence_logprob(chain: MarkovChain, tokens: Sequence[int]) -> float:
    """log P(tokens) under the generating chain (no length model)."""
    if not tokens:
        return 0.0
    total = math.log(chain.initial[tokens[0]])
    for a, b in zip(tokens[:-1], tokens[1:]):
        total += math.log(chain.transition[a, b])
    return total


@dataclass
class SynthWorld:
    """Everything fixed by the seed: phone spellings, embeddings, chains, duration profiles."""
    spec: SynthSpec
    lexicon: Dict[int, Tuple[int, ...]]
    phone_embeddings: np.ndarray
    chains: Dict[str, MarkovChain]
    durations: Dict[str, np.ndarray] = field(default_factory=dict)

    def template(self, token: int) -> np.ndarray:
        return self.phone_embeddings[list(self.lexicon[token])].mean(axis=0)

    def duration_values(self) -> np.ndarray:
        return np.arange(self.spec.min_duration, self.spec.max_duration + 1)


def _duration_profiles(spec: SynthSpec) -> Dict[str, np.ndarray]:
    n = spec.max_duration - spec.min_duration + 1
    centre = (n - 1) / 2.0
    source = (centre + 1.0) - np.abs(np.arange(n) - centre)
    target = np.arange(1, n + 1, dtype=np.float64)
    return {"source": source / source.sum(), "target": target / target.sum()}


def _build_chains(spec: SynthSpec, rng: np.random.Generator) -> Dict[str, MarkovChain]:
    V = spec.vocab_size
    normal = np.arange(NUM_RESERVED_TOKENS, V)
    initial = np.zeros(V)
    initial[normal] = 1.0 / normal.size
    rows = {d: np.zeros((V, V)) for d in DOMAINS}
    if normal.size == 1:
        for d in DOMAINS:
            rows[d][normal[0], normal[0]] = 1.0
        return {d: MarkovChain(initial.copy(), rows[d]) for d in DOMAINS}
    k = min(spec.preferred_successors, (normal.size - 1) // 2) or 1
    for a in normal:
        others = normal[normal != a]
        picks = rng.permutation(others)
        preferred = {"source": picks[:k], "target": picks[k:2 * k] if picks.size >= 2 * k else picks[:k]}
        for d in DOMAINS:
            rest = np.setdiff1d(others, preferred[d])
            off = spec.off_preference_mass if rest.size else 0.0
            rows[d][a, preferred[d]] = (1.0 - off) / preferred[d].size
            if rest.size:
                rows[d][a, rest] = off / rest.size
    return {d: MarkovChain(initial.copy(), rows[d]) for d in DOMAINS}


def build_world(spec: SynthSpec, seed: int) -> SynthWorld:
    """Draw the lexicon, phone embeddings and both chains from the "vocab" stream."""
    rng = named_rng(seed, "vocab")
    lexicon = {}
    for tok in range(NUM_RESERVED_TOKENS, spec.vocab_size):
        n = int(rng.integers(MIN_PHONES_PER_TOKEN, MAX_PHONES_PER_TOKEN + 1))
        lexicon[tok] = tuple(int(p) for p in rng.choice(spec.num_phones, size=n, replace=False))
    embeddings = rng.normal(0.0, 1.0, size=(spec.num_phones, spec.feat_dim))
    chains = _build_chains(spec, rng)
    return SynthWorld(spec=spec, lexicon=lexicon, phone_embeddings=embeddings, chains=chains,
                      durations=_duration_profiles(spec))


def make_utterance(world: SynthWorld, tokens: Sequence[int], rng: np.random.Generator, domain: str,
                   utt_id: str) -> Utterance:
    """Render a token sequence into frames (one duration draw and noise per token)."""
    spec = world.spec
    blocks = []
    phones = 0
    for tok in tokens:
        dur = int(rng.choice(world.duration_values(), p=world.durations[domain]))
        frames = np.repeat(world.template(tok)[None, :], dur, axis=0)
        if spec.noise > 0:
            frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
        blocks.append(frames)
        phones += len(world.lexicon[tok])
    return Utterance(utt_id=utt_id, feats=np.vstack(blocks), tokens=list(tokens), phone_count=phones, domain=domain)


def synth_dataset(spec: SynthSpec, seed: int, count: int, domain: str = "source", split: str = "train") -> List[Utterance]:
    """
    Generate `count` utterances of one domain.

    The world depends on the seed only; the utterances also depend on domain
    and split, so train and test sets of one seed share the vocabulary.
    """
    if domain not in DOMAINS:
        raise ContractError(f"domain must be one of {DOMAINS}, got {domain!r}")
    world = build_world(spec, seed)
    rng = named_rng(seed, f"data.{domain}.{split}")
    chain = world.chains[domain]
    utts = []
    for i in range(count):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = chain.sample(rng, n)
        utts.append(make_utterance(world, tokens, rng, domain, f"{domain}-{split}-{i:05d}"))
    logger.info("Generated %d %s/%s utterances (seed %d)", count, domain, split, seed)
    return utts


def synth_text(spec: SynthSpec, seed: int, count: int, domain: str = "source", split: str = "train") -> List[List[int]]:
    """Text-only token sequences from a domain's chain (own random stream)."""
    if domain not in DOMAINS:
        raise ContractError(f"domain must be one of {DOMAINS}, got {domain!r}")
    world = build_world(spec, seed)
    rng = named_rng(seed, f"text.{domain}.{split}")
    chain = world.chains[domain]
    return [chain.sample(rng, int(rng.integers(spec.min_tokens, spec.max_tokens + 1))) for _ in range(count)]


# ==============================================================================
# FILE FORMATS
# ==============================================================================

def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(path: str, utts: Iterable[Utterance]) -> None:
    lines = []
    for u in utts:
        lines.append(f"{u.utt_id} {u.N} {u.phone_count} {u.T} {u.feats.shape[1]} {u.domain}")
        lines.append(" ".join(str(t) for t in u.tokens))
        lines.extend(" ".join(_fmt(v) for v in row) for row in u.feats)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: str) -> List[Utterance]:
    """
    Parse a dataset file.

    Raises:
        DataError: Missing file, malformed header, wrong field counts, bad numbers
    """
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset file not found: {path}")
    lines = p.read_text(encoding="utf-8").splitlines()
    utts = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) != 6:
            raise DataError(f"{path}:{i + 1}: header needs 6 fields (utt_id N P T F domain), got {len(header)}")
        try:
            utt_id, N, P, T, F, domain = header[0], int(header[1]), int(header[2]), int(header[3]), int(header[4]), header[5]
            if i + 1 + T >= len(lines):
                raise DataError(f"{path}:{i + 1}: {utt_id} declares {T} frames but the file ends early")
            tokens = [int(t) for t in lines[i + 1].split()]
            if len(tokens) != N:
                raise DataError(f"{path}:{i + 2}: {utt_id} declares {N} tokens, found {len(tokens)}")
            rows = []
            for k in range(T):
                row = [float(v) for v in lines[i + 2 + k].split()]
                if len(row) != F:
                    raise DataError(f"{path}:{i + 3 + k}: expected {F} values, found {len(row)}")
                rows.append(row)
        except ValueError as e:
            raise DataError(f"{path}:{i + 1}: {e}") from e
        utt = Utterance(utt_id=utt_id, feats=np.array(rows, dtype=np.float64).reshape(T, F),
                        tokens=tokens, phone_count=P, domain=domain)
        try:
            utt.validate()
        except ContractError as e:
            raise DataError(f"{path}:{i + 1}: {e}") from e
        utts.append(utt)
        i += 2 + T
    return utts


def write_text_corpus(path: str, sequences: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(" ".join(str(t) for t in s) + "\n" for s in sequences), encoding="utf-8")


def read_text_corpus(path: str) -> List[List[int]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"text corpus not found: {path}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append([int(t) for t in line.split()])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return out


def corpus_from_dataset(utts: Iterable[Utterance]) -> List[List[int]]:
    return [list(u.tokens) for u in utts]


def write_metrics_csv(path: str, rows: List[Dict[str, float]]) -> None:
    """Comma-separated metrics log, one row per epoch, header from the first row."""
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
