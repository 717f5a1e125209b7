#!/usr/bin/env python3
"""
Token error rate: Levenshtein distance over token ids, micro-averaged.

    TER = sum_u edit_distance(ref_u, hyp_u) / sum_u len(ref_u)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

from .errors import ContractError, DataError


@dataclass
class EvalResult:
    """
    Corpus-level token error.

    Attributes:
        errors: Summed substitutions + insertions + deletions
        ref_tokens: Summed reference length
        utterances: Number of scored pairs
        missing: Reference ids without a hypothesis (scored as all deletions)
    """
    errors: int
    ref_tokens: int
    utterances: int
    missing: int = 0

    @property
    def token_error_rate(self) -> float:
        if self.ref_tokens == 0:
            return 0.0
        return self.errors / self.ref_tokens


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """
    Minimum number of substitutions, insertions and deletions turning hyp into ref.

    Single-row dynamic programme over the shorter sequence.

    Example:
        >>> edit_distance([3, 4, 5], [3, 5])
        1
    """
    s1, s2 = list(ref), list(hyp)
    if len(s1) > len(s2):
        s1, s2 = s2, s1
    distances = list(range(len(s1) + 1))
    for i2, c2 in enumerate(s2):
        row = [i2 + 1]
        for i1, c1 in enumerate(s1):
            if c1 == c2:
                row.append(distances[i1])
            else:
                row.append(1 + min(distances[i1], distances[i1 + 1], row[-1]))
        distances = row
    return distances[-1]


def token_error_rate(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> EvalResult:
    """Micro-averaged error over (reference, hypothesis) pairs."""
    errors = 0
    ref_tokens = 0
    count = 0
    for ref, hyp in pairs:
        errors += edit_distance(ref, hyp)
        ref_tokens += len(ref)
        count += 1
    return EvalResult(errors=errors, ref_tokens=ref_tokens, utterances=count)


def evaluate(references: Dict[str, List[int]], hypotheses: Dict[str, List[int]]) -> EvalResult:
    """
    Score hypotheses against references keyed by utterance id.

    A reference without a hypothesis counts as an empty output. A hypothesis
    whose id has no reference is a data error.
    """
    extra = sorted(set(hypotheses) - set(references))
    if extra:
        raise DataError(f"hypotheses for unknown utterances: {extra[:3]}")
    if not references:
        raise ContractError("evaluate needs at least one reference")
    ids = sorted(references)
    result = token_error_rate((references[u], hypotheses.get(u, [])) for u in ids)
    result.missing = sum(1 for u in ids if u not in hypotheses)
    return result
