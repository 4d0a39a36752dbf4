"""Shared search types: fusion settings, hypotheses and n-best records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np


class TokenLm(Protocol):
    """Anything that scores the next token given a label prefix.

    ``next_token_logprobs`` returns a vector over all output ids (blank and
    start-of-sentence included, both at ``-inf``).
    """

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class FusionConfig:
    """Shallow-fusion weights.

    ``alpha`` scales the subtracted prior (CTC token prior or transducer
    internal LM); ``beta`` scales the external LM. ``prior`` is only used by
    CTC search: a per-id log prior whose blank entry is a per-frame blank
    log-penalty.
    """

    alpha: float = 0.0
    beta: float = 0.0
    lm: TokenLm | None = None
    prior: np.ndarray | None = None

    @property
    def uses_lm(self) -> bool:
        return self.lm is not None and self.beta != 0.0


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    acoustic: float
    prior: float = 0.0
    lm: float = 0.0

    def sort_key(self):
        # best score first; ties go to the lexicographically smaller token tuple
        return (-self.score, self.tokens)


def combine(acoustic: float, prior: float, lm: float, fusion: FusionConfig | None) -> float:
    if fusion is None:
        return acoustic
    return acoustic - safe_scaled(fusion.alpha, prior) + safe_scaled(fusion.beta, lm)


def rank(hyps: Iterable[Hypothesis]) -> list[Hypothesis]:
    return sorted(hyps, key=Hypothesis.sort_key)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_nbest(utt_id: str, hyps: Sequence[Hypothesis], texts: Sequence[str]) -> list[str]:
    """One tab-separated record per hypothesis:
    id, rank, text, total score, acoustic, prior, external LM."""
    lines = []
    for rank_, (h, text) in enumerate(zip(hyps, texts), start=1):
        if "\t" in text or "\n" in text:
            raise ValueError("hypothesis text may not contain tabs or newlines")
        lines.append("\t".join([utt_id, str(rank_), text, _fmt(h.score), _fmt(h.acoustic), _fmt(h.prior), _fmt(h.lm)]))
    return lines


@dataclass(frozen=True)
class NbestRecord:
    utt_id: str
    rank: int
    text: str
    score: float
    acoustic: float
    prior: float
    lm: float


def parse_nbest(lines: Iterable[str]) -> list[NbestRecord]:
    out = []
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        f = line.split("\t")
        if len(f) != 7:
            raise ValueError(f"malformed n-best line: {line!r}")
        out.append(NbestRecord(f[0], int(f[1]), f[2], *(float(x) for x in f[3:])))
    return out


def safe_scaled(weight: float, value: float) -> float:
    # 0 * -inf must stay 0 so a zero weight really disables a term
    return 0.0 if weight == 0.0 else weight * value

