"""Count-based word-piece LM used as the external LM in shallow fusion.

Smoothing is recursive Jelinek-Mercer interpolation::

    P_k(w | h) = lam_k * P_ML(w | h_k) + (1 - lam_k) * P_{k-1}(w | h)

with ``P_0`` uniform over labels. When the order-``k`` context was never seen
the order-``k`` estimate is skipped. Maximum-likelihood probabilities are kept
as log10 values, the same numbers that go into the text file, so a saved and
reloaded model scores bit-identically.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from funnel_asr.vocab import FIRST_LABEL_ID, SOS_ID

SEP = " ▸ "
DEFAULT_LAMBDA = 0.9


@dataclass
class MixedCorpus:
    """Seeded stream drawing from source ``a`` with probability ``ratio``."""

    a: list
    b: list
    ratio: float
    seed: int

    def stream(self):
        rng = np.random.default_rng(self.seed)
        while True:
            from_a = rng.random() < self.ratio
            src = self.a if from_a else self.b
            yield ("a" if from_a else "b"), src[int(rng.integers(len(src)))]

    def draw(self, n: int) -> list[tuple[str, list[int]]]:
        it = self.stream()
        return [next(it) for _ in range(n)]

    def sequences(self, n: int) -> list[list[int]]:
        return [list(seq) for _, seq in self.draw(n)]


def mix_corpora(a: Sequence, b: Sequence, ratio: float, seed: int) -> MixedCorpus:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    if ratio > 0.0 and not a:
        raise ValueError("source a is empty but ratio > 0")
    if ratio < 1.0 and not b:
        raise ValueError("source b is empty but ratio < 1")
    return MixedCorpus(list(a), list(b), float(ratio), int(seed))


@dataclass
class NGramLm:
    order: int
    num_classes: int
    weights: tuple[float, ...]  # interpolation weight for orders 1..n
    # tables[k-1][context of length k-1][token] = log10 P_ML
    tables: list[dict[tuple[int, ...], dict[int, float]]] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if len(self.weights) != self.order:
            raise ValueError("need one interpolation weight per order")
        if any(not 0.0 <= w <= 1.0 for w in self.weights):
            raise ValueError("interpolation weights must lie in [0, 1]")
        if not self.tables:
            self.tables = [{} for _ in range(self.order)]

    @property
    def label_ids(self) -> range:
        return range(FIRST_LABEL_ID, self.num_classes)

    def _context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        n1 = self.order - 1
        if n1 == 0:
            return ()
        padded = [SOS_ID] * n1 + list(prefix)
        return tuple(padded[-n1:])

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        """Natural-log next-token distribution over all ids (reserved ids at ``-inf``)."""
        ctx = self._context(prefix)
        if ctx not in self._cache:
            labels = self.label_ids
            p = np.full(len(labels), 1.0 / len(labels))
            for k in range(1, self.order + 1):
                sub = ctx[len(ctx) - (k - 1) :] if k > 1 else ()
                row = self.tables[k - 1].get(sub)
                if row is None:
                    continue
                ml = np.zeros(len(labels))
                for tok, l10 in row.items():
                    ml[tok - FIRST_LABEL_ID] = 10.0**l10
                lam = self.weights[k - 1]
                p = lam * ml + (1.0 - lam) * p
            out = np.full(self.num_classes, -math.inf)
            with np.errstate(divide="ignore"):
                out[FIRST_LABEL_ID:] = np.log(p)
            self._cache[ctx] = out
        return self._cache[ctx]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def to_text(self) -> str:
        lines = [
            "# ngram-lm",
            f"order {self.order}",
            f"num_classes {self.num_classes}",
            "weights " + " ".join(repr(w) for w in self.weights),
        ]
        for k, table in enumerate(self.tables, start=1):
            for ctx in sorted(table):
                ctx_s = " ".join(map(str, ctx)) if ctx else "-"
                for tok in sorted(table[ctx]):
                    lines.append(f"{k}{SEP}{ctx_s}{SEP}{tok}{SEP}{table[ctx][tok]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NGramLm":
        lines = text.splitlines()
        if not lines or lines[0] != "# ngram-lm":
            raise ValueError("not an n-gram LM file")
        header = {}
        i = 1
        while i < len(lines) and SEP not in lines[i]:
            key, _, value = lines[i].partition(" ")
            header[key] = value
            i += 1
        order = int(header["order"])
        lm = cls(order, int(header["num_classes"]), tuple(float(w) for w in header["weights"].split()))
        for line in lines[i:]:
            if not line:
                continue
            k, ctx_s, tok, l10 = line.split(SEP)
            ctx = () if ctx_s == "-" else tuple(int(x) for x in ctx_s.split())
            lm.tables[int(k) - 1].setdefault(ctx, {})[int(tok)] = float(l10)
        return lm

    @classmethod
    def load(cls, path) -> "NGramLm":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def train_lm(
    corpus: Iterable[Sequence[int]],
    order: int,
    num_classes: int,
    weights: Sequence[float] | None = None,
) -> NGramLm:
    """Count n-grams of every order up to ``order`` with start-of-sentence padding."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if isinstance(corpus, MixedCorpus):
        raise TypeError("draw sequences from the MixedCorpus first (MixedCorpus.sequences)")
    weights = tuple(weights) if weights is not None else (DEFAULT_LAMBDA,) * order
    counts = [defaultdict(Counter) for _ in range(order)]
    n_seq = 0
    for seq in corpus:
        seq = list(seq)
        n_seq += 1
        for tok in seq:
            if not FIRST_LABEL_ID <= tok < num_classes:
                raise ValueError(f"token {tok} is not a label id")
        padded = [SOS_ID] * (order - 1) + seq
        for i, tok in enumerate(seq):
            pos = i + order - 1
            for k in range(1, order + 1):
                ctx = tuple(padded[pos - (k - 1) : pos])
                counts[k - 1][ctx][tok] += 1
    if n_seq == 0 or not counts[0]:
        raise ValueError("corpus is empty")
    lm = NGramLm(order, num_classes, weights)
    for k in range(order):
        for ctx, row in counts[k].items():
            total = sum(row.values())
            lm.tables[k][ctx] = {tok: math.log10(c / total) for tok, c in row.items()}
    return lm


def score(lm, y: Sequence[int]) -> float:
    y = list(y)
    return math.fsum(float(lm.next_token_logprobs(y[:u])[k]) for u, k in enumerate(y))


def perplexity(lm: NGramLm, corpus: Iterable[Sequence[int]]) -> float:
    total = 0.0
    n = 0
    for seq in corpus:
        total += score(lm, seq)
        n += len(seq)
    return math.exp(-total / max(n, 1))
