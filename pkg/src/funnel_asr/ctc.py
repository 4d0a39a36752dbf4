"""CTC: alignment collapse, forward-backward loss and gradient, and decoders.

A posterior grid is a ``T x K`` array of per-frame log probabilities with the
blank at column 0. Columns that a model never emits (e.g. start-of-sentence)
simply hold ``-inf``.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from funnel_asr.fusion import FusionConfig, Hypothesis, combine, rank
from funnel_asr.numerics import NEG_INF, log_add

BLANK = 0


class InfeasibleTargetError(ValueError):
    """Target needs more frames than the grid has."""


def collapse(alignment: Iterable[int], blank: int = BLANK) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_frames(y: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats


def ctc_is_feasible(y: Sequence[int], T: int) -> bool:
    return T >= min_frames(y)


def _check(grid: np.ndarray, y: Sequence[int]) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("grid must be T x K")
    if any(k == BLANK or not 0 <= k < grid.shape[1] for k in y):
        raise ValueError("target contains blank or out-of-range ids")
    if not ctc_is_feasible(y, grid.shape[0]):
        raise InfeasibleTargetError(f"target of length {len(y)} needs {min_frames(y)} frames, grid has {grid.shape[0]}")
    return grid


def _expand(y: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(y) + 1, BLANK, dtype=np.int64)
    ext[1::2] = y
    # skip transition s-2 -> s allowed into a label that differs from the previous label
    skip = np.zeros(len(ext), dtype=bool)
    for s in range(3, len(ext), 2):
        skip[s] = ext[s] != ext[s - 2]
    return ext, skip


def _forward(grid: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T = grid.shape[0]
    S = len(ext)
    emit = grid[:, ext]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    return alpha


def _backward(grid: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    # beta[t, s]: log prob of emitting frames t..T-1 given state s at frame t (emission at t included)
    T = grid.shape[0]
    S = len(ext)
    emit = grid[:, ext]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    return beta


def _final(alpha: np.ndarray) -> float:
    last = alpha[-1]
    if len(last) == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_log_prob(grid, y: Sequence[int]) -> float:
    """``log P(y | x)`` summed over every alignment that collapses to ``y``."""
    y = list(y)
    grid = _check(grid, y)
    ext, skip = _expand(y)
    return _final(_forward(grid, ext, skip))


def ctc_loss(grid, y: Sequence[int]) -> float:
    """Negative log-likelihood ``-log P(y | x)``."""
    return -ctc_log_prob(grid, y)


def ctc_occupancy(grid, y: Sequence[int]) -> tuple[np.ndarray, float]:
    """Per-frame posterior occupancy ``gamma[t, k]`` and ``log P(y | x)``."""
    y = list(y)
    grid = _check(grid, y)
    ext, skip = _expand(y)
    alpha = _forward(grid, ext, skip)
    beta = _backward(grid, ext, skip)
    logp = _final(alpha)
    if logp == NEG_INF:
        raise FloatingPointError("target has zero probability under the grid")
    # alpha and beta both include the emission at t
    with np.errstate(invalid="ignore"):
        post = alpha + beta - grid[:, ext] - logp
    gamma = np.zeros_like(grid)
    occ = np.exp(np.where(np.isfinite(post), post, NEG_INF))
    np.add.at(gamma, (slice(None), ext), occ)
    return gamma, logp


def ctc_grad(grid, y: Sequence[int]) -> np.ndarray:
    """Gradient of ``-log P(y | x)`` with respect to the pre-softmax logits.

    ``grid`` must be ``log_softmax(logits)``; the result is
    ``softmax(logits) - gamma``.
    """
    gamma, _ = ctc_occupancy(grid, y)
    return np.exp(np.asarray(grid, dtype=np.float64)) - gamma


def greedy_decode(grid) -> list[int]:
    """Per-frame argmax (ties to the lowest id, so blank wins) then collapse."""
    grid = np.asarray(grid)
    if grid.shape[0] == 0:
        return []
    return collapse(np.argmax(grid, axis=1).tolist())


def prefix_beam_search(
    grid,
    beam: int,
    fusion: FusionConfig | None = None,
    top_k: int = 16,
) -> list[Hypothesis]:
    """CTC prefix beam search with optional shallow fusion.

    Each prefix carries its blank-ending and label-ending log weights, so all
    alignments collapsing to it are merged. Each emitted token adds
    ``beta * log P_ext(token | prefix) - alpha * log prior(token)``; a fusion
    prior also subtracts its blank entry from every blank frame. Pruning and
    final ranking use the combined score.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    grid = np.asarray(grid, dtype=np.float64)
    T, K = grid.shape
    prior = None if fusion is None else fusion.prior
    blank_offset = 0.0 if prior is None else float(prior[BLANK])
    use_lm = fusion is not None and fusion.uses_lm

    # prefix -> [log p ending in blank, log p ending in label]
    beams: dict[tuple, list[float]] = {(): [0.0, NEG_INF]}
    # prefix -> (sum log prior, sum log P_ext)
    extras: dict[tuple, tuple[float, float]] = {(): (0.0, 0.0)}
    lm_cache: dict[tuple, np.ndarray] = {}

    def extend(prefix: tuple, k: int) -> tuple:
        new = prefix + (k,)
        if new not in extras:
            pr, lm = extras[prefix]
            if prior is not None:
                pr += float(prior[k])
            if use_lm:
                if prefix not in lm_cache:
                    lm_cache[prefix] = fusion.lm.next_token_logprobs(prefix)
                lm += float(lm_cache[prefix][k])
            extras[new] = (pr, lm)
        return new

    def fused(prefix: tuple, pb: float, pnb: float) -> float:
        pr, lm = extras[prefix]
        return combine(log_add(pb, pnb), pr, lm, fusion)

    for t in range(T):
        order = np.argsort(-grid[t], kind="stable")
        row = grid[t].tolist()
        lp_blank = row[BLANK] - blank_offset
        cands = [int(k) for k in order if k != BLANK and row[k] > NEG_INF][:top_k]
        nxt: dict[tuple, list[float]] = {}

        def acc(prefix, idx, value):
            cell = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cell[idx] = log_add(cell[idx], value)

        for prefix, (pb, pnb) in beams.items():
            total = log_add(pb, pnb)
            acc(prefix, 0, total + lp_blank)
            last = prefix[-1] if prefix else None
            if last is not None:
                acc(prefix, 1, pnb + row[last])
            for k in cands:
                new = extend(prefix, k)
                acc(new, 1, (pb if k == last else total) + row[k])
        live = [kv for kv in nxt.items() if log_add(*kv[1]) > NEG_INF]
        scored = sorted(live, key=lambda kv: (-fused(kv[0], *kv[1]), kv[0]))
        beams = dict(scored[:beam])

    hyps = []
    for prefix, (pb, pnb) in beams.items():
        pr, lm = extras[prefix]
        ac = log_add(pb, pnb)
        hyps.append(Hypothesis(prefix, combine(ac, pr, lm, fusion), ac, pr, lm))
    return rank(hyps)[:beam]


def make_prior(kind: str, data=None, *, num_classes: int | None = None, blank_penalty: float = 0.0) -> np.ndarray:
    """Per-id log prior for CTC fusion.

    ``blank_downscale``: every non-blank gets the same (unnormalised) log prior
    0, so the only effect is the per-frame ``blank_penalty`` stored at the
    blank entry. ``model_unigram``: the expected posterior mass of each
    non-blank id over all frames of ``data`` (an iterable of grids),
    normalised over non-blanks; the blank entry again holds ``blank_penalty``.
    """
    if kind == "blank_downscale":
        if num_classes is None:
            raise ValueError("blank_downscale needs num_classes")
        prior = np.zeros(num_classes)
    elif kind == "model_unigram":
        mass = None
        for g in data or ():
            m = np.exp(np.asarray(g, dtype=np.float64)).sum(axis=0)
            mass = m if mass is None else mass + m
        if mass is None:
            raise ValueError("model_unigram prior needs at least one posterior grid")
        nb = mass.copy()
        nb[BLANK] = 0.0
        total = nb.sum()
        if total <= 0:
            raise ValueError("posterior grids carry no non-blank mass")
        with np.errstate(divide="ignore"):
            prior = np.log(np.maximum(nb / total, 1e-300))
    else:
        raise ValueError(f"unknown prior kind {kind!r}")
    prior[BLANK] = blank_penalty
    return prior


def prior_log_sum(prior: np.ndarray, y: Sequence[int]) -> float:
    return math.fsum(float(prior[k]) for k in y)

