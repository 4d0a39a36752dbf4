"""Exhaustive reference computations for tiny instances.

These enumerate alignments and hypotheses explicitly in the probability
domain. They deliberately avoid the dynamic-programming code they are used
to check; only model evaluation (``joint_logits``, ``pred_features``) is
shared with the transducer module.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from funnel_asr.fusion import FusionConfig, Hypothesis
from funnel_asr.transducer import HatModel, RnntLattice, context_of, joint_logits, pred_features

PATH_CAP = 10**7


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    path_cap: int = PATH_CAP

    def check(self, paths: int, what: str) -> None:
        if paths > self.path_cap:
            raise BudgetExceeded(f"{what}: {paths} paths exceeds cap {self.path_cap}")


DEFAULT_BUDGET = EnumerationBudget()


def _probs(grid) -> list[list[float]]:
    return [[math.exp(v) for v in row] for row in np.asarray(grid, dtype=np.float64).tolist()]


def _live_symbols(p: list[list[float]]) -> list[int]:
    return [k for k in range(len(p[0])) if any(row[k] > 0.0 for row in p)]


def _squash(a: Sequence[int], blank: int = 0) -> tuple[int, ...]:
    out = []
    last = None
    for s in a:
        if s != last and s != blank:
            out.append(s)
        last = s
    return tuple(out)


def brute_ctc_distribution(grid, budget: EnumerationBudget = DEFAULT_BUDGET) -> dict[tuple[int, ...], float]:
    """Probability of every label sequence reachable from the grid."""
    p = _probs(grid)
    syms = _live_symbols(p)
    budget.check(len(syms) ** len(p), "ctc enumeration")
    mass: dict[tuple[int, ...], list[float]] = {}
    for a in itertools.product(syms, repeat=len(p)):
        w = math.prod(p[t][s] for t, s in enumerate(a))
        mass.setdefault(_squash(a), []).append(w)
    return {y: math.fsum(ws) for y, ws in mass.items()}


def brute_ctc_prob(grid, y: Sequence[int], budget: EnumerationBudget = DEFAULT_BUDGET) -> float:
    """``log`` of the summed probability of alignments collapsing to ``y``."""
    p = _probs(grid)
    syms = _live_symbols(p)
    budget.check(len(syms) ** len(p), "ctc enumeration")
    target = tuple(y)
    terms = [
        math.prod(p[t][s] for t, s in enumerate(a))
        for a in itertools.product(syms, repeat=len(p))
        if _squash(a) == target
    ]
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf


def _hat_node_probs(blank_logit: float, label_logits: Sequence[float], mask: Sequence[bool]):
    b = 1.0 / (1.0 + math.exp(-blank_logit))
    exps = [math.exp(x) if ok else 0.0 for x, ok in zip(label_logits, mask)]
    z = math.fsum(exps)
    return b, [e / z for e in exps]


def _interleavings(T: int, U: int, max_symbols: int | None):
    # label positions among the first T+U-1 steps; the last step is the terminal blank
    n = T + U - 1
    for pos in itertools.combinations(range(n), U):
        if max_symbols is not None:
            run = 0
            ok = True
            pset = set(pos)
            for i in range(n):
                if i in pset:
                    run += 1
                    if run > max_symbols:
                        ok = False
                        break
                else:
                    run = 0
            if not ok:
                continue
        yield pos


def brute_rnnt_prob(
    lattice: RnntLattice,
    y: Sequence[int],
    max_symbols: int | None = None,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> float:
    """Sum over every blank/label interleaving ending in the terminal blank."""
    y = list(y)
    T, U1 = lattice.blank_logits.shape
    U = U1 - 1
    if U != len(y):
        raise ValueError("lattice does not match target length")
    budget.check(math.comb(T + U - 1, U), "rnnt enumeration")
    mask = lattice.label_mask.tolist()
    bl = lattice.blank_logits.tolist()
    ll = lattice.label_logits.tolist()
    nodes = {}
    for t in range(T):
        for u in range(U1):
            nodes[t, u] = _hat_node_probs(bl[t][u], ll[t][u], mask)
    terms = []
    for pos in _interleavings(T, U, max_symbols):
        pset = set(pos)
        t = u = 0
        w = 1.0
        for i in range(T + U):
            b, lab = nodes[t, u]
            if i in pset:
                w *= (1.0 - b) * lab[y[u]]
                u += 1
            else:
                w *= b
                t += 1
        terms.append(w)
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf


def _model_lattice(enc: np.ndarray, model: HatModel, y: Sequence[int]) -> RnntLattice:
    q = np.stack([pred_features(context_of(list(y[:u])), model) for u in range(len(y) + 1)])
    _, b, l = joint_logits(np.asarray(enc, dtype=np.float64), q, model)
    return RnntLattice(b, l, model.label_mask())


def brute_rnnt_model_prob(enc, model: HatModel, y: Sequence[int], max_symbols: int | None = None) -> float:
    return brute_rnnt_prob(_model_lattice(enc, model, y), y, max_symbols)


def brute_ilm(model: HatModel, y: Sequence[int]) -> float:
    mask = model.label_mask().tolist()
    zero = np.zeros((1, model.enc_dim))
    total = 0.0
    for u, k in enumerate(y):
        q = pred_features(context_of(list(y[:u])), model)
        _, b, l = joint_logits(zero, q[None], model)
        _, lab = _hat_node_probs(float(b[0, 0]), l[0, 0].tolist(), mask)
        total += math.log(lab[k])
    return total


def lm_sequence_score(lm, y: Sequence[int]) -> float:
    return math.fsum(float(lm.next_token_logprobs(list(y[:u]))[k]) for u, k in enumerate(y))


def truncated_mass(enc, model: HatModel, u_max: int) -> list[float]:
    """Cumulative ``sum P(y)`` over all ``y`` with ``|y| <= n`` for n = 0..u_max."""
    labels = np.flatnonzero(model.label_mask()).tolist()
    per_len = []
    for n in range(u_max + 1):
        per_len.append(
            math.fsum(math.exp(brute_rnnt_model_prob(enc, model, y)) for y in itertools.product(labels, repeat=n))
        )
    return list(itertools.accumulate(per_len))


def _best(cands: list[Hypothesis]) -> Hypothesis:
    return min(cands, key=lambda h: (-h.score, h.tokens))


def _fuse(ac: float, pr: float, lm: float, fusion: FusionConfig | None) -> float:
    if fusion is None:
        return ac
    out = ac
    if fusion.alpha:
        out -= fusion.alpha * pr
    if fusion.beta:
        out += fusion.beta * lm
    return out


def brute_best_ctc(grid, fusion: FusionConfig | None = None, u_max: int | None = None) -> Hypothesis:
    """Exact argmax of the fused CTC objective over every reachable label sequence."""
    g = np.array(grid, dtype=np.float64)
    prior = None if fusion is None else fusion.prior
    if prior is not None:
        g[:, 0] -= prior[0]
    use_lm = fusion is not None and fusion.lm is not None and fusion.beta != 0.0
    cands = []
    for y, mass in brute_ctc_distribution(g).items():
        if mass <= 0 or (u_max is not None and len(y) > u_max):
            continue
        pr = math.fsum(float(prior[k]) for k in y) if prior is not None else 0.0
        lm = lm_sequence_score(fusion.lm, y) if use_lm else 0.0
        ac = math.log(mass)
        cands.append(Hypothesis(y, _fuse(ac, pr, lm, fusion), ac, pr, lm))
    return _best(cands)


def brute_best_transducer(
    enc,
    model: HatModel,
    fusion: FusionConfig | None = None,
    u_max: int = 3,
    max_symbols: int | None = None,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> Hypothesis:
    """Exact argmax of ``log P(y|x) - alpha log P_ILM(y) + beta log P_ext(y)`` over ``|y| <= u_max``."""
    labels = np.flatnonzero(model.label_mask()).tolist()
    budget.check(sum(len(labels) ** n for n in range(u_max + 1)), "hypothesis enumeration")
    use_ilm = fusion is not None and fusion.alpha != 0.0
    use_lm = fusion is not None and fusion.lm is not None and fusion.beta != 0.0
    cands = []
    for n in range(u_max + 1):
        for y in itertools.product(labels, repeat=n):
            ac = brute_rnnt_model_prob(enc, model, y, max_symbols)
            if ac == -math.inf:
                continue
            pr = brute_ilm(model, y) if use_ilm else 0.0
            lm = lm_sequence_score(fusion.lm, y) if use_lm else 0.0
            cands.append(Hypothesis(tuple(y), _fuse(ac, pr, lm, fusion), ac, pr, lm))
    return _best(cands)


def brute_best_label_sequence(source, fusion: FusionConfig | None = None, u_max: int | None = None, **kw) -> Hypothesis:
    """Dispatch on the source: a CTC grid, or an ``(encoder frames, HatModel)`` pair."""
    if isinstance(source, tuple):
        enc, model = source
        return brute_best_transducer(enc, model, fusion, 3 if u_max is None else u_max, **kw)
    return brute_best_ctc(source, fusion, u_max)


# -- sweeps ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    check: str
    T: int
    U: int
    V: int
    instances: int
    max_error: float
    passed: bool


def random_ctc_instance(rng: np.random.Generator, T: int, U: int, V: int):
    """Log-softmax grid over blank plus ``V`` labels (ids 1..V) and a target."""
    logits = rng.normal(scale=2.0, size=(T, V + 1))
    grid = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    y = rng.integers(1, V + 1, size=U).tolist()
    return grid, y


def random_rnnt_instance(rng: np.random.Generator, T: int, U: int, V: int):
    """Random HAT lattice over ``V`` labels (ids 2..V+1) and a target."""
    K = V + 2
    mask = np.ones(K, dtype=bool)
    mask[:2] = False
    lattice = RnntLattice(rng.normal(scale=2.0, size=(T, U + 1)), rng.normal(scale=2.0, size=(T, U + 1, K)), mask)
    y = rng.integers(2, K, size=U).tolist()
    return lattice, y


def oracle_sweep(
    instances: int = 200,
    seed: int = 0,
    T_values=range(1, 6),
    U_values=range(0, 4),
    V_values=range(1, 4),
    tol: float = 1e-10,
) -> list[SweepCell]:
    """Compare the dynamic-programming losses with enumeration on every cell."""
    from funnel_asr.ctc import InfeasibleTargetError, ctc_loss
    from funnel_asr.transducer import rnnt_loss

    rng = np.random.default_rng(seed)
    cells = []
    for T in T_values:
        for U in U_values:
            for V in V_values:
                worst = 0.0
                ok = True
                for _ in range(instances):
                    grid, y = random_ctc_instance(rng, T, U, V)
                    ref = brute_ctc_prob(grid, y)
                    try:
                        got = -ctc_loss(grid, y)
                    except InfeasibleTargetError:
                        got = -math.inf
                    if ref == got == -math.inf:
                        continue
                    err = abs(got - ref)
                    worst = max(worst, err)
                    ok = ok and err <= tol
                cells.append(SweepCell("ctc", T, U, V, instances, worst, ok))
                worst = 0.0
                ok = True
                for _ in range(instances):
                    lattice, y = random_rnnt_instance(rng, T, U, V)
                    err = abs(-rnnt_loss(lattice, y) - brute_rnnt_prob(lattice, y))
                    worst = max(worst, err)
                    ok = ok and err <= tol
                cells.append(SweepCell("rnnt", T, U, V, instances, worst, ok))
    return cells
