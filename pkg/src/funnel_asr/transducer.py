"""HAT-factorised neural transducer.

The prediction network sees only the last two non-blank labels: its output
is the sum of two position-specific embeddings. The joint network mixes an
encoder frame with that output through a tanh layer and emits a blank
Bernoulli plus a separate softmax over labels (ids >= 2; blank and
start-of-sentence are never labels).

Lattice convention: ``T`` encoder frames and ``U`` labels give nodes
``(t, u)`` with ``0 <= t < T``, ``0 <= u <= U``. A blank moves ``t -> t+1``;
every path ends with a blank from ``(T-1, U)``, so each alignment has exactly
``T`` blanks and ``T + U`` symbols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from funnel_asr.fusion import FusionConfig, Hypothesis, combine, rank
from funnel_asr.numerics import NEG_INF, log_add, log_sigmoid, logsumexp_array
from funnel_asr.vocab import BLANK_ID, FIRST_LABEL_ID, SOS_ID


@dataclass
class HatModel:
    emb1: np.ndarray  # (K, P) embedding of y_{j-1}
    emb2: np.ndarray  # (K, P) embedding of y_{j-2}
    w_enc: np.ndarray  # (D, J)
    w_pred: np.ndarray  # (P, J)
    b_joint: np.ndarray  # (J,)
    w_blank: np.ndarray  # (J,)
    b_blank: np.ndarray  # ()
    w_label: np.ndarray  # (J, K)
    b_label: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return self.emb1.shape[0]

    @property
    def enc_dim(self) -> int:
        return self.w_enc.shape[0]

    def label_mask(self) -> np.ndarray:
        mask = np.ones(self.num_classes, dtype=bool)
        mask[[BLANK_ID, SOS_ID]] = False
        return mask

    def to_dict(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "HatModel":
        return cls(**{f.name: np.asarray(d[f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self) -> "HatModel":
        return HatModel(**{k: v.copy() for k, v in self.to_dict().items()})


def init_hat(
    num_classes: int,
    enc_dim: int,
    pred_dim: int = 16,
    joint_dim: int = 32,
    seed: int = 0,
    scale: float = 1.0,
) -> HatModel:
    if num_classes <= FIRST_LABEL_ID:
        raise ValueError("need at least one label besides blank and start-of-sentence")
    rng = np.random.default_rng(seed)

    def u(fan_in, shape):
        b = scale / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    return HatModel(
        emb1=u(1, (num_classes, pred_dim)),
        emb2=u(1, (num_classes, pred_dim)),
        w_enc=u(enc_dim, (enc_dim, joint_dim)),
        w_pred=u(pred_dim, (pred_dim, joint_dim)),
        b_joint=np.zeros(joint_dim),
        w_blank=u(joint_dim, joint_dim),
        b_blank=np.zeros(()),
        w_label=u(joint_dim, (joint_dim, num_classes)),
        b_label=np.zeros(num_classes),
    )


# -- prediction and joint networks ------------------------------------------------


def context_of(prefix: Sequence[int]) -> tuple[int, int]:
    """(y_{j-1}, y_{j-2}) with start-of-sentence padding."""
    prev1 = prefix[-1] if len(prefix) >= 1 else SOS_ID
    prev2 = prefix[-2] if len(prefix) >= 2 else SOS_ID
    return prev1, prev2


def pred_features(ctx: tuple[int, int], model: HatModel) -> np.ndarray:
    prev1, prev2 = ctx
    K = model.num_classes
    for i in (prev1, prev2):
        if not 0 <= i < K:
            raise ValueError(f"context id {i} out of range")
        if i == BLANK_ID:
            raise ValueError("blank cannot appear in the prediction context")
    return model.emb1[prev1] + model.emb2[prev2]


def pred_sequence(y: Sequence[int], model: HatModel) -> np.ndarray:
    """Prediction outputs q_0..q_U for every prefix of ``y``."""
    y = list(y)
    return np.stack([pred_features(context_of(y[:u]), model) for u in range(len(y) + 1)])


@dataclass(frozen=True)
class HatDistribution:
    log_blank: float
    log_not_blank: float
    log_labels: np.ndarray  # over all ids; -inf outside the label set

    def emitted(self) -> np.ndarray:
        """Log distribution over emitted symbols: blank at id 0, labels elsewhere."""
        out = self.log_not_blank + self.log_labels
        out[BLANK_ID] = self.log_blank
        return out


def joint_logits(h: np.ndarray, q: np.ndarray, model: HatModel):
    """Blank and label logits for every (frame, prefix) pair.

    ``h`` is ``(T, D)`` and ``q`` is ``(U1, P)``; returns ``z`` of shape
    ``(T, U1, J)``, blank logits ``(T, U1)`` and label logits ``(T, U1, K)``.
    """
    h = np.atleast_2d(h)
    q = np.atleast_2d(q)
    if h.shape[1] != model.w_enc.shape[0] or q.shape[1] != model.w_pred.shape[0]:
        raise ValueError("joint input dimensions do not match the model")
    z = np.tanh((h @ model.w_enc)[:, None, :] + (q @ model.w_pred)[None, :, :] + model.b_joint)
    return z, z @ model.w_blank + model.b_blank, z @ model.w_label + model.b_label


def _label_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, logits, NEG_INF)
    return x - logsumexp_array(x, axis=-1)[..., None]


def joint(h_t: np.ndarray, q: np.ndarray, model: HatModel) -> HatDistribution:
    _, b, l = joint_logits(np.asarray(h_t)[None], np.asarray(q)[None], model)
    b = float(b[0, 0])
    return HatDistribution(
        log_blank=float(log_sigmoid(b)),
        log_not_blank=float(log_sigmoid(-b)),
        log_labels=_label_log_softmax(l[0, 0], model.label_mask()),
    )


# -- lattice loss -----------------------------------------------------------------


@dataclass
class RnntLattice:
    blank_logits: np.ndarray  # (T, U+1)
    label_logits: np.ndarray  # (T, U+1, K)
    label_mask: np.ndarray  # (K,) which ids are labels

    @property
    def T(self) -> int:
        return self.blank_logits.shape[0]

    @property
    def U(self) -> int:
        return self.blank_logits.shape[1] - 1

    def log_blank(self) -> np.ndarray:
        return log_sigmoid(self.blank_logits)

    def log_not_blank(self) -> np.ndarray:
        return log_sigmoid(-self.blank_logits)

    def log_labels(self) -> np.ndarray:
        return _label_log_softmax(self.label_logits, self.label_mask)

    def node(self, t: int, u: int) -> HatDistribution:
        return HatDistribution(
            float(self.log_blank()[t, u]), float(self.log_not_blank()[t, u]), self.log_labels()[t, u]
        )


def default_label_mask(num_classes: int) -> np.ndarray:
    mask = np.ones(num_classes, dtype=bool)
    mask[[BLANK_ID, SOS_ID]] = False
    return mask


def build_lattice(enc: np.ndarray, y: Sequence[int], model: HatModel) -> RnntLattice:
    _, b, l = joint_logits(np.asarray(enc, dtype=np.float64), pred_sequence(y, model), model)
    return RnntLattice(b, l, model.label_mask())


def _check_lattice(lattice: RnntLattice, y: Sequence[int]) -> None:
    if lattice.T < 1:
        raise ValueError("lattice needs at least one frame")
    if lattice.U != len(y):
        raise ValueError(f"lattice built for U={lattice.U}, target has {len(y)} labels")
    for k in y:
        if not lattice.label_mask[k]:
            raise ValueError(f"id {k} is not a label")


def _emissions(lattice: RnntLattice, y: Sequence[int]):
    lb = lattice.log_blank()
    lnb = lattice.log_not_blank()
    ll = lattice.log_labels()
    T, U1 = lb.shape
    lab = np.full((T, U1), NEG_INF)
    if len(y):
        lab[:, :-1] = lnb[:, :-1] + ll[:, np.arange(len(y)), list(y)]
    return lb, lab, ll


def _alpha_beta(lb: np.ndarray, lab: np.ndarray):
    T, U1 = lb.shape
    lb_ = lb.tolist()
    lab_ = lab.tolist()
    alpha = [[NEG_INF] * U1 for _ in range(T)]
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                a = 0.0
            else:
                a = NEG_INF
                if t > 0:
                    a = alpha[t - 1][u] + lb_[t - 1][u]
                if u > 0:
                    a = log_add(a, alpha[t][u - 1] + lab_[t][u - 1])
            alpha[t][u] = a
    beta = [[NEG_INF] * U1 for _ in range(T)]
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                b = lb_[t][u]
            else:
                b = NEG_INF
                if t < T - 1:
                    b = lb_[t][u] + beta[t + 1][u]
                if u < U1 - 1:
                    b = log_add(b, lab_[t][u] + beta[t][u + 1])
            beta[t][u] = b
    return np.array(alpha), np.array(beta)


def rnnt_log_prob(lattice: RnntLattice, y: Sequence[int]) -> float:
    """``log P(y | x)`` summed over all blank/label interleavings."""
    y = list(y)
    _check_lattice(lattice, y)
    lb, lab, _ = _emissions(lattice, y)
    alpha, _ = _alpha_beta(lb, lab)
    return float(alpha[-1, -1] + lb[-1, -1])


def rnnt_loss(lattice: RnntLattice, y: Sequence[int]) -> float:
    """Negative log-likelihood ``-log P(y | x)``."""
    return -rnnt_log_prob(lattice, y)


def rnnt_grad(lattice: RnntLattice, y: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of ``-log P(y | x)`` with respect to blank and label logits.

    Returns ``(d_blank (T, U+1), d_label (T, U+1, K), log P)``. Only transitions
    with non-zero posterior occupancy contribute; label logits at ``u = U``
    never receive gradient.
    """
    y = list(y)
    _check_lattice(lattice, y)
    lb, lab, ll = _emissions(lattice, y)
    alpha, beta = _alpha_beta(lb, lab)
    logp = float(beta[0, 0])
    if logp == NEG_INF:
        raise FloatingPointError("target has zero probability under the lattice")
    T, U1 = lb.shape
    nxt_t = np.full((T, U1), NEG_INF)
    nxt_t[:-1] = beta[1:]
    nxt_t[-1, -1] = 0.0
    nxt_u = np.full((T, U1), NEG_INF)
    nxt_u[:, :-1] = beta[:, 1:]
    with np.errstate(invalid="ignore"):
        occ_blank = np.exp(np.nan_to_num(alpha + lb + nxt_t - logp, nan=NEG_INF))
        occ_label = np.exp(np.nan_to_num(alpha + lab + nxt_u - logp, nan=NEG_INF))
    b = np.exp(lb)
    d_blank = occ_label * b - occ_blank * (1.0 - b)
    d_label = occ_label[..., None] * np.exp(ll)
    if y:
        idx_t, idx_u = np.meshgrid(np.arange(T), np.arange(len(y)), indexing="ij")
        d_label[idx_t, idx_u, np.array(y)[idx_u]] -= occ_label[:, :-1]
    return d_blank, d_label, logp


# -- internal LM ------------------------------------------------------------------------


class InternalLm:
    """Label distribution of the joint with the encoder contribution zeroed."""

    def __init__(self, model: HatModel):
        self.model = model
        self._zero = np.zeros(model.enc_dim)
        self._mask = model.label_mask()
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def next_token_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        ctx = context_of(list(prefix))
        if ctx not in self._cache:
            q = pred_features(ctx, self.model)
            _, _, l = joint_logits(self._zero[None], q[None], self.model)
            self._cache[ctx] = _label_log_softmax(l[0, 0], self._mask)
        return self._cache[ctx]


def ilm_score(y: Sequence[int], model: HatModel) -> float:
    y = list(y)
    ilm = InternalLm(model)
    return math.fsum(float(ilm.next_token_logprobs(y[:u])[k]) for u, k in enumerate(y))


# -- search -----------------------------------------------------------------------------


@dataclass
class _Prefix:
    tokens: tuple[int, ...]
    arrive: np.ndarray  # (T, m+1) log mass arriving with the last label at (t, count-in-frame)
    acoustic: float  # log mass of all paths whose labels start with ``tokens``
    ilm: float
    lm: float

    def key(self, fusion: FusionConfig | None) -> float:
        return combine(self.acoustic, self.ilm, self.lm, fusion)


def label_sync_beam_search(
    enc,
    model: HatModel,
    beam: int,
    fusion: FusionConfig | None = None,
    max_symbols_per_frame: int = 8,
    max_output_length: int | None = None,
) -> list[Hypothesis]:
    """Label-synchronous beam search with path merging.

    Round ``u`` holds prefixes with exactly ``u`` labels. Every prefix keeps
    its forward mass over (frame, labels emitted in that frame), which merges
    all alignments of the prefix. Each round completes the active prefixes
    (terminal blank at the last frame) and extends them by one label; the
    extensions are pruned to ``beam`` by
    ``log P(prefix) - alpha * log P_ILM + beta * log P_ext``. With
    ``alpha == 0`` and ``beta >= 0`` that score bounds every completion, which
    allows an exact early stop.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    h = enc.embeddings if hasattr(enc, "embeddings") else np.asarray(enc, dtype=np.float64)
    T = h.shape[0]
    m = max_symbols_per_frame
    u_max = T * m if max_output_length is None else min(max_output_length, T * m)
    mask = model.label_mask()
    labels = np.flatnonzero(mask)
    ilm = InternalLm(model) if fusion is not None and fusion.alpha != 0.0 else None
    use_lm = fusion is not None and fusion.uses_lm
    exact_stop = fusion is None or (fusion.alpha == 0.0 and fusion.beta >= 0.0)
    enc_proj = h @ model.w_enc

    root_arrive = np.full((T, m + 1), NEG_INF)
    root_arrive[0, 0] = 0.0
    active = [_Prefix((), root_arrive, 0.0, 0.0, 0.0)]
    done: list[Hypothesis] = []

    for u in range(u_max + 1):
        children: list[_Prefix] = []
        for p in active:
            q = pred_features(context_of(p.tokens), model)
            z = np.tanh(enc_proj + q @ model.w_pred + model.b_joint)
            bl = z @ model.w_blank + model.b_blank
            lb = log_sigmoid(bl)
            lnb = log_sigmoid(-bl)
            ll = _label_log_softmax(z @ model.w_label + model.b_label, mask)
            # spread arrivals along blank transitions
            sit = p.arrive.copy()
            for t in range(1, T):
                carry = logsumexp_array(sit[t - 1]) + lb[t - 1]
                sit[t, 0] = np.logaddexp(sit[t, 0], carry)
            final = float(logsumexp_array(sit[T - 1]) + lb[T - 1])
            if final > NEG_INF:
                done.append(Hypothesis(p.tokens, combine(final, p.ilm, p.lm, fusion), final, p.ilm, p.lm))
            if u == u_max:
                continue
            ilm_next = ilm.next_token_logprobs(p.tokens) if ilm is not None else None
            lm_next = fusion.lm.next_token_logprobs(p.tokens) if use_lm else None
            # arrive_k[t, c+1] = sit[t, c] + log(1-b_t) + log P(k | t)
            base = sit[:, :m] + lnb[:, None]
            for k in labels:
                arrive = np.full((T, m + 1), NEG_INF)
                arrive[:, 1:] = base + ll[:, k][:, None]
                mass = float(logsumexp_array(arrive.ravel()))
                if mass == NEG_INF:
                    continue
                children.append(
                    _Prefix(
                        p.tokens + (int(k),),
                        arrive,
                        mass,
                        p.ilm + (float(ilm_next[k]) if ilm_next is not None else 0.0),
                        p.lm + (float(lm_next[k]) if lm_next is not None else 0.0),
                    )
                )
        if not children:
            break
        children.sort(key=lambda c: (-c.key(fusion), c.tokens))
        active = children[:beam]
        if exact_stop:
            ranked = rank(done)
            if len(ranked) >= beam and active[0].key(fusion) < ranked[beam - 1].score:
                break
    return rank(done)[:beam]
