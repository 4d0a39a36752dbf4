"""Small-scale gradient-descent training on top of a frozen encoder.

The encoder is never updated. A CTC model is a single linear layer over the
encoder frames; a transducer trains the HAT joint and prediction embeddings,
whose encoder projection is the linear layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from funnel_asr.ctc import ctc_grad, ctc_is_feasible, ctc_loss, greedy_decode, prefix_beam_search
from funnel_asr.evaluation import token_accuracy
from funnel_asr.numerics import log_softmax
from funnel_asr.transducer import (
    HatModel,
    RnntLattice,
    context_of,
    init_hat,
    joint_logits,
    label_sync_beam_search,
    pred_sequence,
    rnnt_grad,
)
from funnel_asr.vocab import SOS_ID


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class ToyExample:
    frames: np.ndarray  # frozen encoder output, (T, D)
    tokens: list[int]


@dataclass
class TrainResult:
    kind: str
    params: dict[str, np.ndarray]
    losses: list[float]  # mean training loss before each update
    best_losses: list[float]  # running minimum of ``losses``
    heldout_accuracy: float
    skipped: int = 0  # training examples dropped as infeasible
    extra: dict = field(default_factory=dict)


# -- CTC head --------------------------------------------------------------------------


def _ctc_mask(num_classes: int) -> np.ndarray:
    mask = np.ones(num_classes, dtype=bool)
    mask[SOS_ID] = False
    return mask


def ctc_head_grid(params: dict, frames: np.ndarray) -> np.ndarray:
    w, b = params["w"], params["b"]
    return log_softmax(frames @ w + b, _ctc_mask(w.shape[1]))


def ctc_head_loss_grad(params: dict, batch: Sequence[ToyExample]):
    gw = np.zeros_like(params["w"])
    gb = np.zeros_like(params["b"])
    total = 0.0
    for ex in batch:
        grid = ctc_head_grid(params, ex.frames)
        total += ctc_loss(grid, ex.tokens)
        g = ctc_grad(grid, ex.tokens)
        gw += ex.frames.T @ g
        gb += g.sum(axis=0)
    n = len(batch)
    return total / n, {"w": gw / n, "b": gb / n}


def ctc_head_decode(params: dict, frames: np.ndarray, beam: int = 1) -> list[int]:
    grid = ctc_head_grid(params, frames)
    if beam <= 1:
        return greedy_decode(grid)
    return list(prefix_beam_search(grid, beam)[0].tokens)


# -- transducer ------------------------------------------------------------------------


def rnnt_loss_grad_one(model: HatModel, frames: np.ndarray, y: Sequence[int]):
    """``-log P(y|x)`` and its gradient for every HAT parameter."""
    y = list(y)
    q = pred_sequence(y, model)
    z, bl, ll = joint_logits(frames, q, model)
    d_blank, d_label, logp = rnnt_grad(RnntLattice(bl, ll, model.label_mask()), y)
    g = {}
    g["w_blank"] = np.einsum("tu,tuj->j", d_blank, z)
    g["b_blank"] = np.asarray(d_blank.sum())
    g["w_label"] = np.einsum("tuj,tuk->jk", z, d_label)
    g["b_label"] = d_label.sum(axis=(0, 1))
    dz = d_blank[..., None] * model.w_blank + d_label @ model.w_label.T
    da = dz * (1.0 - z * z)
    g["b_joint"] = da.sum(axis=(0, 1))
    g["w_enc"] = frames.T @ da.sum(axis=1)
    da_u = da.sum(axis=0)
    g["w_pred"] = q.T @ da_u
    dq = da_u @ model.w_pred.T
    ctx = [context_of(y[:u]) for u in range(len(y) + 1)]
    g["emb1"] = np.zeros_like(model.emb1)
    g["emb2"] = np.zeros_like(model.emb2)
    np.add.at(g["emb1"], [c[0] for c in ctx], dq)
    np.add.at(g["emb2"], [c[1] for c in ctx], dq)
    return -logp, g


def rnnt_loss_grad(model: HatModel, batch: Sequence[ToyExample]):
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in model.to_dict().items()}
    for ex in batch:
        loss, g = rnnt_loss_grad_one(model, ex.frames, ex.tokens)
        total += loss
        for k in acc:
            acc[k] += g[k]
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def rnnt_decode(model: HatModel, frames: np.ndarray, beam: int = 4, max_symbols_per_frame: int = 8) -> list[int]:
    hyps = label_sync_beam_search(frames, model, beam, max_symbols_per_frame=max_symbols_per_frame)
    return list(hyps[0].tokens)


# -- driver ------------------------------------------------------------------------------


def evaluate(kind: str, params: dict, examples: Sequence[ToyExample], beam: int = 4, max_symbols_per_frame: int = 8) -> float:
    if kind == "ctc":
        hyps = [ctc_head_decode(params, ex.frames, 1) for ex in examples]
    else:
        model = HatModel.from_dict(params)
        hyps = [rnnt_decode(model, ex.frames, beam, max_symbols_per_frame) for ex in examples]
    return token_accuracy([ex.tokens for ex in examples], hyps)


def init_toy_params(kind: str, enc_dim: int, num_classes: int, seed: int = 0, pred_dim: int = 16, joint_dim: int = 32) -> dict:
    if kind == "ctc":
        return {"w": np.zeros((enc_dim, num_classes)), "b": np.zeros(num_classes)}
    if kind == "rnnt":
        return init_hat(num_classes, enc_dim, pred_dim, joint_dim, seed=seed).to_dict()
    raise ValueError(f"unknown loss kind {kind!r}")


def toy_train(
    loss_kind: str,
    train: Sequence[ToyExample],
    heldout: Sequence[ToyExample],
    num_classes: int,
    steps: int,
    step_size: float,
    *,
    params: dict | None = None,
    seed: int = 0,
    batch_size: int = 0,
    pred_dim: int = 16,
    joint_dim: int = 32,
    beam: int = 4,
    max_symbols_per_frame: int = 8,
) -> TrainResult:
    """Plain (mini-)batch gradient descent with a fixed step size.

    ``batch_size = 0`` uses the full training set every step, so the loss
    curve is exact. CTC examples whose targets do not fit their frame count
    are dropped and counted in ``skipped``.
    """
    if loss_kind not in ("ctc", "rnnt"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if step_size < 0:
        raise ValueError("step_size must be >= 0")
    data = list(train)
    skipped = 0
    if loss_kind == "ctc":
        data = [ex for ex in data if ctc_is_feasible(ex.tokens, ex.frames.shape[0])]
        skipped = len(train) - len(data)
    if not data:
        raise ValueError("no usable training examples")
    enc_dim = data[0].frames.shape[1]
    if params is None:
        params = init_toy_params(loss_kind, enc_dim, num_classes, seed, pred_dim, joint_dim)
        if loss_kind == "rnnt":
            # start the blank Bernoulli at the data's blank fraction
            frames = sum(ex.frames.shape[0] for ex in data)
            labels = sum(len(ex.tokens) for ex in data)
            params["b_blank"] = np.asarray(math.log(frames / max(labels, 1)))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    for step in range(steps):
        if batch_size and batch_size < len(data):
            batch = [data[i] for i in rng.choice(len(data), size=batch_size, replace=False)]
        else:
            batch = data
        try:
            with np.errstate(over="raise", invalid="raise"):
                if loss_kind == "ctc":
                    loss, grads = ctc_head_loss_grad(params, batch)
                else:
                    loss, grads = rnnt_loss_grad(HatModel.from_dict(params), batch)
        except FloatingPointError as e:
            raise TrainingDiverged(step, math.nan) from e
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(step, loss)
        losses.append(float(loss))
        if step_size:
            with np.errstate(over="ignore", invalid="ignore"):
                params = {k: params[k] - step_size * grads[k] for k in params}
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDiverged(step, loss)
    best = list(np.minimum.accumulate(losses)) if losses else []
    acc = evaluate(loss_kind, params, heldout, beam, max_symbols_per_frame) if heldout else math.nan
    return TrainResult(loss_kind, params, losses, [float(b) for b in best], acc, skipped)
