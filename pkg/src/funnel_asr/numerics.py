"""Log-domain arithmetic shared by every lattice, search and fusion routine.

All scores are natural-log probabilities stored as Python floats or float64
arrays. ``NEG_INF`` is the log of zero.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

NEG_INF = -math.inf


def log_add(a: float, b: float) -> float:
    """Return ``log(exp(a) + exp(b))`` without leaving the log domain."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def log_sum_exp(values: Iterable[float]) -> float:
    values = [float(v) for v in values]
    if not values:
        return NEG_INF
    m = max(values)
    if m == NEG_INF:
        return NEG_INF
    if m == math.inf:
        return math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def logsumexp_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vectorised log-sum-exp along ``axis``; all ``-inf`` slices give ``-inf``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def log_softmax(logits, mask: np.ndarray | None = None) -> np.ndarray:
    """Normalise ``logits`` along the last axis.

    ``mask`` (boolean, broadcastable to the last axis) selects the entries that
    take part in the normalisation; masked-out entries come back as ``-inf``.
    Non-finite logits are rejected.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_softmax requires finite logits")
    if mask is not None:
        x = np.where(mask, x, NEG_INF)
    return x - logsumexp_array(x, axis=-1)[..., None]


def log_sigmoid(x):
    """``log(sigmoid(x))`` stable for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(log_sigmoid(x))
