"""Forward-only Conformer encoder with funnel pooling.

Pipeline: two stride-(2,2) convolutions over the (time, feature) plane, a
linear projection to ``model_dim``, then a stack of Conformer blocks. Blocks
named in ``pooling_schedule`` are funnel blocks: their attention queries come
from a strided-average pooled copy of the input while keys and values keep
the full resolution, so the block output is shorter by the pooling stride.

Every module inside a block uses a pre-LayerNorm; the block ends with its own
LayerNorm. Weights are drawn uniform in ``±1/sqrt(fan_in)``, biases are zero
and LayerNorm gains/offsets start at identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BASE_FRAME_MS = 40.0
FRONTEND_FACTOR = 4
LN_EPS = 1e-6


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("features must be a non-empty T x d matrix")
        if not np.all(np.isfinite(frames)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 8
    ffn_multiplier: int = 4
    conv_kernel_size: int = 5
    attention_window: int | None = None
    pooling_schedule: tuple[tuple[int, int], ...] = ()
    frontend_strides: tuple[tuple[int, int], ...] = ((2, 2), (2, 2))
    frontend_channels: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pooling_schedule", tuple(tuple(p) for p in self.pooling_schedule))
        object.__setattr__(self, "frontend_strides", tuple(tuple(p) for p in self.frontend_strides))
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 0 or self.model_dim < 1 or self.num_heads < 1:
            raise ValueError("num_layers, model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel_size < 1:
            raise ValueError("conv_kernel_size must be >= 1")
        if self.attention_window is not None and self.attention_window < 0:
            raise ValueError("attention_window must be >= 0")
        prev = -1
        for layer, stride in self.pooling_schedule:
            if layer <= prev:
                raise ValueError("pooling layer indices must be strictly increasing")
            if stride < 2:
                raise ValueError(f"pooling stride {stride} must be >= 2")
            if not 0 <= layer < self.num_layers:
                raise ValueError(f"pooling layer {layer} outside 0..{self.num_layers - 1}")
            prev = layer
        for st, sf in self.frontend_strides:
            if st < 1 or sf < 1:
                raise ValueError("frontend strides must be >= 1")

    @property
    def pooling_strides(self) -> tuple[int, ...]:
        return tuple(s for _, s in self.pooling_schedule)

    @property
    def frontend_time_factor(self) -> int:
        return math.prod(st for st, _ in self.frontend_strides)

    @property
    def reduction_factor(self) -> int:
        """Total time reduction relative to the input feature frames."""
        return self.frontend_time_factor * math.prod(self.pooling_strides)


@dataclass
class EncoderOutput:
    embeddings: np.ndarray
    output_frame_ms: float
    reduction_factor: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def expected_output_length(
    t_in: int,
    schedule: Sequence,
    frontend_strides: Sequence = ((2, 2), (2, 2)),
) -> int:
    """Encoder output length for ``t_in`` feature frames.

    ``schedule`` holds pooling strides or ``(layer, stride)`` pairs; both the
    frontend time strides and the pooling strides are applied by ceil-division.
    """
    t = int(t_in)
    for st, _ in frontend_strides:
        t = ceil_div(t, st)
    for item in schedule:
        stride = item[1] if isinstance(item, (tuple, list)) else item
        t = ceil_div(t, stride)
    return t


def output_frame_ms(strides: Sequence[int], base_frame_ms: float = BASE_FRAME_MS) -> float:
    """Frame rate after pooling ``strides`` on top of the frontend frame rate."""
    return base_frame_ms * math.prod(strides)


# -- parameters -------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _frontend_out_dim(cfg: EncoderConfig, feature_dim: int) -> int:
    f = feature_dim
    for _, sf in cfg.frontend_strides:
        f = ceil_div(f, sf)
    return f * cfg.frontend_channels


def init_params(cfg: EncoderConfig, feature_dim: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.model_dim
    F = D * cfg.ffn_multiplier
    C = cfg.frontend_channels
    p: dict[str, np.ndarray] = {}
    c_in = 1
    for i, _ in enumerate(cfg.frontend_strides):
        p[f"frontend.conv{i}.w"] = _uniform(rng, 9 * c_in, (3, 3, c_in, C))
        p[f"frontend.conv{i}.b"] = np.zeros(C)
        c_in = C
    fo = _frontend_out_dim(cfg, feature_dim)
    p["frontend.proj.w"] = _uniform(rng, fo, (fo, D))
    p["frontend.proj.b"] = np.zeros(D)
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}."
        for name in ("ffn1", "ffn2", "mhsa", "conv", "out"):
            p[pre + name + ".ln.g"] = np.ones(D)
            p[pre + name + ".ln.b"] = np.zeros(D)
        for name in ("ffn1", "ffn2"):
            p[pre + name + ".w1"] = _uniform(rng, D, (D, F))
            p[pre + name + ".b1"] = np.zeros(F)
            p[pre + name + ".w2"] = _uniform(rng, F, (F, D))
            p[pre + name + ".b2"] = np.zeros(D)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "mhsa." + name] = _uniform(rng, D, (D, D))
        p[pre + "mhsa.bo"] = np.zeros(D)
        p[pre + "conv.pw1"] = _uniform(rng, D, (D, D))
        p[pre + "conv.dw"] = _uniform(rng, cfg.conv_kernel_size, (cfg.conv_kernel_size, D))
        p[pre + "conv.pw2"] = _uniform(rng, D, (D, D))
    return p


# -- building blocks ----------------------------------------------------------


def layer_norm(x: np.ndarray, gain=None, bias=None) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + LN_EPS)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def swish(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


def _same_pad(n: int, k: int, s: int) -> tuple[int, int]:
    out = ceil_div(n, s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: tuple[int, int]) -> np.ndarray:
    # x: (T, F, C_in); w: (kt, kf, C_in, C_out); "same" padding, ceil output
    kt, kf = w.shape[:2]
    st, sf = stride
    pt = _same_pad(x.shape[0], kt, st)
    pf = _same_pad(x.shape[1], kf, sf)
    xp = np.pad(x, (pt, pf, (0, 0)))
    win = sliding_window_view(xp, (kt, kf), axis=(0, 1))[::st, ::sf]
    win = win[: ceil_div(x.shape[0], st), : ceil_div(x.shape[1], sf)]
    return np.einsum("tfcij,ijco->tfo", win, w, optimize=True) + b


def conv_subsample(feat: FeatureSequence, cfg: EncoderConfig, params: dict) -> np.ndarray:
    """Two strided 2-D convolutions plus projection; time shrinks by ceil-division."""
    if feat.frames.shape[0] < 4:
        raise ValueError(f"need at least 4 input frames, got {feat.frames.shape[0]}")
    x = feat.frames[:, :, None]
    for i, stride in enumerate(cfg.frontend_strides):
        x = np.maximum(_conv2d(x, params[f"frontend.conv{i}.w"], params[f"frontend.conv{i}.b"], stride), 0.0)
    x = x.reshape(x.shape[0], -1)
    return x @ params["frontend.proj.w"] + params["frontend.proj.b"]


def strided_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Average non-overlapping windows of ``stride`` frames; the tail window may be short."""
    if stride < 1:
        raise ValueError(f"invalid stride {stride}")
    n = x.shape[0]
    out = ceil_div(n, stride)
    full = n // stride
    pooled = np.empty((out,) + x.shape[1:], dtype=x.dtype)
    if full:
        pooled[:full] = x[: full * stride].reshape(full, stride, *x.shape[1:]).mean(axis=1)
    if out > full:
        pooled[full] = x[full * stride :].mean(axis=0)
    return pooled


def pooled_positions(n: int, stride: int) -> np.ndarray:
    """Centre (in input frames) of each pooling window."""
    starts = np.arange(0, n, stride)
    ends = np.minimum(starts + stride, n)
    return (starts + ends - 1) / 2.0


def sinusoidal_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = positions[:, None] * freq[None, :]
    pe = np.zeros((len(positions), dim))
    pe[:, 0 : 2 * len(i) : 2] = np.sin(ang)
    pe[:, 1 : 2 * len(i) : 2] = np.cos(ang)
    return pe


def _ffn(x, p, pre):
    h = layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"])
    h = swish(h @ p[pre + ".w1"] + p[pre + ".b1"])
    return h @ p[pre + ".w2"] + p[pre + ".b2"]


def _mhsa(q_in, kv_in, q_pos, k_pos, p, pre, cfg: EncoderConfig):
    T_q, D = q_in.shape
    T_k = kv_in.shape[0]
    H = cfg.num_heads
    dh = D // H
    g, b = p[pre + ".ln.g"], p[pre + ".ln.b"]
    qn = layer_norm(q_in, g, b) + sinusoidal_encoding(q_pos, D)
    kn = layer_norm(kv_in, g, b)
    vn = kn
    kn = kn + sinusoidal_encoding(k_pos, D)
    q = (qn @ p[pre + ".wq"]).reshape(T_q, H, dh).transpose(1, 0, 2)
    k = (kn @ p[pre + ".wk"]).reshape(T_k, H, dh).transpose(1, 0, 2)
    v = (vn @ p[pre + ".wv"]).reshape(T_k, H, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    if cfg.attention_window is not None:
        far = np.abs(q_pos[:, None] - k_pos[None, :]) > cfg.attention_window
        scores = np.where(far[None], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(1, 0, 2).reshape(T_q, D)
    return ctx @ p[pre + ".wo"] + p[pre + ".bo"]


def _conv_module(x, p, pre, cfg: EncoderConfig):
    # pointwise -> depthwise (same padding) -> swish -> pointwise
    h = layer_norm(x, p[pre + ".ln.g"], p[pre + ".ln.b"]) @ p[pre + ".pw1"]
    k = cfg.conv_kernel_size
    left = (k - 1) // 2
    hp = np.pad(h, ((left, k - 1 - left), (0, 0)))
    win = sliding_window_view(hp, k, axis=0)  # (T, D, k)
    h = np.einsum("tdk,kd->td", win, p[pre + ".dw"], optimize=True)
    return swish(h) @ p[pre + ".pw2"]


def _check_dim(x: np.ndarray, cfg: EncoderConfig) -> None:
    if x.ndim != 2 or x.shape[1] != cfg.model_dim:
        raise ValueError(f"expected input of shape (T, {cfg.model_dim}), got {x.shape}")


def conformer_block(x: np.ndarray, params: dict, cfg: EncoderConfig, layer: int = 0) -> np.ndarray:
    return _block(x, 1, params, cfg, layer)


def funnel_block(x: np.ndarray, stride: int, params: dict, cfg: EncoderConfig, layer: int = 0) -> np.ndarray:
    """Conformer block whose attention queries are pooled by ``stride``.

    The residual around the attention module uses the pooled input, so the
    convolution module and the second feed-forward module already run at the
    reduced length.
    """
    if stride < 2:
        raise ValueError(f"invalid funnel stride {stride}; must be >= 2")
    return _block(x, stride, params, cfg, layer)


def _block(x: np.ndarray, stride: int, params: dict, cfg: EncoderConfig, layer: int) -> np.ndarray:
    _check_dim(x, cfg)
    if x.shape[0] < 1:
        raise ValueError("empty input sequence")
    pre = f"layer{layer}."
    n = x.shape[0]
    xt = x + 0.5 * _ffn(x, params, pre + "ffn1")
    if stride > 1:
        xh = strided_pool(xt, stride)
        q_pos = pooled_positions(n, stride)
    else:
        xh = xt
        q_pos = np.arange(n, dtype=np.float64)
    k_pos = np.arange(n, dtype=np.float64)
    x1 = xh + _mhsa(xh, xt, q_pos, k_pos, params, pre + "mhsa", cfg)
    x2 = x1 + _conv_module(x1, params, pre + "conv", cfg)
    return layer_norm(x2 + 0.5 * _ffn(x2, params, pre + "ffn2"), params[pre + "out.ln.g"], params[pre + "out.ln.b"])


def encode(feat: FeatureSequence, cfg: EncoderConfig, params: dict) -> EncoderOutput:
    x = conv_subsample(feat, cfg, params)
    strides = dict(cfg.pooling_schedule)
    for layer in range(cfg.num_layers):
        x = _block(x, strides.get(layer, 1), params, cfg, layer)
    expected = expected_output_length(feat.frames.shape[0], cfg.pooling_strides, cfg.frontend_strides)
    assert x.shape[0] == expected, (x.shape[0], expected)
    return EncoderOutput(
        embeddings=x,
        output_frame_ms=feat.frame_shift_ms * cfg.reduction_factor,
        reduction_factor=cfg.reduction_factor,
    )


# -- cost model ---------------------------------------------------------------


@dataclass
class LayerCost:
    layer: int
    in_len: int
    out_len: int
    attention: int
    ffn: int

    @property
    def total(self) -> int:
        return self.attention + self.ffn


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def attention(self) -> int:
        return sum(c.attention for c in self.layers)

    @property
    def ffn(self) -> int:
        return sum(c.ffn for c in self.layers)

    @property
    def total(self) -> int:
        return self.attention + self.ffn


def attention_cost(cfg: EncoderConfig, t_in: int) -> CostReport:
    """Multiply-add estimate for the Conformer stack given ``t_in`` input frames.

    Attention scores plus weighted sum cost ``2 * T_q * T_k * D``; each
    feed-forward module costs ``8 * T * D**2`` (two matmuls through a 4D
    hidden layer). In a funnel block the first feed-forward module runs at the
    input length and the second one at the pooled length.
    """
    D = cfg.model_dim
    strides = dict(cfg.pooling_schedule)
    report = CostReport()
    t = int(t_in)
    for layer in range(cfg.num_layers):
        t_out = ceil_div(t, strides.get(layer, 1))
        report.layers.append(
            LayerCost(layer, t, t_out, attention=2 * t_out * t * D, ffn=8 * t * D * D + 8 * t_out * D * D)
        )
        t = t_out
    return report
