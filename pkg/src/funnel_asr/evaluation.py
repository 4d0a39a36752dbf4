"""Error rates, the frame-rate benchmark harness and result tables."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from funnel_asr.ctc import greedy_decode, prefix_beam_search
from funnel_asr.encoder import EncoderConfig, EncoderOutput, FeatureSequence, attention_cost, encode, init_params
from funnel_asr.numerics import log_softmax
from funnel_asr.transducer import HatModel, init_hat, label_sync_beam_search
from funnel_asr.vocab import BLANK_ID, SOS_ID, Vocabulary, detokenize


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_len

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def edit_ops(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost alignment.

    Back-pointers prefer the diagonal, then deletion, then insertion, so the
    split between error kinds is deterministic on ties.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (r != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dels


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    return sum(edit_ops(ref, hyp))


def wer(ref, hyp) -> WerBreakdown:
    """Word error breakdown; strings are split on whitespace."""
    ref = ref.split() if isinstance(ref, str) else list(ref)
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref:
        raise ValueError("reference is empty")
    s, i, d = edit_ops(ref, hyp)
    return WerBreakdown(s, i, d, len(ref))


def corpus_wer(pairs: Sequence[tuple]) -> WerBreakdown:
    total = WerBreakdown(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    if total.ref_len == 0:
        raise ValueError("reference is empty")
    return total


def token_accuracy(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """``1 - edit distance / reference tokens`` pooled over the corpus."""
    errors = sum(edit_distance(list(r), list(h)) for r, h in zip(refs, hyps))
    n = sum(len(r) for r in refs)
    if n == 0:
        raise ValueError("references are empty")
    return 1.0 - errors / n


# -- benchmark ----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchDecoder:
    kind: str = "ctc"  # ctc | rnnt
    beam: int = 1
    max_symbols_per_frame: int = 4
    seed: int = 0


@dataclass(frozen=True)
class BenchRecord:
    frame_ms: float
    strides: tuple[int, ...]
    start_layer: int  # first pooling layer, -1 without pooling
    wall_ms: float  # median encoder + decoder time per utterance
    encoder_ms: float
    attention_flops: int
    flops: int
    wer: float

    @property
    def label(self) -> str:
        s = "x".join(map(str, self.strides)) if self.strides else "none"
        return f"{self.frame_ms:g}ms ({s})"


def make_decoder(cfg: EncoderConfig, vocab: Vocabulary, decoder: BenchDecoder) -> Callable[[EncoderOutput], list[int]]:
    """A randomly initialised output layer for ``cfg`` plus the matching search."""
    K = vocab.num_classes
    D = cfg.model_dim
    if decoder.kind == "ctc":
        rng = np.random.default_rng(decoder.seed)
        w = rng.uniform(-1, 1, size=(D, K)) / math.sqrt(D)
        mask = np.ones(K, dtype=bool)
        mask[SOS_ID] = False

        def run(out: EncoderOutput) -> list[int]:
            grid = log_softmax(out.embeddings @ w, mask)
            if decoder.beam <= 1:
                return greedy_decode(grid)
            return list(prefix_beam_search(grid, decoder.beam)[0].tokens)

        return run
    if decoder.kind == "rnnt":
        model: HatModel = init_hat(K, D, seed=decoder.seed)

        def run(out: EncoderOutput) -> list[int]:
            hyps = label_sync_beam_search(out, model, decoder.beam, max_symbols_per_frame=decoder.max_symbols_per_frame)
            return list(hyps[0].tokens)

        return run
    raise ValueError(f"unknown decoder kind {decoder.kind!r}")


def _text(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return detokenize(vocab, [i for i in ids if i not in (BLANK_ID, SOS_ID)])


def run_bench(
    sweep: Sequence[EncoderConfig],
    records: Sequence,
    vocab: Vocabulary,
    decoder: BenchDecoder = BenchDecoder(),
    repetitions: int = 3,
    decoders: Sequence[Callable[[EncoderOutput], list[int]]] | None = None,
) -> list[BenchRecord]:
    """Time encode + decode of every record under each encoder config.

    Each config is run once as warm-up, then ``repetitions`` times; the
    reported times are medians per utterance. ``decoders`` may supply one
    trained decode function per config, otherwise a random output layer is
    used (timings are still meaningful, error rates are not).
    """
    if not records:
        raise ValueError("dataset is empty")
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    if decoders is not None and len(decoders) != len(sweep):
        raise ValueError("need one decoder per config")
    out = []
    for n, cfg in enumerate(sweep):
        cfg.validate()
        feats = [FeatureSequence(r.features) for r in records]
        d = feats[0].frames.shape[1]
        params = init_params(cfg, d)
        run = decoders[n] if decoders is not None else make_decoder(cfg, vocab, decoder)
        walls, encs = [], []
        hyps = []
        for rep in range(repetitions + 1):
            enc_time = 0.0
            t0 = time.perf_counter()
            hyps = []
            for f in feats:
                e0 = time.perf_counter()
                eo = encode(f, cfg, params)
                enc_time += time.perf_counter() - e0
                hyps.append(run(eo))
            wall = time.perf_counter() - t0
            if rep > 0:
                walls.append(wall)
                encs.append(enc_time)
        pairs = [(r.transcript, _text(vocab, h)) for r, h in zip(records, hyps)]
        err = corpus_wer(pairs).rate
        t_in = cfg_input_length(cfg, feats[0].frames.shape[0])
        cost = attention_cost(cfg, t_in)
        strides = cfg.pooling_strides
        out.append(
            BenchRecord(
                frame_ms=feats[0].frame_shift_ms * cfg.reduction_factor,
                strides=strides,
                start_layer=cfg.pooling_schedule[0][0] if strides else -1,
                wall_ms=1000.0 * statistics.median(walls) / len(records),
                encoder_ms=1000.0 * statistics.median(encs) / len(records),
                attention_flops=cost.attention,
                flops=cost.total,
                wer=err,
            )
        )
    return sorted(out, key=lambda r: (r.frame_ms, r.strides, r.start_layer))


def cfg_input_length(cfg: EncoderConfig, t_features: int) -> int:
    """Length entering the first Conformer block."""
    t = t_features
    for st, _ in cfg.frontend_strides:
        t = -(-t // st)
    return t


# -- tables --------------------------------------------------------------------------

_COLUMNS = [f.name for f in fields(BenchRecord)]


def _csv_value(name: str, v) -> str:
    if name == "strides":
        return "x".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_table(records: Sequence[BenchRecord]) -> tuple[str, str]:
    """Plain-text table and comma-separated form (exact floats) of ``records``."""
    head = ["Frame rate (reduction factors)", "start layer", "wall ms/utt", "encoder ms/utt", "attn MFLOP", "MFLOP", "WER (%)"]
    rows = [
        [
            r.label,
            str(r.start_layer),
            f"{r.wall_ms:.3f}",
            f"{r.encoder_ms:.3f}",
            f"{r.attention_flops / 1e6:.2f}",
            f"{r.flops / 1e6:.2f}",
            f"{100 * r.wer:.1f}",
        ]
        for r in records
    ]
    widths = [max(len(c) for c in col) for col in zip(head, *rows)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(head, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for r in records:
        writer.writerow([_csv_value(name, getattr(r, name)) for name in _COLUMNS])
    return "\n".join(lines) + "\n", buf.getvalue()


def parse_table(text: str) -> list[BenchRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != _COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(
            BenchRecord(
                frame_ms=float(row["frame_ms"]),
                strides=tuple(int(s) for s in row["strides"].split("x")) if row["strides"] else (),
                start_layer=int(row["start_layer"]),
                wall_ms=float(row["wall_ms"]),
                encoder_ms=float(row["encoder_ms"]),
                attention_flops=int(row["attention_flops"]),
                flops=int(row["flops"]),
                wer=float(row["wer"]),
            )
        )
    return out
