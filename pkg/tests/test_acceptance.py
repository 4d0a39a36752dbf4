"""Acceptance criteria 1-11.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion in the terminal summary. Tests also print their own line, which
shows with ``pytest -s``.
"""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from funnel_asr.ctc import ctc_grad, ctc_is_feasible, ctc_log_prob, ctc_loss, make_prior, prefix_beam_search
from funnel_asr.data import SynthTaskConfig, generate_synthetic, synth_vocab
from funnel_asr.encoder import EncoderConfig, FeatureSequence, attention_cost, encode, init_params, output_frame_ms
from funnel_asr.evaluation import BenchDecoder, edit_distance, run_bench, wer
from funnel_asr.fusion import FusionConfig
from funnel_asr.lm import train_lm
from funnel_asr.numerics import log_softmax
from funnel_asr.oracle import (
    brute_best_label_sequence,
    brute_ctc_distribution,
    oracle_sweep,
    random_ctc_instance,
    random_rnnt_instance,
    truncated_mass,
)
from funnel_asr.training import ToyExample, evaluate, toy_train
from funnel_asr.transducer import HatModel, InternalLm, init_hat, label_sync_beam_search, rnnt_grad, rnnt_loss
from funnel_asr.vocab import SOS_ID, tokenize


def report(number, ok, detail=""):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


# -- 1, 2: oracle equivalence ------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    cells = oracle_sweep(instances=200, seed=0, T_values=range(1, 6), U_values=range(0, 4), V_values=range(1, 4))
    return cells, time.perf_counter() - t0


@pytest.mark.criterion(1, "CTC loss equals alignment enumeration (1e-10, 200/cell)")
def test_c01_ctc_oracle_equivalence(sweep):
    cells, seconds = sweep
    ctc = [c for c in cells if c.check == "ctc"]
    worst = max(c.max_error for c in ctc)
    ok = len(ctc) == 60 and all(c.instances == 200 and c.passed for c in ctc) and seconds < 60
    report(1, ok, f"max error {worst:.2e}, {seconds:.1f}s for both sweeps")
    assert len(ctc) == 5 * 4 * 3
    assert all(c.passed for c in ctc), [c for c in ctc if not c.passed]
    assert worst <= 1e-10
    assert seconds < 60


@pytest.mark.criterion(2, "transducer loss equals interleaving enumeration (1e-10, 200/cell)")
def test_c02_transducer_oracle_equivalence(sweep):
    cells, seconds = sweep
    rnnt = [c for c in cells if c.check == "rnnt"]
    worst = max(c.max_error for c in rnnt)
    report(2, all(c.passed for c in rnnt) and seconds < 60, f"max error {worst:.2e}")
    assert len(rnnt) == 5 * 4 * 3
    assert all(c.passed for c in rnnt), [c for c in rnnt if not c.passed]
    assert worst <= 1e-10
    assert seconds < 60


# -- 3: normalisation ----------------------------------------------------------------------


@pytest.mark.criterion(3, "CTC total mass, HAT node mass, truncated transducer mass")
def test_c03_normalisation():
    rng = np.random.default_rng(3)
    worst_ctc = 0.0
    for T in range(1, 6):
        for V in (1, 2):
            for _ in range(5):
                grid, _ = random_ctc_instance(rng, T, 0, V)
                total = math.fsum(
                    math.exp(ctc_log_prob(grid, y))
                    for U in range(T + 1)
                    for y in itertools.product(range(1, V + 1), repeat=U)
                    if ctc_is_feasible(y, T)
                )
                worst_ctc = max(worst_ctc, abs(total - 1.0))
                assert math.fsum(brute_ctc_distribution(grid).values()) == pytest.approx(1.0, abs=1e-9)

    worst_node = 0.0
    for _ in range(50):
        lattice, _ = random_rnnt_instance(rng, int(rng.integers(1, 6)), int(rng.integers(0, 4)), int(rng.integers(1, 4)))
        mass = np.exp(lattice.log_blank()) + np.exp(lattice.log_not_blank()) * np.exp(lattice.log_labels()).sum(-1)
        worst_node = max(worst_node, float(np.abs(mass - 1.0).max()))

    curves = []
    for seed in range(4):
        model = init_hat(4, 3, pred_dim=4, joint_dim=5, seed=seed, scale=1.5)  # labels 2 and 3
        enc = rng.normal(size=(int(rng.integers(1, 4)), 3))
        curves.append(truncated_mass(enc, model, 6))
    monotone = all(b >= a for c in curves for a, b in zip(c, c[1:]))
    bounded = all(c[-1] <= 1.0 + 1e-12 for c in curves)

    ok = worst_ctc <= 1e-9 and worst_node <= 1e-9 and monotone and bounded
    report(3, ok, f"ctc {worst_ctc:.1e}, node {worst_node:.1e}, truncated tails {[round(c[-1], 4) for c in curves]}")
    assert worst_ctc <= 1e-9
    assert worst_node <= 1e-9
    assert monotone and bounded


# -- 4: gradients ------------------------------------------------------------------------------


def _rel(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def _ctc_fd(logits, y, eps=1e-5):
    g = ctc_grad(log_softmax(logits), y)
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd[idx] = (ctc_loss(log_softmax(up), y) - ctc_loss(log_softmax(dn), y)) / (2 * eps)
    return _rel(g, fd)


def _rnnt_fd(lattice, y, eps=1e-5):
    d_blank, d_label, _ = rnnt_grad(lattice, y)
    worst = 0.0
    for arr, grad in ((lattice.blank_logits, d_blank), (lattice.label_logits, d_label)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            up = rnnt_loss(lattice, y)
            arr[idx] = keep - eps
            dn = rnnt_loss(lattice, y)
            arr[idx] = keep
            fd[idx] = (up - dn) / (2 * eps)
        worst = max(worst, _rel(grad, fd))
    return worst


@pytest.mark.criterion(4, "CTC and transducer gradients match central differences (50 each)")
def test_c04_gradients():
    rng = np.random.default_rng(4)
    ctc_errs, rnnt_errs = [], []
    while len(ctc_errs) < 50:
        T, U, V = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        y = rng.integers(1, V + 1, size=U).tolist()
        if ctc_is_feasible(y, T):
            ctc_errs.append(_ctc_fd(rng.normal(size=(T, V + 1)), y))
    for _ in range(50):
        lattice, y = random_rnnt_instance(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4)))
        rnnt_errs.append(_rnnt_fd(lattice, y))
    ok = max(ctc_errs) <= 1e-5 and max(rnnt_errs) <= 1e-5
    report(4, ok, f"worst relative error ctc {max(ctc_errs):.1e}, transducer {max(rnnt_errs):.1e}")
    assert max(ctc_errs) <= 1e-5
    assert max(rnnt_errs) <= 1e-5


# -- 5, 6: search ------------------------------------------------------------------------------


class _ShiftedLm:
    """External LM over ids 1..V for CTC grids, whose id 1 is a label."""

    def __init__(self, lm):
        self.lm = lm

    def next_token_logprobs(self, prefix):
        v = self.lm.next_token_logprobs([k + 1 for k in prefix])
        return np.concatenate([[-math.inf], v[2:]])


def _lm(num_classes, rng):
    corpus = [rng.integers(2, num_classes, size=rng.integers(1, 5)).tolist() for _ in range(30)]
    return train_lm(corpus, 2, num_classes)


@pytest.mark.criterion(5, "exhaustive-beam search equals brute-force argmax, with and without fusion")
def test_c05_search_optimality():
    rng = np.random.default_rng(5)
    weights = [(0.0, 0.0), (0.3, 0.0), (0.0, 0.3), (0.3, 0.3)]
    checked = mismatches = 0
    for alpha, beta in weights:
        for T in range(1, 5):
            for V in (1, 2):
                for _ in range(4):
                    grid, _ = random_ctc_instance(rng, T, 0, V)
                    fusion = None
                    if alpha or beta:
                        prior = make_prior("model_unigram", [grid])
                        fusion = FusionConfig(alpha, beta, _ShiftedLm(_lm(V + 2, rng)), prior)
                    got = prefix_beam_search(grid, beam=10_000, fusion=fusion)[0]
                    want = brute_best_label_sequence(grid, fusion)
                    checked += 1
                    mismatches += got.tokens != want.tokens or abs(got.score - want.score) > 1e-9
        for T in range(1, 4):
            for V in (1, 2):
                for _ in range(4):
                    K = V + 2
                    model = init_hat(K, 3, pred_dim=4, joint_dim=5, seed=int(rng.integers(1 << 30)), scale=2.0)
                    enc = rng.normal(size=(T, 3))
                    fusion = FusionConfig(alpha, beta, _lm(K, rng)) if alpha or beta else None
                    got = label_sync_beam_search(enc, model, beam=10_000, fusion=fusion, max_output_length=3)[0]
                    want = brute_best_label_sequence((enc, model), fusion, u_max=3)
                    checked += 1
                    mismatches += got.tokens != want.tokens or abs(got.score - want.score) > 1e-9
    report(5, mismatches == 0, f"{checked - mismatches}/{checked} instances agree")
    assert mismatches == 0


@pytest.mark.criterion(6, "fusion with the model's own ILM at equal weights cancels (1e-9)")
def test_c06_fusion_cancellation():
    worst = 0.0
    same_order = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = init_hat(6, 4, seed=seed, scale=2.0)
        enc = rng.normal(size=(int(rng.integers(2, 6)), 4))
        for w in (0.3, 1.0):
            plain = label_sync_beam_search(enc, model, beam=6)
            fused = label_sync_beam_search(enc, model, beam=6, fusion=FusionConfig(w, w, InternalLm(model)))
            same_order &= [h.tokens for h in plain] == [h.tokens for h in fused]
            worst = max(worst, max(abs(p.score - f.score) for p, f in zip(plain, fused)))
    report(6, same_order and worst <= 1e-9, f"max score difference {worst:.1e}")
    assert same_order
    assert worst <= 1e-9


# -- 7: frame rates ----------------------------------------------------------------------------


@pytest.mark.criterion(7, "frame-rate arithmetic for the six pooling schedules")
def test_c07_frame_rates():
    schedules = [(2, 2), (3, 2), (2, 2, 2), (5, 2), (3, 2, 2), (2, 2, 2, 2)]
    got = [output_frame_ms(s) for s in schedules]
    # the same numbers through a full encoder configuration (10 ms features, 4x frontend)
    via_cfg = [
        10 * EncoderConfig(num_layers=8, pooling_schedule=tuple((4 + i, st) for i, st in enumerate(s))).reduction_factor
        for s in schedules
    ]
    ok = got == [160, 240, 320, 400, 480, 640] == via_cfg
    report(7, ok, f"{got}")
    assert got == [160, 240, 320, 400, 480, 640]
    assert via_cfg == got


# -- 8: structural asymmetry -------------------------------------------------------------------


def _successor_hat(num_classes: int, enc_dim: int) -> HatModel:
    """Joint that ignores the encoder, predicts the next label and is blank-heavy only after the last one."""
    K = num_classes
    succ = {SOS_ID: 2, **{k: k + 1 for k in range(2, K - 1)}, K - 1: 2}
    w_label = np.zeros((K, K))
    for k, nxt in succ.items():
        w_label[k, nxt] = 40.0
    return HatModel(
        emb1=3.0 * np.eye(K),
        emb2=np.zeros((K, K)),
        w_enc=np.zeros((enc_dim, K)),
        w_pred=np.eye(K),
        b_joint=np.zeros(K),
        w_blank=np.eye(K)[K - 1] * 25.0,
        b_blank=np.asarray(-20.0),
        w_label=w_label,
        b_label=np.zeros(K),
    )


@pytest.mark.criterion(8, "16x encoder: CTC infeasible, transducer emits all U > T labels")
def test_c08_structural_asymmetry():
    t_features = 32
    cfg = EncoderConfig(num_layers=4, model_dim=16, num_heads=2, pooling_schedule=((1, 2), (2, 2)))
    assert cfg.reduction_factor == 16
    feats = FeatureSequence(np.random.default_rng(8).normal(size=(t_features, 16)))
    out = encode(feats, cfg, init_params(cfg, 16))
    T = out.embeddings.shape[0]
    y = [2, 3, 4, 5, 6, 7]
    model = _successor_hat(8, cfg.model_dim)
    best = label_sync_beam_search(out, model, beam=4, max_symbols_per_frame=3)[0]
    feasible = ctc_is_feasible(y, T)
    ok = T == math.ceil(t_features / 16) and len(y) > T and not feasible and len(best.tokens) == len(y)
    report(8, ok, f"T={T}, U={len(y)}, ctc feasible={feasible}, transducer output {list(best.tokens)}")
    assert T == 2 and len(y) > T
    assert feasible is False
    assert list(best.tokens) == y


# -- 9: directional speedup --------------------------------------------------------------------


@pytest.mark.criterion(9, "4x pooled encoder: wall time <= 0.6x unpooled, attention FLOPs ratio >= 3")
def test_c09_directional_speedup():
    t0 = time.perf_counter()
    syn = SynthTaskConfig(tokens_min=100, tokens_max=100, frames_min=20, frames_max=21, allow_repeats=True)
    records = generate_synthetic(syn, 1)
    assert records[0].features.shape[0] >= 2048
    records[0] = dataclasses.replace(records[0], features=records[0].features[:2048])
    base = EncoderConfig(num_layers=4, model_dim=64, num_heads=4)
    pooled = dataclasses.replace(base, pooling_schedule=((0, 2), (1, 2)))
    bench = run_bench([base, pooled], records, synth_vocab(syn), BenchDecoder("ctc"), repetitions=3)
    plain, fast = bench
    ratio = fast.wall_ms / plain.wall_ms
    t_in = 2048 // 4
    flops_ratio = attention_cost(base, t_in).attention / attention_cost(pooled, t_in).attention
    seconds = time.perf_counter() - t0
    ok = ratio <= 0.6 and flops_ratio >= 3 and seconds < 120
    report(9, ok, f"wall ratio {ratio:.3f}, attention FLOPs ratio {flops_ratio:.2f}, {seconds:.1f}s")
    assert fast.frame_ms == 4 * plain.frame_ms
    assert ratio <= 0.6
    assert flops_ratio >= 3
    assert seconds < 120


# -- 10: end-to-end learning -------------------------------------------------------------------

ENC_2X = EncoderConfig(num_layers=2, model_dim=32, num_heads=4, frontend_strides=((2, 1),))
ENC_16X = EncoderConfig(num_layers=2, model_dim=32, num_heads=4, pooling_schedule=((0, 2), (1, 2)))


def _examples(syn, count, cfg, params, vocab, prefix):
    recs = generate_synthetic(syn, count, prefix)
    return [
        ToyExample(encode(FeatureSequence(r.features), cfg, params).embeddings, tokenize(vocab, r.transcript))
        for r in recs
    ]


@pytest.mark.slow
@pytest.mark.criterion(10, "copy task: CTC and transducer >= 95%, long utterances worse at 16x than 2x")
def test_c10_end_to_end_learning():
    t0 = time.perf_counter()
    syn = SynthTaskConfig()  # alphabet 8, 2-6 tokens, noise free, length_diverse off
    vocab = synth_vocab(syn)
    held_cfg = dataclasses.replace(syn, seed=1)
    # three times the training length: 6 to 18 tokens
    long_cfg = dataclasses.replace(syn, seed=2, tokens_min=3 * syn.tokens_min, tokens_max=3 * syn.tokens_max)
    results = {}
    for name, cfg in (("2x", ENC_2X), ("16x", ENC_16X)):
        params = init_params(cfg, syn.feature_dim)
        train = _examples(syn, 200, cfg, params, vocab, "train")
        held = _examples(held_cfg, 50, cfg, params, vocab, "eval")
        long = _examples(long_cfg, 50, cfg, params, vocab, "long")
        if name == "2x":
            ctc = toy_train("ctc", train, held, vocab.num_classes, steps=150, step_size=0.3)
            results["ctc"] = ctc.heldout_accuracy
        rnnt = toy_train("rnnt", train, held, vocab.num_classes, steps=1500, step_size=0.06, batch_size=20)
        results[f"rnnt {name}"] = rnnt.heldout_accuracy
        results[f"rnnt {name} long"] = evaluate("rnnt", rnnt.params, long)
    seconds = time.perf_counter() - t0
    ok = (
        results["ctc"] >= 0.95
        and results["rnnt 2x"] >= 0.95
        and results["rnnt 16x long"] < results["rnnt 2x long"]
        and seconds < 600
    )
    report(10, ok, ", ".join(f"{k} {v:.3f}" for k, v in results.items()) + f", {seconds:.0f}s")
    assert results["ctc"] >= 0.95
    assert results["rnnt 2x"] >= 0.95
    assert results["rnnt 16x long"] < results["rnnt 2x long"]
    assert seconds < 600


# -- 11: WER ------------------------------------------------------------------------------------


def _quadratic_edit_distance(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


@pytest.mark.criterion(11, "WER against an independent edit distance (1000 pairs) and hand cases")
def test_c11_wer():
    rng = np.random.default_rng(11)
    words = ["the", "cat", "sat", "on", "a", "mat"]
    disagreements = 0
    for _ in range(1000):
        ref = [words[i] for i in rng.integers(0, len(words), size=rng.integers(1, 9))]
        hyp = [words[i] for i in rng.integers(0, len(words), size=rng.integers(0, 9))]
        w = wer(" ".join(ref), " ".join(hyp))
        want = _quadratic_edit_distance(ref, hyp)
        disagreements += w.errors != want or edit_distance(ref, hyp) != want or w.ref_len != len(ref)
    exact = wer("a b c", "a b c")
    one_sub = wer("a b c", "a x c")
    ok = disagreements == 0 and exact.rate == 0.0 and round(100 * one_sub.rate, 1) == 33.3
    report(11, ok, f"{1000 - disagreements}/1000 agree, hand cases {100 * exact.rate:.1f}% and {100 * one_sub.rate:.1f}%")
    assert disagreements == 0
    assert exact.errors == 0 and exact.rate == 0.0
    assert (one_sub.substitutions, one_sub.insertions, one_sub.deletions) == (1, 0, 0)
    assert round(100 * one_sub.rate, 1) == 33.3
