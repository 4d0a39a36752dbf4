"""Command-line entry point.

Every verb takes ``--config`` (a run configuration file) and ``--out`` (the
run directory). Relative ``paths.*`` entries are resolved against the run
directory, so a whole pipeline can live in one folder::

    funnel-asr generate  --config run.cfg --out run/
    funnel-asr train-lm  --config run.cfg --out run/
    funnel-asr train-toy --config run.cfg --out run/
    funnel-asr decode    --config run.cfg --out run/ --beam 4
    funnel-asr eval      --config run.cfg --out run/

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from funnel_asr.container import load_params, save_params
from funnel_asr.ctc import greedy_decode, make_prior, prefix_beam_search
from funnel_asr.data import (
    ConfigError,
    DataError,
    RunConfig,
    generate_synthetic,
    load_config,
    read_dataset,
    synth_vocab,
    write_dataset,
)
from funnel_asr.encoder import EncoderConfig, FeatureSequence, encode, init_params
from funnel_asr.evaluation import BenchDecoder, corpus_wer, render_table, run_bench, token_accuracy
from funnel_asr.fusion import FusionConfig, Hypothesis, format_nbest
from funnel_asr.lm import NGramLm, mix_corpora, train_lm
from funnel_asr.oracle import oracle_sweep
from funnel_asr.training import ToyExample, ctc_head_grid, toy_train
from funnel_asr.transducer import HatModel, label_sync_beam_search
from funnel_asr.vocab import UnknownCharacterError, Vocabulary, build_vocab, detokenize, tokenize

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# stride schedules of the frame-rate table: 160, 240, 320, 400, 480 and 640 ms
TABLE_SCHEDULES = ((2, 2), (3, 2), (2, 2, 2), (5, 2), (3, 2, 2), (2, 2, 2, 2))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -----------------------------------------------------------------------------


def parse_frame_schedule(text: str, num_layers: int, start_layer: int | None = None) -> tuple[tuple[int, int], ...]:
    """``"1:2,2:2"`` (layer:stride pairs) or ``"2x2"`` / ``"2x2@4"`` (strides from a start layer)."""
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        if ":" in text:
            return tuple(tuple(int(x) for x in item.split(":")) for item in text.split(","))
        strides, _, at = text.partition("@")
        values = [int(s) for s in strides.split("x")]
    except ValueError as e:
        raise ConfigError(f"bad frame schedule {text!r}") from e
    if at:
        start = int(at)
    elif start_layer is not None:
        start = start_layer
    else:
        start = max(0, min(num_layers // 2, num_layers - len(values)))
    return tuple((start + i, s) for i, s in enumerate(values))


def _path(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


def _need(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing file {path}")
    return path


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    dec, fus, enc = cfg.decoder, cfg.fusion, cfg.encoder
    if getattr(args, "beam", None) is not None:
        dec = dataclasses.replace(dec, beam=args.beam)
    if getattr(args, "alpha", None) is not None:
        fus = dataclasses.replace(fus, alpha=args.alpha, enabled=True)
    if getattr(args, "beta", None) is not None:
        fus = dataclasses.replace(fus, beta=args.beta, enabled=True)
    if getattr(args, "frame_schedule", None) and getattr(args, "verb", "") != "bench":
        try:
            enc = dataclasses.replace(enc, pooling_schedule=parse_frame_schedule(args.frame_schedule, enc.num_layers))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    cfg = dataclasses.replace(cfg, decoder=dec, fusion=fus, encoder=enc)
    cfg.validate()
    return cfg


def _load_vocab(cfg: RunConfig, out: Path) -> Vocabulary:
    try:
        return Vocabulary.load(_need(_path(out, cfg.paths.vocab)))
    except (OSError, ValueError) as e:
        raise DataError(f"bad vocabulary: {e}") from e


def _load_records(path: Path):
    _, records = read_dataset(_need(path))
    return records


def _encode_all(records, enc_cfg: EncoderConfig, enc_params: dict):
    out = []
    for r in records:
        if r.features is None:
            raise DataError(f"{r.id}: no features")
        try:
            out.append(encode(FeatureSequence(r.features), enc_cfg, enc_params).embeddings)
        except ValueError as e:
            raise DataError(f"{r.id}: {e}") from e
    return out


def _tokens(vocab: Vocabulary, records):
    try:
        return [tokenize(vocab, r.transcript) for r in records]
    except UnknownCharacterError as e:
        raise DataError(str(e)) from e


def _feature_dim(records, cfg: RunConfig) -> int:
    for r in records:
        if r.features is not None:
            return r.features.shape[1]
    return cfg.synth.feature_dim


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- verbs ----------------------------------------------------------------------------------


def cmd_build_vocab(cfg: RunConfig, out: Path, args) -> int:
    if cfg.paths.text:
        text = _need(_path(out, cfg.paths.text)).read_text(encoding="utf-8").splitlines()
    else:
        text = [r.transcript for r in _load_records(_path(out, cfg.paths.train))]
    try:
        vocab = build_vocab(text, cfg.vocab_size)
    except ValueError as e:
        raise DataError(str(e)) from e
    vocab.save(_path(out, cfg.paths.vocab))
    _print({"pieces": len(vocab.pieces), "vocab": str(_path(out, cfg.paths.vocab))})
    return EXIT_OK


def cmd_generate(cfg: RunConfig, out: Path, args) -> int:
    syn = cfg.synth
    train = generate_synthetic(syn, cfg.train.train_count, "train")
    held = generate_synthetic(dataclasses.replace(syn, seed=syn.seed + 1), cfg.train.eval_count, "eval")
    write_dataset(_path(out, cfg.paths.train), train, syn.feature_dim, sidecar=args.sidecar)
    write_dataset(_path(out, cfg.paths.eval), held, syn.feature_dim, sidecar=args.sidecar)
    synth_vocab(syn).save(_path(out, cfg.paths.vocab))
    _print({"train": len(train), "eval": len(held)})
    return EXIT_OK


def cmd_train_lm(cfg: RunConfig, out: Path, args) -> int:
    vocab = _load_vocab(cfg, out)
    seqs = _tokens(vocab, _load_records(_path(out, cfg.paths.train)))
    if cfg.paths.text:
        lines = _need(_path(out, cfg.paths.text)).read_text(encoding="utf-8").splitlines()
        try:
            other = [tokenize(vocab, line) for line in lines if line.strip()]
        except UnknownCharacterError as e:
            raise DataError(str(e)) from e
        try:
            corpus = mix_corpora(seqs, other, cfg.lm.ratio, cfg.seed).sequences(cfg.lm.draws)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    else:
        corpus = seqs
    lm = train_lm(corpus, cfg.lm.order, vocab.num_classes, (cfg.lm.weight,) * cfg.lm.order)
    lm.save(_path(out, cfg.paths.lm))
    _print({"order": lm.order, "sequences": len(corpus)})
    return EXIT_OK


def cmd_train_toy(cfg: RunConfig, out: Path, args) -> int:
    vocab = _load_vocab(cfg, out)
    train = _load_records(_path(out, cfg.paths.train))
    held = _load_records(_path(out, cfg.paths.eval))
    enc_params = init_params(cfg.encoder, _feature_dim(train, cfg))
    make = lambda recs: [
        ToyExample(h, y) for h, y in zip(_encode_all(recs, cfg.encoder, enc_params), _tokens(vocab, recs))
    ]
    t = cfg.train
    res = toy_train(
        cfg.model,
        make(train),
        make(held),
        vocab.num_classes,
        t.steps,
        t.step_size,
        seed=cfg.seed,
        batch_size=t.batch_size,
        pred_dim=t.pred_dim,
        joint_dim=t.joint_dim,
        beam=cfg.decoder.beam,
        max_symbols_per_frame=cfg.decoder.max_symbols_per_frame,
    )
    tensors = {f"head.{k}": v for k, v in res.params.items()}
    tensors.update({f"encoder.{k}": v for k, v in enc_params.items()})
    meta = {
        "kind": cfg.model,
        "num_classes": vocab.num_classes,
        "encoder_seed": cfg.encoder.seed,
        "steps": t.steps,
        "final_loss": res.losses[-1] if res.losses else None,
        "heldout_accuracy": res.heldout_accuracy,
    }
    save_params(_path(out, cfg.paths.model), tensors, meta)
    (out / "loss.csv").write_text("step,loss,best\n" + "".join(
        f"{i},{a!r},{b!r}\n" for i, (a, b) in enumerate(zip(res.losses, res.best_losses))
    ))
    _print({"final_loss": meta["final_loss"], "heldout_accuracy": res.heldout_accuracy, "skipped": res.skipped})
    return EXIT_OK


def _load_model(cfg: RunConfig, out: Path):
    try:
        tensors, meta = load_params(_need(_path(out, cfg.paths.model)))
    except (OSError, ValueError) as e:
        raise DataError(f"bad model file: {e}") from e
    if meta.get("kind") != cfg.model:
        raise ConfigError(f"model file holds a {meta.get('kind')} model, config says {cfg.model}")
    head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
    enc = {k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")}
    return head, enc, meta


def _fusion(cfg: RunConfig, out: Path, num_classes: int, grids=None) -> FusionConfig | None:
    f = cfg.fusion
    if not f.enabled:
        return None
    lm = None
    if f.beta != 0.0:
        try:
            lm = NGramLm.load(_need(_path(out, cfg.paths.lm)))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"bad LM file: {e}") from e
        if lm.num_classes != num_classes:
            raise ConfigError("LM and vocabulary disagree on the number of ids")
    prior = None
    if cfg.model == "ctc" and f.prior != "none":
        prior = make_prior(f.prior, grids, num_classes=num_classes, blank_penalty=f.blank_penalty)
    return FusionConfig(f.alpha, f.beta, lm, prior)


def decode_records(cfg: RunConfig, out: Path, records, vocab: Vocabulary):
    """Best-first hypothesis lists per record plus the decoding path used."""
    head, enc_params, _ = _load_model(cfg, out)
    frames = _encode_all(records, cfg.encoder, enc_params)
    beam = cfg.decoder.beam
    if cfg.model == "ctc":
        grids = [ctc_head_grid(head, h) for h in frames]
        fusion = _fusion(cfg, out, vocab.num_classes, grids)
        if fusion is None:
            hyps = []
            for g in grids:
                # score of the single best alignment
                best_path = float(g.max(axis=1).sum())
                hyps.append([Hypothesis(tuple(greedy_decode(g)), best_path, best_path)])
            return hyps, "greedy"
        return [prefix_beam_search(g, beam, fusion, cfg.decoder.top_k) for g in grids], "prefix-beam"
    model = HatModel.from_dict(head)
    fusion = _fusion(cfg, out, vocab.num_classes)
    hyps = [
        label_sync_beam_search(h, model, beam, fusion, cfg.decoder.max_symbols_per_frame) for h in frames
    ]
    return hyps, "label-sync-beam"


def cmd_decode(cfg: RunConfig, out: Path, args) -> int:
    vocab = _load_vocab(cfg, out)
    records = _load_records(_path(out, cfg.paths.eval))
    all_hyps, path = decode_records(cfg, out, records, vocab)
    nbest, best = [], []
    for r, hyps in zip(records, all_hyps):
        texts = [detokenize(vocab, h.tokens) for h in hyps]
        nbest += format_nbest(r.id, hyps, texts)
        best.append(f"{r.id}\t{texts[0] if texts else ''}")
    (out / "nbest.tsv").write_text("".join(line + "\n" for line in nbest), encoding="utf-8")
    (out / "hyps.txt").write_text("".join(line + "\n" for line in best), encoding="utf-8")
    _print({"decoder": path, "utterances": len(records)})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    vocab = _load_vocab(cfg, out)
    records = _load_records(_path(out, cfg.paths.eval))
    hyp_path = _need(Path(args.hyps) if args.hyps else out / "hyps.txt")
    hyps = {}
    for line in hyp_path.read_text(encoding="utf-8").splitlines():
        uid, _, text = line.partition("\t")
        hyps[uid] = text
    missing = [r.id for r in records if r.id not in hyps]
    if missing:
        raise DataError(f"no hypothesis for {missing[0]} ({len(missing)} missing)")
    w = corpus_wer([(r.transcript, hyps[r.id]) for r in records])
    acc = token_accuracy(_tokens(vocab, records), [tokenize(vocab, hyps[r.id]) for r in records])
    report = {
        "wer": w.rate,
        "substitutions": w.substitutions,
        "insertions": w.insertions,
        "deletions": w.deletions,
        "ref_words": w.ref_len,
        "token_accuracy": acc,
    }
    (out / "wer.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    _print(report)
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    vocab = _load_vocab(cfg, out)
    records = _load_records(_path(out, cfg.paths.eval))[: args.limit]
    if not records:
        raise DataError("evaluation set is empty")
    enc = cfg.encoder
    if args.frame_schedule:
        specs = [s for s in args.frame_schedule.split(";") if s.strip()]
        schedules = [parse_frame_schedule(s, enc.num_layers, args.start_layer) for s in specs]
    else:
        start = args.start_layer if args.start_layer is not None else enc.num_layers // 2
        schedules = [tuple((start + i, s) for i, s in enumerate(sch)) for sch in TABLE_SCHEDULES]
    try:
        sweep = [dataclasses.replace(enc, pooling_schedule=s) for s in schedules]
    except ValueError as e:
        raise ConfigError(str(e)) from e
    decoder = BenchDecoder(cfg.model, cfg.decoder.beam, cfg.decoder.max_symbols_per_frame, cfg.seed)
    records_out = run_bench(sweep, records, vocab, decoder, repetitions=args.repetitions)
    text, table = render_table(records_out)
    (out / "bench.csv").write_text(table)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig, out: Path, args) -> int:
    cells = oracle_sweep(args.instances, cfg.seed)
    failed = [c for c in cells if not c.passed]
    for c in cells:
        print(f"{c.check} T={c.T} U={c.U} V={c.V} max_err={c.max_error:.3e} {'pass' if c.passed else 'FAIL'}")
    print(f"{len(cells) - len(failed)}/{len(cells)} cells pass")
    return EXIT_NUMERIC if failed else EXIT_OK


VERBS = {
    "build-vocab": cmd_build_vocab,
    "generate": cmd_generate,
    "train-lm": cmd_train_lm,
    "train-toy": cmd_train_toy,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="funnel-asr", description="Toy-scale funnel-pooled speech recognition pipeline.")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)
    for name in VERBS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="run configuration file")
        s.add_argument("--out", default=".", help="run directory (default: current directory)")
        if name in ("decode", "train-toy", "bench"):
            s.add_argument("--beam", type=int)
            s.add_argument("--frame-schedule", help="'layer:stride,...', 'SxS[@start]'; bench takes a ';' list")
        if name == "decode":
            s.add_argument("--alpha", type=float)
            s.add_argument("--beta", type=float)
        if name == "generate":
            s.add_argument("--sidecar", action="store_true", help="store features in a binary side file")
        if name == "eval":
            s.add_argument("--hyps", help="hypothesis file (default: OUT/hyps.txt)")
        if name == "bench":
            s.add_argument("--limit", type=int, default=8, help="utterances to time")
            s.add_argument("--repetitions", type=int, default=3)
            s.add_argument("--start-layer", type=int)
        if name == "oracle-check":
            s.add_argument("--instances", type=int, default=200)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verb is None:
            raise UsageError("missing verb; choose one of " + ", ".join(VERBS))
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _with_overrides(load_config(args.config), args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return VERBS[args.verb](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, UnknownCharacterError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
