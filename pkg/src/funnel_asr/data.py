"""Synthetic utterances, the dataset file format and run configuration files.

Dataset files are line-delimited JSON. Line 1 is a header::

    {"format": "funnel-asr-dataset/1", "feature_dim": d, "count": n,
     "frame_shift_ms": 10.0, "sidecar": null}

and each following line is one utterance with ``id``, ``transcript`` and
either inline ``features`` (nested arrays) or ``features_ref`` =
``{"offset": bytes, "rows": T}`` pointing into the sidecar file named in the
header (raw little-endian float64, ``T x d`` row-major).

Config files are flat ``key = value`` lines with section prefixes
(``encoder.num_layers = 4``); ``#`` starts a comment. Values are parsed by the
declared type of the matching dataclass field.
"""

from __future__ import annotations

import dataclasses
import json
import string
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from funnel_asr.encoder import EncoderConfig
from funnel_asr.vocab import Vocabulary, build_vocab, detokenize

DATASET_FORMAT = "funnel-asr-dataset/1"
ALPHABET = string.ascii_lowercase


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- synthetic task ----------------------------------------------------------------


@dataclass(frozen=True)
class SynthTaskConfig:
    alphabet_size: int = 8
    tokens_min: int = 2
    tokens_max: int = 6
    frames_min: int = 16
    frames_max: int = 24
    noise: float = 0.0
    feature_dim: int = 16
    length_diverse: bool = False
    long_factor: int = 3
    onset_frames: int = 4
    onset_value: float = 4.0
    allow_repeats: bool = False
    pattern_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.alphabet_size <= len(ALPHABET):
            raise ConfigError(f"alphabet_size must be in 1..{len(ALPHABET)}")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ConfigError("need 1 <= tokens_min <= tokens_max")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ConfigError("need 1 <= frames_min <= frames_max")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if not 1 <= self.onset_frames <= self.frames_min:
            raise ConfigError("need 1 <= onset_frames <= frames_min")
        if not self.allow_repeats and self.alphabet_size < 2 and self.tokens_max > 1:
            raise ConfigError("without repeats a multi-token utterance needs alphabet_size >= 2")
        if self.long_factor < 1:
            raise ConfigError("long_factor must be >= 1")


@dataclass
class UtteranceRecord:
    id: str
    transcript: str
    features: np.ndarray | None = None


def synth_vocab(cfg: SynthTaskConfig) -> Vocabulary:
    letters = ALPHABET[: cfg.alphabet_size]
    return build_vocab([letters], cfg.alphabet_size + 2)


def token_patterns(cfg: SynthTaskConfig) -> np.ndarray:
    """One fixed feature pattern per token; the last feature dim is reserved for onsets."""
    rng = np.random.default_rng(cfg.pattern_seed)
    return rng.normal(size=(cfg.alphabet_size, cfg.feature_dim - 1))


def generate_synthetic(cfg: SynthTaskConfig, count: int, id_prefix: str = "utt") -> list[UtteranceRecord]:
    """Sample token sequences and render each token as a block of frames.

    A block repeats the token's pattern (plus Gaussian noise) and marks its
    first ``onset_frames`` frames in the onset channel, so repeated tokens
    stay separable. With
    ``length_diverse`` half of the utterances use ``long_factor`` times more
    tokens. Unless ``allow_repeats`` is set, neighbouring tokens differ.
    """
    cfg.validate()
    if count < 0:
        raise ConfigError("count must be >= 0")
    vocab = synth_vocab(cfg)
    patterns = token_patterns(cfg)
    rng = np.random.default_rng(cfg.seed)
    out = []
    width = max(len(str(max(count - 1, 0))), 4)
    for i in range(count):
        lo, hi = cfg.tokens_min, cfg.tokens_max
        if cfg.length_diverse and rng.random() < 0.5:
            lo, hi = lo * cfg.long_factor, hi * cfg.long_factor
        n = int(rng.integers(lo, hi + 1))
        if cfg.allow_repeats:
            toks = rng.integers(0, cfg.alphabet_size, size=n).tolist()
        else:
            # draw from the alphabet minus the previous token
            toks = [int(rng.integers(cfg.alphabet_size))]
            for _ in range(n - 1):
                step = int(rng.integers(1, cfg.alphabet_size))
                toks.append((toks[-1] + step) % cfg.alphabet_size)
        blocks = []
        for tok in toks:
            frames = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
            block = np.zeros((frames, cfg.feature_dim))
            block[:, :-1] = patterns[tok]
            block[: cfg.onset_frames, -1] = cfg.onset_value
            blocks.append(block)
        feats = np.concatenate(blocks)
        if cfg.noise > 0:
            feats = feats + cfg.noise * rng.normal(size=feats.shape)
        ids = [vocab.label_ids[0] + int(t) for t in toks]
        out.append(UtteranceRecord(f"{id_prefix}{i:0{width}d}", detokenize(vocab, ids), feats))
    return out


# -- dataset files -------------------------------------------------------------------


def write_dataset(
    path,
    records: Sequence[UtteranceRecord],
    feature_dim: int,
    frame_shift_ms: float = 10.0,
    sidecar: bool = False,
) -> None:
    path = Path(path)
    side_name = path.name + ".bin" if sidecar else None
    header = {
        "count": len(records),
        "feature_dim": feature_dim,
        "format": DATASET_FORMAT,
        "frame_shift_ms": frame_shift_ms,
        "sidecar": side_name,
    }
    lines = [json.dumps(header, sort_keys=True)]
    blob = bytearray()
    for r in records:
        rec: dict = {"id": r.id, "transcript": r.transcript}
        if r.features is not None:
            feats = np.asarray(r.features, dtype="<f8")
            if feats.ndim != 2 or feats.shape[1] != feature_dim:
                raise DataError(f"{r.id}: features must be T x {feature_dim}")
            if sidecar:
                rec["features_ref"] = {"offset": len(blob), "rows": int(feats.shape[0])}
                blob.extend(feats.tobytes())
            else:
                rec["features"] = feats.tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if sidecar:
        (path.parent / side_name).write_bytes(bytes(blob))


def read_dataset(path) -> tuple[dict, list[UtteranceRecord]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: bad header: {e}") from e
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: unknown dataset format {header.get('format')!r}")
    d = int(header["feature_dim"])
    blob = None
    if header.get("sidecar"):
        blob = (path.parent / header["sidecar"]).read_bytes()
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: {e}") from e
        feats = None
        if "features" in rec:
            feats = np.asarray(rec["features"], dtype=np.float64).reshape(-1, d)
        elif "features_ref" in rec:
            if blob is None:
                raise DataError(f"{path}:{n}: features_ref without a sidecar file")
            ref = rec["features_ref"]
            size = ref["rows"] * d * 8
            feats = np.frombuffer(blob[ref["offset"] : ref["offset"] + size], dtype="<f8").reshape(ref["rows"], d).copy()
        records.append(UtteranceRecord(rec["id"], rec["transcript"], feats))
    if len(records) != header["count"]:
        raise DataError(f"{path}: header says {header['count']} records, found {len(records)}")
    return header, records


# -- run configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderConfig:
    beam: int = 8
    max_symbols_per_frame: int = 8
    top_k: int = 16


@dataclass(frozen=True)
class FusionSettings:
    enabled: bool = False
    alpha: float = 0.0
    beta: float = 0.0
    prior: str = "none"  # none | blank_downscale | model_unigram
    blank_penalty: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 150
    step_size: float = 0.3
    batch_size: int = 0  # 0 = full batch
    pred_dim: int = 16
    joint_dim: int = 32
    train_count: int = 200
    eval_count: int = 50


@dataclass(frozen=True)
class LmSettings:
    order: int = 3
    ratio: float = 0.5
    draws: int = 10000
    weight: float = 0.9


@dataclass(frozen=True)
class PathsConfig:
    vocab: str = "vocab.txt"
    train: str = "train.jsonl"
    eval: str = "eval.jsonl"
    lm: str = "lm.txt"
    model: str = "model.bin"
    text: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: str = "ctc"
    vocab_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    synth: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LmSettings = field(default_factory=LmSettings)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.model not in ("ctc", "rnnt"):
            raise ConfigError(f"model must be ctc or rnnt, got {self.model!r}")
        if self.decoder.beam < 1 or self.decoder.max_symbols_per_frame < 1:
            raise ConfigError("decoder.beam and decoder.max_symbols_per_frame must be >= 1")
        if self.fusion.prior not in ("none", "blank_downscale", "model_unigram"):
            raise ConfigError(f"unknown fusion.prior {self.fusion.prior!r}")
        self.synth.validate()
        try:
            self.encoder.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e


def _encode_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(":".join(str(x) for x in pair) for pair in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _decode_value(text: str, tp, key: str):
    try:
        origin = typing.get_origin(tp)
        args = typing.get_args(tp)
        if origin in (typing.Union, types.UnionType):
            if text == "none":
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _decode_value(text, inner, key)
        if tp is bool:
            if text not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text == "true"
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            if not text:
                return ()
            return tuple(tuple(int(x) for x in item.split(":")) for item in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    raise ConfigError(f"{key}: unsupported type {tp}")


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(hints[f.name]):
            for sub in dataclasses.fields(value):
                lines.append(f"{f.name}.{sub.name} = {_encode_value(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_encode_value(value)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key}")
        raw[key] = value.strip()
    if "seed" not in raw:
        raise ConfigError("config must set seed")
    hints = typing.get_type_hints(RunConfig)
    top: dict = {}
    sections: dict[str, dict] = {}
    for key, value in raw.items():
        head, dot, tail = key.partition(".")
        if head not in hints:
            raise ConfigError(f"unknown key {key}")
        tp = hints[head]
        if dataclasses.is_dataclass(tp):
            if not dot:
                raise ConfigError(f"{key} is a section, not a key")
            sub_hints = typing.get_type_hints(tp)
            if tail not in sub_hints:
                raise ConfigError(f"unknown key {key}")
            sections.setdefault(head, {})[tail] = _decode_value(value, sub_hints[tail], key)
        else:
            if dot:
                raise ConfigError(f"unknown key {key}")
            top[head] = _decode_value(value, tp, key)
    try:
        for head, values in sections.items():
            top[head] = hints[head](**values)
        cfg = RunConfig(**top)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_text(text)
