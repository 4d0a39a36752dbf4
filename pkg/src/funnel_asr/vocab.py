"""Word-piece vocabulary with BPE-style construction and greedy tokenisation.

Ids 0 and 1 are reserved for the blank symbol and the start-of-sentence
symbol; text pieces start at id 2. Spaces are rewritten to ``SPACE_MARKER``
before tokenisation, so pieces never contain a literal space.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BLANK_ID = 0
SOS_ID = 1
FIRST_LABEL_ID = 2
BLANK_PIECE = "<b>"
SOS_PIECE = "<s>"
SPACE_MARKER = "▁"


class UnknownCharacterError(ValueError):
    def __init__(self, char: str, byte_offset: int):
        super().__init__(f"unknown character {char!r} at byte offset {byte_offset}")
        self.char = char
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class Vocabulary:
    pieces: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.pieces) < 2 or self.pieces[BLANK_ID] != BLANK_PIECE or self.pieces[SOS_ID] != SOS_PIECE:
            raise ValueError("pieces must start with the reserved <b> and <s> symbols")
        index = {}
        for i, p in enumerate(self.pieces):
            if not p:
                raise ValueError(f"empty piece at id {i}")
            if p in index:
                raise ValueError(f"duplicate piece {p!r}")
            index[p] = i
        object.__setattr__(self, "_index", index)

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def sos_id(self) -> int:
        return SOS_ID

    @property
    def size(self) -> int:
        """Number of output symbols excluding blank (|V|)."""
        return len(self.pieces) - 1

    @property
    def num_classes(self) -> int:
        """Width of model output layers: every id including both reserved ones."""
        return len(self.pieces)

    @property
    def label_ids(self) -> range:
        return range(FIRST_LABEL_ID, len(self.pieces))

    @property
    def max_piece_len(self) -> int:
        return max(len(p) for p in self.pieces[FIRST_LABEL_ID:]) if len(self.pieces) > FIRST_LABEL_ID else 0

    def id_of(self, piece: str) -> int:
        return self._index[piece]

    def __contains__(self, piece: str) -> bool:
        return piece in self._index

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def _to_marked(text: str) -> str:
    return text.replace(" ", SPACE_MARKER)


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Grow a vocabulary from the corpus alphabet by repeated pair merges.

    Each round merges the most frequent adjacent pair; ties go to the merged
    string that sorts first. Growth stops at ``target_size`` pieces (reserved
    symbols included) or when no pair occurs any more.
    """
    lines = [_to_marked(line) for line in corpus]
    lines = [line for line in lines if line]
    if not lines:
        raise ValueError("corpus is empty")
    alphabet = sorted({ch for line in lines for ch in line})
    if target_size < len(alphabet) + 2:
        raise ValueError(
            f"target_size {target_size} cannot hold {len(alphabet)} characters plus 2 reserved symbols"
        )
    pieces = [BLANK_PIECE, SOS_PIECE, *alphabet]
    seen = set(pieces)
    seqs = [list(line) for line in lines]
    while len(pieces) < target_size:
        pairs: Counter = Counter()
        for seq in seqs:
            for a, b in zip(seq, seq[1:]):
                pairs[(a, b)] += 1
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0][0] + kv[0][1]))
        merged = a + b
        for i, seq in enumerate(seqs):
            out = []
            j = 0
            while j < len(seq):
                if j + 1 < len(seq) and seq[j] == a and seq[j + 1] == b:
                    out.append(merged)
                    j += 2
                else:
                    out.append(seq[j])
                    j += 1
            seqs[i] = out
        if merged not in seen:
            seen.add(merged)
            pieces.append(merged)
    return Vocabulary(tuple(pieces))


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """Greedy longest-match segmentation, left to right."""
    marked = _to_marked(text)
    longest = vocab.max_piece_len
    ids = []
    i = 0
    while i < len(marked):
        for n in range(min(longest, len(marked) - i), 0, -1):
            piece = marked[i : i + n]
            if piece in vocab and vocab.id_of(piece) >= FIRST_LABEL_ID:
                ids.append(vocab.id_of(piece))
                i += n
                break
        else:
            raise UnknownCharacterError(text[i], len(text[:i].encode("utf-8")))
    return ids


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    ids = list(ids)
    if ids and ids[0] == SOS_ID:
        ids = ids[1:]
    parts = []
    for pos, i in enumerate(ids):
        if not 0 <= i < len(vocab.pieces):
            raise ValueError(f"token id {i} out of range at position {pos}")
        if i == BLANK_ID:
            raise ValueError(f"blank id at position {pos}")
        if i == SOS_ID:
            raise ValueError(f"start-of-sentence id at position {pos}")
        parts.append(vocab.pieces[i])
    return "".join(parts).replace(SPACE_MARKER, " ")
