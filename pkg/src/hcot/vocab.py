"""Closed word-plus-character vocabulary shared by every model in a run.

Text is split into pieces: template words, single digits and single
punctuation characters. Each piece has two entries, with and without a
leading space, so decoding reproduces the original bytes exactly. Encoding
always assumes a space before the first piece; decoding strips it again.
"""

from __future__ import annotations

import hashlib
import re
from typing import Iterable, Sequence

PAD, BOS, SEP, EOS, EOT, COT = range(6)
SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[SEP]", "[EOS]", "[EOT]", "[CoT]")
COT_TEXT = "[CoT]"

WORDS = (
    # chain arithmetic
    "Start", "with", "Add", "Subtract", "Multiply", "by", "We", "apply", "step",
    "steps", "in", "order", "starting", "from", "Answer", "Step", "says", "to",
    "add", "subtract", "multiply", "so", "take", "the", "current", "value", "and",
    "it", "plus", "minus", "times", "gives", "which", "is", "new", "that", "of",
    "keep", "as", "result", "final", "This", "was", "last",
    # kb lookup
    "What", "does", "map", "after", "lookups", "lookup", "Action", "Observation",
    "finish", "I", "need", "find", "what", "maps", "because", "question", "asks",
    "where", "chain", "ends", "this", "next", "thing", "do", "look", "up", "store",
    "there", "are", "no", "more", "left", "answer", "should", "be", "done",
    "now", "reached", "at", "we", "The", "There",
)
DIGITS = tuple("0123456789")
PUNCT = tuple(".,:?[]+-*=")

_PIECE_RE = re.compile(r" ?(?:[A-Za-z]+|\d|[^\sA-Za-z\d])")


class UnknownTokenError(ValueError):
    pass


class Vocab:
    def __init__(self, base_pieces: Iterable[str] = WORDS + DIGITS + PUNCT):
        pieces = list(SPECIAL_TOKENS)
        for p in base_pieces:
            pieces.append(p)
            pieces.append(" " + p)
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate vocabulary pieces")
        self.pieces = pieces
        self.index = {p: i for i, p in enumerate(pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.pieces).encode()).hexdigest()

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        spaced = " " + text
        ids = []
        pos = 0
        for m in _PIECE_RE.finditer(spaced):
            if m.start() != pos:
                raise UnknownTokenError(f"cannot tokenize {spaced[pos:m.start()]!r} in {text!r}")
            piece = m.group(0)
            try:
                ids.append(self.index[piece])
            except KeyError:
                raise UnknownTokenError(f"unknown token {piece.strip()!r} in {text!r}") from None
            pos = m.end()
        if pos != len(spaced):
            raise UnknownTokenError(f"cannot tokenize {spaced[pos:]!r} in {text!r}")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Render ids as text; [CoT] shows as a marker, other specials vanish."""
        out = []
        for i in ids:
            i = int(i)
            if i == COT:
                out.append(" " + COT_TEXT)
            elif i >= len(SPECIAL_TOKENS):
                out.append(self.pieces[i])
        return "".join(out)[1:] if out and out[0].startswith(" ") else "".join(out)

    def split_on_cot(self, ids: Sequence[int]) -> list[str]:
        """Decode each [CoT]-delimited run of ids separately."""
        groups: list[list[int]] = [[]]
        for i in ids:
            if int(i) == COT:
                groups.append([])
            else:
                groups[-1].append(int(i))
        return [self.decode(g) for g in groups]
