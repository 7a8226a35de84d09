"""Greedy longest-match tokenizer with byte fallback and character offsets.

Id layout is fixed: 0 is BOS, ids 1..256 are the raw bytes 0x00..0xFF, and
string tokens follow. Any text encodes: characters no string token covers are
emitted as their UTF-8 bytes.

Offsets are (char_start, char_end) per token. A character spelled with several
byte tokens gives its first byte token the character's range and the
continuation bytes an empty range at the character's end, so offsets always
tile the text with no gaps or overlaps.

Vocabulary file format: one token per line, line number = id. Escapes:
``\\\\`` backslash, ``\\n`` newline, ``\\r`` carriage return, ``\\t`` tab,
``\\s`` space. Lines 0..256 must be ``<s>`` and ``<0x00>``..``<0xFF>``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

BOS_ID = 0
BOS_TOKEN = "<s>"
N_BYTES = 256
FIRST_STRING_ID = 1 + N_BYTES

SPAN_LABELS = ("subject", "attribute", "context", "query", "last")


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Vocabulary:
    """Immutable id <-> string table."""

    def __init__(self, strings: Iterable[str]):
        table = [BOS_TOKEN] + [_byte_token(b) for b in range(N_BYTES)]
        index = {}
        for s in strings:
            if not s:
                raise ValueError("empty token string")
            if s in index:
                raise ValueError(f"duplicate token {s!r}")
            index[s] = len(table)
            table.append(s)
        self._table: Tuple[str, ...] = tuple(table)
        self._index = index
        self._max_len = max((len(s) for s in index), default=0)

    def __len__(self) -> int:
        return len(self._table)

    @property
    def size(self) -> int:
        return len(self._table)

    @property
    def strings(self) -> Tuple[str, ...]:
        """String tokens only, in id order."""
        return self._table[FIRST_STRING_ID:]

    def id_to_token(self, i: int) -> str:
        return self._table[i]

    def token_to_id(self, s: str) -> int:
        return self._index[s]

    def __contains__(self, s: str) -> bool:
        return s in self._index

    @staticmethod
    def is_byte(i: int) -> bool:
        return 1 <= i <= N_BYTES

    def save(self, path) -> None:
        Path(path).write_text("\n".join(escape_token(t) for t in self._table) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        toks = [unescape_token(l) for l in lines]
        head = [BOS_TOKEN] + [_byte_token(b) for b in range(N_BYTES)]
        if toks[: len(head)] != head:
            raise ValueError(f"{os.fspath(path)}: the first {len(head)} lines must be the reserved BOS/byte tokens")
        return cls(toks[len(head):])


def escape_token(s: str) -> str:
    return (s.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")
            .replace("\t", "\\t").replace(" ", "\\s"))


def unescape_token(s: str) -> str:
    out = []
    it = iter(s)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        mapped = {"\\": "\\", "n": "\n", "r": "\r", "t": "\t", "s": " "}.get(nxt)
        if mapped is None:
            raise ValueError(f"bad escape \\{nxt} in vocabulary entry {s!r}")
        out.append(mapped)
    return "".join(out)


@dataclass(frozen=True)
class Encoding:
    text: str
    ids: Tuple[int, ...]
    offsets: Tuple[Tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class TokenSpan:
    """Tokens [start, end) covering the characters [char_start, char_end)."""

    start: int
    end: int
    char_start: int
    char_end: int
    label: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid token span [{self.start}, {self.end})")
        if self.label is not None and self.label not in SPAN_LABELS:
            raise ValueError(f"unknown span label {self.label!r}")

    def __len__(self) -> int:
        return self.end - self.start

    def __contains__(self, pos: int) -> bool:
        return self.start <= pos < self.end

    @property
    def positions(self) -> range:
        return range(self.start, self.end)


class SpanNotFoundError(LookupError):
    pass


class SpanAmbiguityError(ValueError):
    def __init__(self, needle: str, offsets: List[int]):
        self.needle = needle
        self.offsets = offsets
        super().__init__(f"{needle!r} occurs {len(offsets)} times, at character offsets {offsets}")


def encode(vocab: Vocabulary, text: str, add_bos: bool = False) -> Encoding:
    ids: List[int] = []
    offsets: List[Tuple[int, int]] = []
    if add_bos:
        ids.append(BOS_ID)
        offsets.append((0, 0))
    index, max_len = vocab._index, vocab._max_len
    i, n = 0, len(text)
    while i < n:
        for length in range(min(max_len, n - i), 0, -1):
            tid = index.get(text[i:i + length])
            if tid is not None:
                ids.append(tid)
                offsets.append((i, i + length))
                i += length
                break
        else:
            raw = text[i].encode("utf-8", errors="surrogatepass")
            ids.append(1 + raw[0])
            offsets.append((i, i + 1))
            for b in raw[1:]:
                ids.append(1 + b)
                offsets.append((i + 1, i + 1))
            i += 1
    return Encoding(text, tuple(ids), tuple(offsets))


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    parts: List[str] = []
    pending = bytearray()
    for i in ids:
        if i == BOS_ID:
            continue
        if Vocabulary.is_byte(i):
            pending.append(i - 1)
            continue
        if pending:
            parts.append(pending.decode("utf-8", errors="surrogatepass"))
            pending.clear()
        parts.append(vocab.id_to_token(i))
    if pending:
        parts.append(pending.decode("utf-8", errors="surrogatepass"))
    return "".join(parts)


def _occurrences(text: str, needle: str, lo: int, hi: int) -> List[int]:
    found = []
    i = text.find(needle, lo, hi)
    while i != -1:
        found.append(i)
        i = text.find(needle, i + len(needle), hi)
    return found


def covering_span(enc: Encoding, char_start: int, char_end: int, label: Optional[str] = None) -> TokenSpan:
    """Smallest token span whose characters cover [char_start, char_end)."""
    first = last = None
    for t, (s, e) in enumerate(enc.offsets):
        if e > s and s < char_end and e > char_start:
            if first is None:
                first = t
            last = t
    if first is None:
        raise SpanNotFoundError(f"no token covers characters [{char_start}, {char_end})")
    end = last + 1
    # continuation bytes of the last covered character
    while end < len(enc.offsets) and enc.offsets[end][0] == enc.offsets[end][1] == enc.offsets[last][1] \
            and enc.ids[end] != BOS_ID:
        end += 1
    return TokenSpan(first, end, char_start, char_end, label)


def find_span(
    enc: Encoding,
    needle: str,
    occurrence_policy: str = "first",
    char_range: Optional[Tuple[int, int]] = None,
    label: Optional[str] = None,
) -> TokenSpan:
    """Token span covering one occurrence of ``needle`` in ``enc.text``.

    ``occurrence_policy`` is ``first``, ``last`` or ``require_unique``.
    ``char_range`` restricts the search to a slice of the text.
    """
    if not needle:
        raise ValueError("needle must be non-empty")
    lo, hi = char_range if char_range is not None else (0, len(enc.text))
    hits = _occurrences(enc.text, needle, lo, hi)
    if not hits:
        raise SpanNotFoundError(f"{needle!r} not found in characters [{lo}, {hi})")
    if occurrence_policy == "first":
        at = hits[0]
    elif occurrence_policy == "last":
        at = hits[-1]
    elif occurrence_policy == "require_unique":
        if len(hits) > 1:
            raise SpanAmbiguityError(needle, hits)
        at = hits[0]
    else:
        raise ValueError(f"unknown occurrence policy {occurrence_policy!r}")
    return covering_span(enc, at, at + len(needle), label)


def words_to_vocabulary(corpus: Iterable[str], extra: Iterable[str] = ()) -> Vocabulary:
    """Word-level vocabulary: every word with and without a leading space,
    every punctuation character, newline and space, plus ``extra``; sorted."""
    import re

    found = {" ", *extra}
    for text in corpus:
        for m in re.finditer(r"\w+|[^\w\s]|\n", text):
            tok = m.group()
            found.add(tok)
            if tok[0].isalnum() or tok[0] == "_":
                found.add(" " + tok)
    return Vocabulary(sorted(found))
