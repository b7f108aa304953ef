"""Byte-level subword vocabulary with code-token provenance.

Text is first cut into *units*: code tokens (when the text lexes as code),
with identifiers further split on underscores and camelCase boundaries.  A
single space before a token is glued to its first unit; any other whitespace
is a unit of its own.  Pair merges are learned inside units only, and encoding
is greedy longest-match inside each unit, so subtokens never straddle code
tokens.
"""
from __future__ import annotations

import codecs
import heapq
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .frontend import InvalidCharacter, TokenKind, tokenize

PAD, BOS, EOS, UNK, MASK = range(5)
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
NUM_BYTES = 256
FIRST_FREE = len(RESERVED) + NUM_BYTES


class CorpusEmpty(ValueError):
    pass


_PART = re.compile(rb"_|[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+|[^_A-Za-z0-9]", re.S)
_GENERIC = re.compile(rb"[A-Za-z0-9_$]+|\s+|[^\sA-Za-z0-9_$]", re.S)


def split_identifier(word: str) -> list[str]:
    """``"calcTotalSize"`` -> ``["calc", "Total", "Size"]``; ``"_total"`` -> ``["_", "total"]``."""
    return [p.decode() for p in _PART.findall(word.encode())]


def _word_units(piece: bytes) -> list[bytes]:
    return _PART.findall(piece)


def pre_split(text: str) -> list[tuple[bytes, int | None]]:
    """Cut ``text`` into (unit bytes, code-token index or None).

    Concatenating the units reproduces ``text`` byte for byte.
    """
    data = text.encode("utf-8")
    pieces: list[tuple[bytes, int | None, bool]] = []  # (bytes, token, is_word)
    try:
        toks = tokenize(text)
    except InvalidCharacter:
        toks = None
    if toks is not None:
        pos = 0
        for k, t in enumerate(toks):
            a, b = t.span
            if a > pos:
                pieces.append((data[pos:a], None, False))
            pieces.append((data[a:b], k, t.kind is TokenKind.IDENTIFIER))
            pos = b
        if pos < len(data):
            pieces.append((data[pos:], None, False))
    else:
        for m in _GENERIC.finditer(data):
            s = m.group()
            pieces.append((s, None, s[:1].isalnum() or s[:1] in b"_$"))
    units: list[tuple[bytes, int | None]] = []
    carry = b""
    for i, (s, tok, is_word) in enumerate(pieces):
        if s.isspace():
            nxt = pieces[i + 1] if i + 1 < len(pieces) else None
            if nxt is not None and s.endswith(b" "):
                if len(s) > 1:
                    units.append((s[:-1], None))
                carry = b" "
            else:
                units.append((s, None))
            continue
        parts = _word_units(s) if is_word else [s]
        parts[0] = carry + parts[0]
        carry = b""
        units.extend((p, tok) for p in parts)
    return units


@dataclass
class Vocab:
    tokens: list[bytes]  # index = id; reserved ids hold their marker text

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens) if i >= len(RESERVED)}
        self.max_len = max((len(t) for t in self.index), default=1)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path) -> None:
        lines = [codecs.encode(t.decode("latin-1"), "unicode_escape").decode("ascii")
                 for t in self.tokens[len(RESERVED):]]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="ascii").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        toks = [r.encode() for r in RESERVED]
        toks += [codecs.decode(line, "unicode_escape").encode("latin-1") for line in lines]
        return cls(toks)


def _base_tokens() -> list[bytes]:
    return [r.encode() for r in RESERVED] + [bytes([b]) for b in range(NUM_BYTES)]


def train_vocab(corpus: Iterable[str], target_size: int = 4096, min_frequency: int = 2) -> Vocab:
    """Learn pair merges inside pre-split units until ``target_size`` ids exist
    or no pair occurs ``min_frequency`` times."""
    if target_size < 300:
        raise ValueError("target_size must be at least 300")
    unit_counts: Counter[bytes] = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        unit_counts.update(u for u, _ in pre_split(text))
    if not seen_any or not unit_counts:
        raise CorpusEmpty("cannot train a vocabulary on an empty corpus")

    tokens = _base_tokens()
    known = set(tokens[len(RESERVED):])
    units = sorted(unit_counts)
    words = [[bytes([b]) for b in u] for u in units]
    freqs = [unit_counts[u] for u in units]
    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = {}

    def add_pairs(wi: int, sign: int) -> None:
        w = words[wi]
        for p in zip(w, w[1:]):
            pair_counts[p] += sign * freqs[wi]
            if sign > 0:
                where.setdefault(p, set()).add(wi)

    for wi in range(len(words)):
        add_pairs(wi, 1)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        negc, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -negc:
            if count > 0:
                heapq.heappush(heap, (-count, pair))
            continue
        if count < min_frequency:
            break
        merged = pair[0] + pair[1]
        touched = sorted(where.pop(pair, ()))
        for wi in touched:
            add_pairs(wi, -1)
            w, out, i = words[wi], [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == pair[0] and w[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[wi] = out
            add_pairs(wi, 1)
            for p in zip(out, out[1:]):
                if merged in p:
                    heapq.heappush(heap, (-pair_counts[p], p))
        pair_counts.pop(pair, None)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocab(tokens)


def encode_units(units: Sequence[tuple[bytes, int | None]], vocab: Vocab) -> list[tuple[int, int | None]]:
    out: list[tuple[int, int | None]] = []
    index, max_len = vocab.index, vocab.max_len
    for unit, tok in units:
        i = 0
        while i < len(unit):
            for length in range(min(max_len, len(unit) - i), 0, -1):
                tid = index.get(unit[i:i + length])
                if tid is not None:
                    out.append((tid, tok))
                    i += length
                    break
            else:  # only reachable with a vocabulary lacking byte fallback
                out.append((UNK, tok))
                i += 1
    return out


def encode(text: str, vocab: Vocab, with_provenance: bool = False) -> list[tuple[int, int | None]]:
    """Subtoken ids paired with the code-token index each came from."""
    pairs = encode_units(pre_split(text), vocab)
    if not with_provenance:
        return [(tid, None) for tid, _ in pairs]
    return pairs


def encode_ids(text: str, vocab: Vocab) -> list[int]:
    return [tid for tid, _ in encode(text, vocab)]


def decode_bytes(ids: Iterable[int], vocab: Vocab) -> bytes:
    return b"".join(vocab.tokens[i] for i in ids if i >= len(RESERVED))


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    return decode_bytes(ids, vocab).decode("utf-8", errors="replace")


def subtoken_char_spans(ids: Sequence[int], vocab: Vocab) -> list[tuple[int, int]]:
    """Byte span each subtoken occupies in ``decode_bytes(ids)``."""
    spans, pos = [], 0
    for i in ids:
        n = len(vocab.tokens[i]) if i >= len(RESERVED) else 0
        spans.append((pos, pos + n))
        pos += n
    return spans
