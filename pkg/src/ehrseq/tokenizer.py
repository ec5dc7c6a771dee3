"""Sub-word tokenization of textualized features.

Three pieces live here:

* ``DescriptionMap`` resolves opaque codes to human-readable text.
* ``textualize`` turns one canonical feature value into either plain text or
  a digit-place token sequence (numerics are split digit-by-digit, one special
  token per decimal place).
* ``Tokenizer`` is a byte-level BPE with a fixed special-token inventory, so
  arbitrary hospital text never produces UNK and vocabularies stay
  transfer-compatible across datasets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

from .errors import ConfigError
from .events import (
    N_INTERVAL_BUCKETS,
    Feature,
    ValueKind,
    normalize_text,
)

TOKENIZER_FORMAT_VERSION = 1

# Fixed special-token id layout. Learned sub-words must never collide with
# these, so the byte alphabet starts right after.
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3
INTERVAL_BASE_ID = 4  # T0..T7 -> 4..11
PLUS_ID = 12
MINUS_ID = 13
DIGIT_PLACE_MIN = -3
DIGIT_PLACE_MAX = 6
DIGIT_BASE_ID = 14  # DP(place, digit) -> 14 + (place+3)*10 + digit
N_SPECIAL = DIGIT_BASE_ID + (DIGIT_PLACE_MAX - DIGIT_PLACE_MIN + 1) * 10  # 114
BYTE_BASE_ID = N_SPECIAL
FIRST_MERGE_ID = BYTE_BASE_ID + 256

# Hard cap on digit tokens for one value; places outside the supported range
# clamp to the extreme place marker (documented lossy case).
_MAX_DIGIT_TOKENS = 32


def interval_token_id(bucket_id: int) -> int:
    if not 0 <= bucket_id < N_INTERVAL_BUCKETS:
        raise ValueError(f"interval bucket {bucket_id} out of range")
    return INTERVAL_BASE_ID + bucket_id


def digit_token_id(place: int, digit: int) -> int:
    place = min(max(place, DIGIT_PLACE_MIN), DIGIT_PLACE_MAX)
    return DIGIT_BASE_ID + (place - DIGIT_PLACE_MIN) * 10 + digit


def special_token_names() -> dict[str, int]:
    names = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[SEP]": SEP_ID, "[UNK]": UNK_ID}
    for b in range(N_INTERVAL_BUCKETS):
        names[f"[T{b}]"] = INTERVAL_BASE_ID + b
    names["[+]"] = PLUS_ID
    names["[-]"] = MINUS_ID
    for place in range(DIGIT_PLACE_MIN, DIGIT_PLACE_MAX + 1):
        for digit in range(10):
            names[f"[D{place:+d}:{digit}]"] = digit_token_id(place, digit)
    return names


_SPECIAL_NAMES = special_token_names()
_SPECIAL_BY_ID = {v: k for k, v in _SPECIAL_NAMES.items()}


def encode_number(text: str) -> list[int]:
    """Digit-place token ids for a finite decimal literal, most significant first.

    ``"10.0"`` becomes DP(+1,1) DP(0,0) DP(-1,0); negatives get a leading sign
    token. Scientific notation is normalized to plain decimal form first.
    """
    try:
        tup = Decimal(text).as_tuple()
    except InvalidOperation:
        raise ValueError(f"not a decimal literal: {text!r}")
    digits = tup.digits
    exp = int(tup.exponent)
    top = max(len(digits) - 1 + exp, 0)
    bottom = min(exp, 0)
    ids: list[int] = []
    if tup.sign == 1 and any(digits):
        ids.append(MINUS_ID)
    n_places = top - bottom + 1
    if n_places > _MAX_DIGIT_TOKENS:
        top = bottom + _MAX_DIGIT_TOKENS - 1
    for place in range(top, bottom - 1, -1):
        idx = len(digits) - 1 + exp - place
        digit = digits[idx] if 0 <= idx < len(digits) else 0
        ids.append(digit_token_id(place, digit))
    return ids


@dataclass
class DescriptionMap:
    """Exact-match lookup (table, column, normalized code) -> description text."""

    entries: dict[tuple[str, str], dict[str, str]] = field(default_factory=dict)

    def add(self, table: str, column: str, code: str, text: str) -> None:
        key = (normalize_text(table), normalize_text(column))
        self.entries.setdefault(key, {})[normalize_text(code)] = normalize_text(text)

    def covers(self, table: str, column: str) -> bool:
        return (normalize_text(table), normalize_text(column)) in self.entries

    def code_columns(self, table: str) -> frozenset[str]:
        t = normalize_text(table)
        return frozenset(col for (tab, col) in self.entries if tab == t)

    def lookup(self, table: str, column: str, code: str) -> str | None:
        bucket = self.entries.get((normalize_text(table), normalize_text(column)))
        if bucket is None:
            return None
        return bucket.get(normalize_text(code))

    def to_dict(self) -> dict:
        return {f"{t}\t{c}": dict(sorted(codes.items())) for (t, c), codes in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, data: dict) -> "DescriptionMap":
        dm = cls()
        for key, codes in data.items():
            table, column = key.split("\t", 1)
            for code, text in codes.items():
                dm.add(table, column, code, text)
        return dm


def textualize(feature: Feature, desc_map: DescriptionMap, context: tuple[str, str]) -> str | list[int]:
    """Resolve one feature value for serialization.

    Returns the text to sub-word-tokenize (descriptions for mapped codes, the
    raw string otherwise) or, for numeric values, the digit-place token ids.
    Total: every canonical feature value resolves to something.
    """
    value = feature.value
    if value.kind is ValueKind.NUMERIC:
        return encode_number(value.raw)
    if value.kind is ValueKind.CODE:
        table, column = context
        hit = desc_map.lookup(table, column, value.raw)
        return hit if hit is not None else value.raw
    return value.raw


def _pretokenize(text: str) -> list[str]:
    """Split normalized text into chunks; spaces ride as a prefix of the next chunk."""
    words = text.split(" ")
    chunks = [words[0]] if words and words[0] else []
    for w in words[1:]:
        chunks.append(" " + w)
    return chunks


def _merge_symbols(symbols: list[bytes], pair: tuple[bytes, bytes], merged: bytes) -> list[bytes]:
    out: list[bytes] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


class Tokenizer:
    """Byte-level BPE with a fixed special-token block.

    Ids are dense from 0: specials, then the 256 base bytes, then one id per
    learned merge in training order. Immutable after training; ``encode`` is
    pure and thread-safe apart from its memo cache.
    """

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self.merges = list(merges)
        self.merge_rank: dict[tuple[bytes, bytes], int] = {p: i for i, p in enumerate(self.merges)}
        self.vocab: dict[bytes, int] = {bytes([b]): BYTE_BASE_ID + b for b in range(256)}
        for i, (left, right) in enumerate(self.merges):
            self.vocab[left + right] = FIRST_MERGE_ID + i
        self.id_to_bytes: dict[int, bytes] = {v: k for k, v in self.vocab.items()}
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    def _bpe_chunk(self, chunk: str) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        symbols = [bytes([b]) for b in chunk.encode("utf-8")]
        while len(symbols) >= 2:
            pairs = set(zip(symbols, symbols[1:]))
            best = min(pairs, key=lambda p: self.merge_rank.get(p, 1 << 30))
            if best not in self.merge_rank:
                break
            symbols = _merge_symbols(symbols, best, best[0] + best[1])
        ids = tuple(self.vocab[s] for s in symbols)
        if len(self._cache) < 1 << 18:
            self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        """Sub-word ids for ``text``; never emits special ids, never UNK."""
        norm = normalize_text(text)
        if not norm:
            return []
        out: list[int] = []
        for chunk in _pretokenize(norm):
            out.extend(self._bpe_chunk(chunk))
        return out

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode on its image; special ids render as bracketed markers."""
        parts: list[str] = []
        buf = bytearray()
        for i in ids:
            b = self.id_to_bytes.get(i)
            if b is not None:
                buf.extend(b)
                continue
            if buf:
                parts.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            parts.append(_SPECIAL_BY_ID.get(i, "[UNK]"))
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format_version": TOKENIZER_FORMAT_VERSION,
            "special_tokens": _SPECIAL_NAMES,
            "merges": [[l.decode("latin-1"), r.decode("latin-1")] for l, r in self.merges],
            "vocab": {k.decode("latin-1"): v for k, v in sorted(self.vocab.items(), key=lambda kv: kv[1])},
        }
        return json.dumps(doc, ensure_ascii=True, sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != TOKENIZER_FORMAT_VERSION:
            raise ConfigError(f"unsupported tokenizer format_version {version!r}")
        merges = [(l.encode("latin-1"), r.encode("latin-1")) for l, r in doc["merges"]]
        tok = cls(merges)
        stored = {k.encode("latin-1"): v for k, v in doc["vocab"].items()}
        if stored != tok.vocab:
            raise ConfigError("tokenizer vocab inconsistent with merges (corrupt file)")
        return tok

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus, vocab_size: int) -> Tokenizer:
    """Train a byte-level BPE tokenizer.

    Greedily merges the most frequent adjacent symbol pair until the total
    vocabulary (specials + bytes + merges) reaches ``vocab_size``; count ties
    break by ascending lexicographic pair order. Deterministic for a given
    corpus. Stops early once no adjacent pair remains.
    """
    if vocab_size <= FIRST_MERGE_ID:
        raise ConfigError(
            f"vocab_size must exceed {FIRST_MERGE_ID} (special tokens + byte alphabet)"
        )
    word_freq: dict[str, int] = {}
    empty = True
    for text in corpus:
        norm = normalize_text(text)
        if not norm:
            continue
        empty = False
        for chunk in _pretokenize(norm):
            word_freq[chunk] = word_freq.get(chunk, 0) + 1
    if empty:
        raise ConfigError("BPE corpus is empty")

    words: list[list[bytes]] = []
    freqs: list[int] = []
    for chunk, freq in sorted(word_freq.items()):
        words.append([bytes([b]) for b in chunk.encode("utf-8")])
        freqs.append(freq)

    pair_counts: dict[tuple[bytes, bytes], int] = {}
    pair_words: dict[tuple[bytes, bytes], set[int]] = {}
    for wi, symbols in enumerate(words):
        f = freqs[wi]
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + f
            pair_words.setdefault(pair, set()).add(wi)

    merges: list[tuple[bytes, bytes]] = []
    n_merges = vocab_size - FIRST_MERGE_ID
    for _ in range(n_merges):
        best_pair = None
        best_count = 0
        for pair, count in pair_counts.items():
            if count > best_count or (count == best_count and (best_pair is None or pair < best_pair)):
                best_pair = pair
                best_count = count
        if best_pair is None:
            break
        merged = best_pair[0] + best_pair[1]
        merges.append(best_pair)
        for wi in sorted(pair_words.get(best_pair, ())):
            symbols = words[wi]
            f = freqs[wi]
            for pair in zip(symbols, symbols[1:]):
                remaining = pair_counts.get(pair, 0) - f
                if remaining <= 0:
                    pair_counts.pop(pair, None)
                    pair_words.pop(pair, None)
                else:
                    pair_counts[pair] = remaining
                    ws = pair_words.get(pair)
                    if ws is not None:
                        ws.discard(wi)
            new_symbols = _merge_symbols(symbols, best_pair, merged)
            words[wi] = new_symbols
            for pair in zip(new_symbols, new_symbols[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + f
                pair_words.setdefault(pair, set()).add(wi)
    return Tokenizer(merges)
