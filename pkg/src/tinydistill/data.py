"""Fixed-vocabulary subword tokenizer, TSV corpora, encoding and batching."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESERVED = ("[PAD]", "[MASK]", "[CLS]", "[SEP]")
PAD, MASK, CLS, SEP = range(4)
CONT = "##"


class ParseError(ValueError):
    pass


class Vocab:
    """Ordered piece list; ids 0..3 are PAD, MASK, CLS, SEP."""

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if tuple(pieces[:4]) != RESERVED:
            raise ValueError(f"vocab must start with {RESERVED}, got {pieces[:4]}")
        index = {}
        for i, p in enumerate(pieces):
            if not p or any(c.isspace() for c in p):
                raise ValueError(f"vocab piece {i} is empty or contains whitespace: {p!r}")
            if p in index:
                raise ValueError(f"duplicate vocab piece {p!r} at ids {index[p]} and {i}")
            index[p] = i
        self.pieces = pieces
        self.index = index

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    def id(self, piece: str) -> int:
        return self.index[piece]

    def word_ids(self) -> np.ndarray:
        """Ids of pieces that can stand alone as words (no reserved, no ##)."""
        return np.array([i for i, p in enumerate(self.pieces) if i >= 4 and not p.startswith(CONT)], dtype=np.int64)

    def missing_characters(self, texts: Iterable[str]) -> set[str]:
        need = {c for t in texts for c in t.lower() if not c.isspace()}
        return {c for c in need if c not in self.index or CONT + c not in self.index}

    @classmethod
    def build(cls, texts: Iterable[str], max_words: int) -> "Vocab":
        """Top ``max_words`` whole words by frequency plus every character.

        Each character appears as a word-initial piece and as a ``##``
        continuation, so any word over the alphabet tokenizes.
        """
        texts = list(texts)
        counts = Counter(w for t in texts for w in split_words(t))
        chars = sorted({c for w in counts for c in w})
        pieces = list(RESERVED)
        seen = set(pieces)
        for c in chars:
            for p in (c, CONT + c):
                if p not in seen:
                    pieces.append(p)
                    seen.add(p)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        for w, _ in ranked[:max_words]:
            if w not in seen:
                pieces.append(w)
                seen.add(w)
        return cls(pieces)

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")


def split_words(text: str) -> list[str]:
    return text.lower().split()


def tokenize(vocab: Vocab, word: str) -> list[int]:
    """Greedy longest-match-first pieces; continuations carry the ## prefix.

    Characters absent from the vocabulary are skipped.
    """
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.index:
                found = vocab.index[piece]
                break
            end -= 1
        if found is None:
            start += 1
            continue
        ids.append(found)
        start = end
    return ids


def detokenize(vocab: Vocab, ids: Sequence[int]) -> str:
    return "".join(vocab.pieces[i][len(CONT) :] if vocab.pieces[i].startswith(CONT) else vocab.pieces[i] for i in ids)


def is_single_piece(vocab: Vocab, word: str) -> bool:
    if not word:
        raise ValueError("empty word")
    return len(tokenize(vocab, word)) == 1


def tokenize_text(vocab: Vocab, text: str) -> list[int]:
    return [i for w in split_words(text) for i in tokenize(vocab, w)]


@dataclass
class Example:
    text_a: str
    label: int | float
    text_b: str | None = None
    split: str = "train"


def _parse_label(raw: str, lineno: int, num_classes: int | None):
    raw = raw.strip()
    try:
        label = int(raw)
    except ValueError:
        try:
            label = float(raw)
        except ValueError:
            raise ParseError(f"line {lineno}: bad label {raw!r}") from None
        if num_classes is not None:
            raise ParseError(f"line {lineno}: label {raw!r} is not a class id")
        return label
    if num_classes is not None and not 0 <= label < num_classes:
        raise ParseError(f"line {lineno}: label {label} outside 0..{num_classes - 1}")
    return label


def load_tsv(path, num_classes: int | None = None, split: str = "train") -> list[Example]:
    """Read a header-led TSV with columns text_a, optional text_b, and label."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows:
        return []
    header = rows[0]
    for col in ("text_a", "label"):
        if col not in header:
            raise ParseError(f"line 1: missing column {col!r} in header {header}")
    ia, il = header.index("text_a"), header.index("label")
    ib = header.index("text_b") if "text_b" in header else None
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        out.append(
            Example(
                text_a=row[ia],
                label=_parse_label(row[il], lineno, num_classes),
                text_b=row[ib] if ib is not None else None,
                split=split,
            )
        )
    return out


def write_tsv(path, examples: Sequence[Example]) -> None:
    pair = any(e.text_b is not None for e in examples)
    lines = ["text_a\ttext_b\tlabel" if pair else "text_a\tlabel"]
    for e in examples:
        for text in (e.text_a, e.text_b or ""):
            if "\t" in text or "\n" in text:
                raise ValueError(f"text contains a tab or newline: {text!r}")
        lines.append(f"{e.text_a}\t{e.text_b or ''}\t{e.label}" if pair else f"{e.text_a}\t{e.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def encode(vocab: Vocab, example: Example, max_len: int) -> list[int]:
    """[CLS] a [SEP] (b [SEP]); trims the longer text first when too long."""
    a = tokenize_text(vocab, example.text_a)
    b = tokenize_text(vocab, example.text_b) if example.text_b is not None else None
    budget = max_len - (3 if b is not None else 2)
    if budget < 0:
        raise ValueError(f"max_len {max_len} leaves no room for special tokens")
    if b is None:
        a = a[:budget]
        return [CLS, *a, SEP]
    while len(a) + len(b) > budget:
        (a if len(a) > len(b) else b).pop()
    return [CLS, *a, SEP, *b, SEP]


@dataclass
class Batch:
    tokens: np.ndarray  # int64 [b, l]
    pad_mask: np.ndarray  # bool [b, l]
    labels: np.ndarray
    indices: np.ndarray  # positions of the rows in the source example list


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    l = max(len(s) for s in sequences)
    tokens = np.full((len(sequences), l), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        tokens[i, : len(s)] = s
    return tokens, tokens != PAD


def batch(
    examples: Sequence[Example],
    vocab: Vocab,
    max_len: int,
    batch_size: int,
    seed: int | None = None,
    encoded: Sequence[Sequence[int]] | None = None,
) -> list[Batch]:
    """Encode, optionally shuffle by ``seed``, and pad each batch to its longest row.

    Pass ``encoded`` (one id list per example) to skip re-encoding.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if encoded is None:
        encoded = [encode(vocab, e, max_len) for e in examples]
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        tokens, mask = pad_batch([encoded[i] for i in idx])
        labels = np.array([examples[i].label for i in idx])
        out.append(Batch(tokens, mask, labels, idx))
    return out
