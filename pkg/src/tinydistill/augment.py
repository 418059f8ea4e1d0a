"""Word-replacement data augmentation.

Single-piece words get replacement candidates from a masked language model;
words that split into several pieces get their nearest neighbours in a
GloVe-style embedding table.  Each variant walks the sentence left to right,
masking only the current position of its own working copy, so earlier
replacements are visible to later predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .data import CLS, MASK, RESERVED, SEP, Example, Vocab, pad_batch, split_words, tokenize
from .transformer import CapabilityError, TransformerModel, forward, mlm_logits

log = logging.getLogger(__name__)

MASK_WORD = RESERVED[MASK]


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    p_t: float = 0.4
    n_a: int = 20
    k: int = 15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_t <= 1.0:
            raise ValueError(f"p_t must be in [0, 1], got {self.p_t}")
        if self.n_a < 1 or self.k < 1:
            raise ValueError(f"n_a and k must be >= 1, got n_a={self.n_a}, k={self.k}")


class EmbeddingStore:
    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(words) != len(vectors):
            raise FormatError(f"{len(words)} words vs vector block of shape {vectors.shape}")
        self.words = [w.lower() for w in words]
        self.vectors = vectors
        self.index = {}
        for i, w in enumerate(self.words):
            self.index.setdefault(w, i)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        self._unit = np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word.lower()]]


def load_glove(path, limit: int | None = None) -> EmbeddingStore:
    """Parse ``word v1 ... vD`` lines; unparsable lines are skipped with a warning."""
    words, rows = [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if limit is not None and len(words) >= limit:
                break
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError:
                log.warning("%s:%d: malformed vector line skipped", path, lineno)
                continue
            if not vec:
                log.warning("%s:%d: line has no vector components", path, lineno)
                continue
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(f"{path}:{lineno}: vector has {len(vec)} components, expected {dim}")
            words.append(parts[0])
            rows.append(vec)
    return EmbeddingStore(words, np.array(rows, dtype=np.float64).reshape(len(rows), dim or 0))


def neighbor_candidates(store: EmbeddingStore, word: str, k: int) -> list[str]:
    """Top-k words by cosine similarity, excluding the query; ties go to the smaller word."""
    word = word.lower()
    if word not in store.index:
        return []
    sims = store._unit @ store._unit[store.index[word]]
    ranked = sorted(
        (i for i, w in enumerate(store.words) if w != word and w != MASK_WORD.lower()),
        key=lambda i: (-sims[i], store.words[i]),
    )
    return [store.words[i] for i in ranked[:k]]


def _encode_words(vocab: Vocab, words: Sequence[str]) -> tuple[list[int], list[int]]:
    """Piece ids with CLS/SEP plus the piece offset of every word."""
    ids, starts = [CLS], []
    for w in words:
        starts.append(len(ids))
        ids.extend([MASK] if w == MASK_WORD else tokenize(vocab, w))
    ids.append(SEP)
    return ids, starts


def mlm_candidates_many(
    model: TransformerModel,
    vocab: Vocab,
    contexts: Sequence[tuple[Sequence[str], int]],
    k: int,
) -> list[list[str]]:
    """For each (words, i) with words[i] masked: the k top-scoring vocabulary words."""
    if not model.config.mlm_head:
        raise CapabilityError("model has no MLM head; candidate generation needs one")
    out: list[list[str]] = [[] for _ in contexts]
    seqs, cols, owners = [], [], []
    for j, (words, i) in enumerate(contexts):
        ids, starts = _encode_words(vocab, words)
        if starts[i] >= model.config.max_len:
            continue  # masked word falls beyond the model's window
        seqs.append(ids[: model.config.max_len])
        cols.append(starts[i])
        owners.append(j)
    if not seqs:
        return out
    tokens, mask = pad_batch(seqs)
    candidates = vocab.word_ids()
    with T.no_grad():
        hidden = forward(model, tokens, mask).hiddens[-1]
        logits = mlm_logits(model, hidden, (np.arange(len(seqs)), np.array(cols))).data
    for r, j in enumerate(owners):
        order = np.argsort(-logits[r, candidates], kind="stable")[:k]
        out[j] = [vocab.pieces[candidates[o]] for o in order]
    return out


def mlm_candidates(model: TransformerModel, vocab: Vocab, words: Sequence[str], i: int, k: int) -> list[str]:
    """Mask word ``i`` and return the model's k most probable replacement words."""
    words = list(words)
    words[i] = MASK_WORD
    return mlm_candidates_many(model, vocab, [(words, i)], k)[0]


class ReplacementSource(Protocol):
    def is_single_piece(self, word: str) -> bool: ...

    def mlm_candidates(self, contexts: Sequence[tuple[Sequence[str], int]], k: int) -> list[list[str]]:
        """One candidate list per (words with [MASK] at i, i)."""
        ...

    def neighbor_candidates(self, word: str, k: int) -> list[str]: ...


class ModelReplacementSource:
    """Candidates from an MLM-headed model and an embedding store."""

    def __init__(self, model: TransformerModel, vocab: Vocab, store: EmbeddingStore):
        if not model.config.mlm_head:
            raise CapabilityError("augmentation model has no MLM head")
        self.model = model
        self.vocab = vocab
        self.store = store
        self._neighbors: dict[tuple[str, int], list[str]] = {}

    def is_single_piece(self, word: str) -> bool:
        return len(tokenize(self.vocab, word)) == 1

    def mlm_candidates(self, contexts, k):
        return mlm_candidates_many(self.model, self.vocab, contexts, k)

    def neighbor_candidates(self, word, k):
        key = (word, k)
        if key not in self._neighbors:
            self._neighbors[key] = neighbor_candidates(self.store, word, k)
        return self._neighbors[key]


def augment_example(
    words: Sequence[str],
    cfg: AugmentConfig,
    source: ReplacementSource,
    rng: np.random.Generator,
) -> list[list[str]]:
    """Exactly ``cfg.n_a`` variants of ``words``, each the same length.

    All variants advance through the positions together so that the masked
    contexts of one position can be scored in a single batch; within each
    variant the order of operations is the sequential one.
    """
    words = list(words)
    if not words:
        raise ValueError("cannot augment an empty word list")
    variants = [list(words) for _ in range(cfg.n_a)]
    for i, word in enumerate(words):
        if source.is_single_piece(word):
            contexts, slot = [], {}
            per_variant = []
            for v in variants:
                masked = tuple(v[:i] + [MASK_WORD] + v[i + 1 :])
                if masked not in slot:
                    slot[masked] = len(contexts)
                    contexts.append((list(masked), i))
                per_variant.append(slot[masked])
            found = source.mlm_candidates(contexts, cfg.k)
            cands = [[c for c in found[s] if c != MASK_WORD] for s in per_variant]
        else:
            shared = [c for c in source.neighbor_candidates(word, cfg.k) if c != MASK_WORD]
            cands = [shared] * cfg.n_a
        for v, c in zip(variants, cands):
            p = rng.random()
            if p <= cfg.p_t and c:
                v[i] = c[int(rng.integers(len(c)))]
    return variants


def augment_dataset(
    examples: Sequence[Example],
    cfg: AugmentConfig,
    source: ReplacementSource,
    include_original: bool = True,
) -> list[Example]:
    """Each example (if kept) followed by its variants, all with the original label.

    Every example draws from its own generator seeded by (seed, index), so
    the output does not depend on processing order.
    """
    out = []
    for idx, ex in enumerate(examples):
        rng = np.random.default_rng([cfg.seed, idx])
        va = augment_example(split_words(ex.text_a), cfg, source, rng)
        vb = augment_example(split_words(ex.text_b), cfg, source, rng) if ex.text_b is not None else None
        if include_original:
            out.append(ex)
        for n in range(cfg.n_a):
            out.append(
                Example(
                    " ".join(va[n]),
                    ex.label,
                    " ".join(vb[n]) if vb is not None else None,
                    ex.split,
                )
            )
    return out
