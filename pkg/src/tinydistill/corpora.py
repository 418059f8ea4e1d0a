"""Deterministic toy corpora.

The main task is trigger-bigram detection: a sentence is positive when a
word from class A is immediately followed by a word from class B.  Negatives
carry distractors (reversed order, separated pairs, lone class words), so a
bag-of-words rule is not enough.  A general-domain corpus over the same
lexicon, with A-B adjacency as a frequent pattern, feeds MLM pre-training and
general distillation.  A small embedding table places class members close
together, which gives label-preserving neighbour replacements.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Example, write_tsv

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl", "kr", "pl", "st"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CODAS = ["", "", "n", "r", "l", "k", "x"]


@dataclass(frozen=True)
class Lexicon:
    a: tuple[str, ...]
    b: tuple[str, ...]
    fillers: tuple[str, ...]

    @property
    def words(self) -> tuple[str, ...]:
        return self.a + self.b + self.fillers


def make_lexicon(n_class: int = 4, n_fillers: int = 40, seed: int = 1234) -> Lexicon:
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    words = []
    while len(words) < 2 * n_class + n_fillers:
        syll = int(rng.integers(1, 3))
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syll))
        if len(w) > 2 and w not in seen:
            seen.add(w)
            words.append(w)
    return Lexicon(tuple(words[:n_class]), tuple(words[n_class : 2 * n_class]), tuple(words[2 * n_class :]))


def _filler_probs(n: int) -> np.ndarray:
    # Zipf-ish, so the tail stays out of the word vocabulary and splits into pieces
    p = 1.0 / np.arange(1, n + 1)
    return p / p.sum()


def _fill(lex: Lexicon, length: int, rng: np.random.Generator) -> list[str]:
    idx = rng.choice(len(lex.fillers), size=length, p=_filler_probs(len(lex.fillers)))
    return [lex.fillers[i] for i in idx]


def _has_trigger(words: list[str], lex: Lexicon) -> bool:
    a, b = set(lex.a), set(lex.b)
    return any(x in a and y in b for x, y in zip(words, words[1:]))


def _pick(seq, rng):
    return seq[int(rng.integers(len(seq)))]


def trigger_sentence(lex: Lexicon, label: int, rng: np.random.Generator, length=(5, 8)) -> list[str]:
    n = int(rng.integers(length[0], length[1] + 1))
    while True:
        words = _fill(lex, n, rng)
        if label == 1:
            i = int(rng.integers(n - 1))
            words[i], words[i + 1] = _pick(lex.a, rng), _pick(lex.b, rng)
        else:
            kind = int(rng.integers(4))
            if kind == 0:  # reversed pair
                i = int(rng.integers(n - 1))
                words[i], words[i + 1] = _pick(lex.b, rng), _pick(lex.a, rng)
            elif kind == 1:  # A ... B with a gap
                i = int(rng.integers(n - 2))
                j = int(rng.integers(i + 2, n))
                words[i], words[j] = _pick(lex.a, rng), _pick(lex.b, rng)
            else:  # lone class words
                pool = lex.a if kind == 2 else lex.b
                for i in rng.choice(n, size=2, replace=False):
                    words[i] = _pick(pool, rng)
        if _has_trigger(words, lex) == bool(label):
            return words


def trigger_examples(lex: Lexicon, n: int, seed: int, split: str = "train") -> list[Example]:
    """Balanced labelled sentences; label = presence of an adjacent A-B pair."""
    rng = np.random.default_rng([seed, 1])
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    return [Example(" ".join(trigger_sentence(lex, int(y), rng)), int(y), split=split) for y in labels]


def general_corpus(lex: Lexicon, n: int, seed: int) -> list[Example]:
    """Unlabelled sentences where class words mostly occur as A-B pairs."""
    rng = np.random.default_rng([seed, 2])
    out = []
    for _ in range(n):
        length = int(rng.integers(6, 13))
        words = _fill(lex, length, rng)
        for _ in range(int(rng.integers(1, 3))):
            i = int(rng.integers(length - 1))
            if rng.random() < 0.8:
                words[i], words[i + 1] = _pick(lex.a, rng), _pick(lex.b, rng)
            else:
                words[i] = _pick(lex.a if rng.random() < 0.5 else lex.b, rng)
        out.append(Example(" ".join(words), 0, split="corpus"))
    return out


def toy_embeddings(lex: Lexicon, dim: int = 12, seed: int = 1234, noise: float = 0.3) -> tuple[list[str], np.ndarray]:
    """Cluster-structured vectors: A words, B words and fillers each share a centroid."""
    rng = np.random.default_rng([seed, 3])
    centroids = rng.normal(size=(3, dim))
    words, rows = [], []
    for c, group in enumerate((lex.a, lex.b, lex.fillers)):
        for w in group:
            words.append(w)
            rows.append(centroids[c] + noise * rng.normal(size=dim))
    return words, np.array(rows)


def write_glove(path, words, vectors) -> None:
    lines = [w + " " + " ".join(f"{v:.6f}" for v in row) for w, row in zip(words, vectors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# polarity: template sentences with a negation twist

_NOUNS = ["movie", "plot", "cast", "script", "score", "ending", "story", "acting", "pacing", "dialogue"]
_POS = ["great", "moving", "clever", "superb", "charming", "gripping", "lovely", "sharp"]
_NEG = ["dull", "clumsy", "tedious", "awful", "bland", "messy", "shallow", "weak"]
_FRAMES = [
    "the {n} was {neg}{a}",
    "i found the {n} {neg}{a}",
    "honestly the {n} is {neg}{a}",
    "overall a {neg}{a} {n}",
]


def polarity_examples(n: int, seed: int, split: str = "train") -> list[Example]:
    """Sentence polarity where ``not`` flips the adjective's sign."""
    rng = np.random.default_rng([seed, 4])
    out = []
    for _ in range(n):
        pos = bool(rng.integers(2))
        negated = rng.random() < 0.3
        adj = _pick(_POS if pos else _NEG, rng)
        text = _pick(_FRAMES, rng).format(n=_pick(_NOUNS, rng), a=adj, neg="not " if negated else "")
        out.append(Example(text, int(pos != negated), split=split))
    return out


def write_toy_task(out_dir, n_train: int = 160, n_dev: int = 400, n_corpus: int = 2000, seed: int = 0) -> dict[str, Path]:
    """Write train/dev/corpus TSVs and a toy embedding file; return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lex = make_lexicon()
    paths = {k: out_dir / f"{k}.tsv" for k in ("train", "dev", "corpus")}
    write_tsv(paths["train"], trigger_examples(lex, n_train, seed, "train"))
    write_tsv(paths["dev"], trigger_examples(lex, n_dev, seed + 10_000, "dev"))
    write_tsv(paths["corpus"], general_corpus(lex, n_corpus, seed))
    paths["glove"] = out_dir / "glove.txt"
    write_glove(paths["glove"], *toy_embeddings(lex))
    return paths
