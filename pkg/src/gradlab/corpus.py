"""Synthetic classification corpus over a toy vocabulary.

Sentences come from a seeded template grammar: each sentence carries one
or two class markers (ids 0..2 positive, 3..5 negative) at template-chosen
slots, with the remaining slots filled by Zipf-distributed filler tokens.
The marker makes the binary label linearly recoverable, so victim training
is non-degenerate; the Zipf tail gives reconstruction metrics a realistic
frequency profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

POS_MARKERS = (0, 1, 2)
NEG_MARKERS = (3, 4, 5)
_NUM_MARKERS = len(POS_MARKERS) + len(NEG_MARKERS)
_ZIPF_EXPONENT = 1.05


class BigramScorer:
    """Add-one-smoothed bigram language model; higher score = more fluent."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.bos = vocab_size  # virtual start-of-sentence token
        self._counts: dict[tuple[int, int], int] = {}
        self._totals: dict[int, int] = {}

    def fit(self, sentences) -> "BigramScorer":
        for sent in sentences:
            prev = self.bos
            for tok in sent:
                key = (prev, int(tok))
                self._counts[key] = self._counts.get(key, 0) + 1
                self._totals[prev] = self._totals.get(prev, 0) + 1
                prev = int(tok)
        return self

    def score(self, tokens) -> float:
        total = 0.0
        prev = self.bos
        for tok in tokens:
            tok = int(tok)
            c = self._counts.get((prev, tok), 0)
            n = self._totals.get(prev, 0)
            total += math.log((c + 1.0) / (n + self.vocab_size))
            prev = tok
        return total


@dataclass
class Corpus:
    sentences: list[list[int]]
    labels: list[int]
    vocab_size: int
    seed: int
    scorer: BigramScorer
    words: list[str] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.sentences)

    def dataset(self) -> list[tuple[list[int], int]]:
        return list(zip(self.sentences, self.labels))

    def to_text(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def from_text(self, text: str) -> list[int]:
        index = {w: i for i, w in enumerate(self.words)}
        try:
            return [index[w] for w in text.split()]
        except KeyError as exc:
            raise InputError(f"unknown word {exc.args[0]!r}") from exc

    def lengths(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for s in self.sentences:
            out[len(s)] = out.get(len(s), 0) + 1
        return out

    def sample_batch(self, rng, batch_size: int, length: int | None = None):
        """A batch of ``batch_size`` equal-length sentences (ids, labels)."""
        if length is None:
            eligible = sorted(
                ln for ln, n in self.lengths().items() if n >= batch_size
            )
            if not eligible:
                raise InputError("no sentence length has enough examples")
            length = int(eligible[rng.integers(0, len(eligible))])
        pool = [i for i, s in enumerate(self.sentences) if len(s) == length]
        if len(pool) < batch_size:
            raise InputError(
                f"only {len(pool)} sentences of length {length}, "
                f"need {batch_size}"
            )
        chosen = rng.choice(len(pool), size=batch_size, replace=False)
        idx = [pool[int(c)] for c in chosen]
        ids = np.asarray([self.sentences[i] for i in idx], dtype=np.int64)
        labels = np.asarray([self.labels[i] for i in idx], dtype=np.int64)
        return ids, labels


def _vocab_words(vocab_size: int) -> list[str]:
    words = [f"good{i}" for i in range(len(POS_MARKERS))]
    words += [f"bad{i}" for i in range(len(NEG_MARKERS))]
    words += [f"w{i:03d}" for i in range(_NUM_MARKERS, vocab_size)]
    return words


def generate_corpus(
    seed: int,
    num_sentences: int,
    vocab_size: int,
    length_range: tuple[int, int] = (4, 8),
) -> Corpus:
    """Seeded corpus of labeled sentences plus a fitted bigram scorer."""
    if vocab_size < 16:
        raise ConfigError(f"vocab_size must be >= 16, got {vocab_size}")
    lo, hi = length_range
    if lo < 2 or hi < lo:
        raise ConfigError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)

    n_filler = vocab_size - _NUM_MARKERS
    ranks = np.arange(1, n_filler + 1, dtype=np.float64)
    zipf = ranks ** (-_ZIPF_EXPONENT)
    zipf /= zipf.sum()

    sentences: list[list[int]] = []
    labels: list[int] = []
    for _ in range(num_sentences):
        label = int(rng.integers(0, 2))
        length = int(rng.integers(lo, hi + 1))
        markers = POS_MARKERS if label == 1 else NEG_MARKERS
        n_markers = 2 if (length >= 7 and rng.random() < 0.5) else 1
        slots = rng.choice(length, size=n_markers, replace=False)
        sent = (rng.choice(n_filler, size=length, p=zipf) + _NUM_MARKERS).tolist()
        for slot in slots:
            sent[int(slot)] = int(markers[rng.integers(0, len(markers))])
        sentences.append([int(t) for t in sent])
        labels.append(label)

    scorer = BigramScorer(vocab_size).fit(sentences)
    return Corpus(
        sentences=sentences,
        labels=labels,
        vocab_size=vocab_size,
        seed=seed,
        scorer=scorer,
        words=_vocab_words(vocab_size),
    )
