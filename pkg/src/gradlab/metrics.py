"""Reconstruction and utility metrics: ROUGE-1/2/L, binary F1, MCC."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f: float


@dataclass(frozen=True)
class RougeScores:
    r1: PRF
    r2: PRF
    rl: PRF


def _f_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _prf(overlap: int, hyp_total: int, ref_total: int) -> PRF:
    p = overlap / hyp_total if hyp_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    return PRF(p, r, _f_score(p, r))


def _ngram_overlap(ref, hyp, n: int) -> tuple[int, int, int]:
    ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
    overlap = sum((ref_grams & hyp_grams).values())
    return overlap, sum(hyp_grams.values()), sum(ref_grams.values())


def _lcs_length(a, b) -> int:
    # O(len(a) * len(b)) dynamic program, one rolling row
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(ref, hyp) -> RougeScores:
    """ROUGE-1/2 via clipped n-gram overlap, ROUGE-L via LCS; F-score form.

    Tokens only need equality comparison.  Empty ref or hyp scores zero.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref or not hyp:
        zero = PRF(0.0, 0.0, 0.0)
        return RougeScores(zero, zero, zero)
    r1 = _prf(*_ngram_overlap(ref, hyp, 1))
    r2 = _prf(*_ngram_overlap(ref, hyp, 2))
    lcs = _lcs_length(ref, hyp)
    rl = _prf(lcs, len(hyp), len(ref))
    return RougeScores(r1, r2, rl)


def mcc(predictions, labels) -> float:
    """Matthews correlation coefficient for binary labels; 0 on degenerate
    confusion tables (any zero denominator factor)."""
    preds = np.asarray(predictions).astype(int)
    labels = np.asarray(labels).astype(int)
    tp = int(((preds == 1) & (labels == 1)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def binary_f1(predictions, labels) -> float:
    """F1 for the positive class (label 1), 0 on empty denominators."""
    preds = np.asarray(predictions).astype(int)
    labels = np.asarray(labels).astype(int)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return _f_score(p, r)


def _mean_prf(parts: list[PRF]) -> PRF:
    n = len(parts)
    return PRF(
        sum(p.precision for p in parts) / n,
        sum(p.recall for p in parts) / n,
        sum(p.f for p in parts) / n,
    )


def align_and_score(refs, hyps) -> RougeScores:
    """Batch ROUGE under the hypothesis-to-reference assignment that
    maximizes mean R1-F (reconstruction order within a batch is arbitrary).

    Brute force over permutations; guarded at B <= 8.
    """
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise UsageError("refs and hyps must have equal counts")
    b = len(refs)
    if b == 0:
        raise UsageError("align_and_score needs at least one pair")
    if b > 8:
        raise UsageError("alignment is brute-force; B > 8 unsupported")
    if b == 1:
        return rouge(refs[0], hyps[0])

    r1f = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            r1f[i, j] = rouge(refs[i], hyps[j]).r1.f
    best_perm, best_score = None, -1.0
    for perm in itertools.permutations(range(b)):
        score = sum(r1f[i, perm[i]] for i in range(b))
        if score > best_score:
            best_perm, best_score = perm, score
    scored = [rouge(refs[i], hyps[best_perm[i]]) for i in range(b)]
    return RougeScores(
        _mean_prf([s.r1 for s in scored]),
        _mean_prf([s.r2 for s in scored]),
        _mean_prf([s.rl for s in scored]),
    )


def random_rouge_baseline(
    refs, vocab_size: int, draws: int = 100, seed: int = 0
) -> float:
    """Median RL-F of uniformly random token sequences against ``refs``.

    The floor a reconstruction attack must beat to count as leakage.
    """
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(draws):
        hyps = [rng.integers(0, vocab_size, size=len(r)).tolist() for r in refs]
        scores.append(align_and_score(refs, hyps).rl.f)
    return float(np.median(scores))
