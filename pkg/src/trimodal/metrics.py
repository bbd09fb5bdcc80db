"""Evaluation metrics: concordance index, ROC AUC, macro-F1, BLEU, ROUGE-L.

All metrics are pure functions over numpy arrays / token lists; evaluation
shards can be computed concurrently and merged by the caller.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RiskRanking", "GenerationPair",
    "concordance_index", "auc_roc", "f1_score",
    "bleu_n", "corpus_bleu", "rouge_l",
    "write_metrics",
]


@dataclass
class RiskRanking:
    scores: np.ndarray
    times: np.ndarray
    censored: np.ndarray   # 1 = censored

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.censored = np.asarray(self.censored, dtype=int)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("risk scores must be finite")


@dataclass
class GenerationPair:
    hypothesis: list
    reference: list

    def __post_init__(self):
        self.hypothesis = [int(t) for t in self.hypothesis]
        self.reference = [int(t) for t in self.reference]
        if not self.reference:
            raise ValueError("reference must be non-empty")


def concordance_index(ranking):
    """Fraction of comparable pairs ordered correctly by risk.

    A pair is comparable when the earlier time belongs to an uncensored
    patient (equal times are not comparable).  Risk ties count 1/2.
    """
    s, t, c = ranking.scores, ranking.times, ranking.censored
    n = len(t)
    num = 0.0
    den = 0
    for i in range(n):
        if c[i] == 1:
            continue
        for j in range(n):
            if i == j or t[i] >= t[j]:
                continue
            den += 1
            if s[i] > s[j]:
                num += 1.0
            elif s[i] == s[j]:
                num += 0.5
    if den == 0:
        raise ValueError("no comparable pair (all censored or all ties in time)")
    return num / den


def _binary_auc(scores, positive):
    """Mann-Whitney AUC via average ranks; ties contribute 1/2."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[positive].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_roc(scores, labels):
    """Binary AUC for 1-D scores; one-vs-rest macro average for (N, C)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim == 1:
        return _binary_auc(scores, labels == 1)
    per_class = []
    for c in range(scores.shape[1]):
        per_class.append(_binary_auc(scores[:, c], labels == c))
    return float(np.mean(per_class))


def f1_score(preds, labels, n_classes):
    """Unweighted macro-F1; a class with no F1 mass contributes 0."""
    if n_classes < 2:
        raise ValueError("macro-F1 needs at least two classes")
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def _ngram_counts(tokens, k):
    return Counter(tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1))


def _pair_precision_counts(pair, k):
    hyp_counts = _ngram_counts(pair.hypothesis, k)
    ref_counts = _ngram_counts(pair.reference, k)
    clipped = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    total = max(len(pair.hypothesis) - k + 1, 0)
    return clipped, total


def _bleu_from_counts(clipped, totals, hyp_len, ref_len, smooth_eps=None):
    precisions = []
    for c, t in zip(clipped, totals):
        if t == 0:
            return 0.0
        if c == 0:
            if smooth_eps is None:
                return 0.0
            c = smooth_eps
        precisions.append(c / t)
    geo = math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len)) if hyp_len > 0 else 0.0
    return geo * bp


def bleu_n(pair, n, smooth_eps=None):
    """Sentence-level BLEU-n: modified k-gram precisions (k <= n) with the
    exponential brevity penalty.  ``smooth_eps`` replaces zero clipped
    counts (off by default)."""
    if n not in (1, 2, 3, 4):
        raise ValueError("BLEU order must be 1..4")
    if not pair.hypothesis:
        return 0.0
    clipped, totals = zip(*(_pair_precision_counts(pair, k)
                            for k in range(1, n + 1)))
    return _bleu_from_counts(clipped, totals, len(pair.hypothesis),
                             len(pair.reference), smooth_eps)


def corpus_bleu(pairs, n, smooth_eps=None):
    """Corpus-level BLEU-n over aggregated counts (the reported number)."""
    if n not in (1, 2, 3, 4):
        raise ValueError("BLEU order must be 1..4")
    clipped = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp_len += len(pair.hypothesis)
        ref_len += len(pair.reference)
        for k in range(1, n + 1):
            c, t = _pair_precision_counts(pair, k)
            clipped[k - 1] += c
            totals[k - 1] += t
    if hyp_len == 0:
        return 0.0
    return _bleu_from_counts(clipped, totals, hyp_len, ref_len, smooth_eps)


def _lcs_length(a, b):
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[len(a), len(b)])


def rouge_l(pair, beta=1.2):
    """LCS F-measure: F = (1 + b^2) P R / (R + b^2 P)."""
    if not pair.hypothesis:
        return 0.0
    lcs = _lcs_length(pair.hypothesis, pair.reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pair.hypothesis)
    recall = lcs / len(pair.reference)
    b2 = beta * beta
    return (1 + b2) * precision * recall / (recall + b2 * precision)


def write_metrics(path_prefix, values):
    """Emit plain-text key=value and a JSON twin for machines."""
    with open(str(path_prefix) + ".txt", "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")
    with open(str(path_prefix) + ".json", "w") as fh:
        json.dump({k: values[k] for k in sorted(values)}, fh, indent=1)
        fh.write("\n")
