"""Caption metrics (corpus BLEU-1..4, ROUGE-L, CIDEr) and corpus mean cross-entropy.

All metrics take token lists; use :func:`prefixvlm.data.split_words` to
tokenize raw strings consistently with training.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX, build_batch
from .masks import MaskKind
from .model import forward_logits
from .tensor import no_grad


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple
    references: tuple

    def __post_init__(self):
        cand = tuple(self.candidate)
        refs = tuple(tuple(r) for r in self.references)
        if not cand:
            raise MetricError("empty candidate")
        if not refs or any(not r for r in refs):
            raise MetricError("each pair needs at least one nonempty reference")
        object.__setattr__(self, "candidate", cand)
        object.__setattr__(self, "references", refs)


def _pairs(pairs):
    pairs = [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]
    if not pairs:
        raise MetricError("empty corpus")
    return pairs


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs, n_max=4):
    """Corpus BLEU with uniform weights, no smoothing and closest-length brevity penalty."""
    if n_max not in (1, 2, 3, 4):
        raise MetricError("n_max must be 1..4")
    pairs = _pairs(pairs)
    matched = [0] * n_max
    totals = [0] * n_max
    cand_len = ref_len = 0
    for p in pairs:
        c = p.candidate
        cand_len += len(c)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in p.references)[1]
        for n in range(1, n_max + 1):
            counts = ngrams(c, n)
            max_ref = Counter()
            for r in p.references:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, totals)) / n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pairs, beta=1.2):
    """Mean over pairs of the best LCS F-measure against any reference."""
    pairs = _pairs(pairs)
    scores = []
    for p in pairs:
        best = 0.0
        for r in p.references:
            lcs = lcs_length(p.candidate, r)
            if lcs == 0:
                continue
            prec, rec = lcs / len(p.candidate), lcs / len(r)
            best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
        scores.append(best)
    return float(np.mean(scores))


def document_frequency(pairs, n_max=4):
    """Number of images whose reference set contains each n-gram."""
    df = Counter()
    for p in _pairs(pairs):
        seen = set()
        for r in p.references:
            for n in range(1, n_max + 1):
                seen.update(ngrams(r, n))
        df.update(seen)
    return df


def _tfidf(tokens, n, df, log_n):
    vec = {}
    for g, k in ngrams(tokens, n).items():
        vec[g] = k * (log_n - math.log(max(1.0, df.get(g, 0.0))))
    return vec


def _cosine(a, b):
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb) if na > 0 and nb > 0 else 0.0


def cider_scores(pairs, n_max=4, df=None, corpus_size=None):
    """Per-image CIDEr (no length penalty, no clipping), scaled by 10.

    IDF is log(corpus_size / df) with document frequencies from the reference
    corpus unless ``df``/``corpus_size`` are supplied.
    """
    pairs = _pairs(pairs)
    if corpus_size is None:
        corpus_size = len(pairs)
    if corpus_size < 2:
        raise MetricError("CIDEr needs at least two images to estimate document frequencies")
    df = document_frequency(pairs, n_max) if df is None else df
    log_n = math.log(float(corpus_size))
    scores = []
    for p in pairs:
        per_n = []
        for n in range(1, n_max + 1):
            cand = _tfidf(p.candidate, n, df, log_n)
            per_n.append(np.mean([_cosine(cand, _tfidf(r, n, df, log_n)) for r in p.references]))
        scores.append(10.0 * float(np.mean(per_n)))
    return scores


def cider(pairs, n_max=4, df=None, corpus_size=None):
    return float(np.mean(cider_scores(pairs, n_max, df, corpus_size)))


def corpus_mean_ce(dataset, params, cfg, vocab, batch_size=8, stage=None):
    """Token-weighted mean next-token cross-entropy over supervised positions.

    Uses the image-bidirectional/text-causal mask and no input noise.
    """
    if not dataset:
        raise MetricError("empty dataset")
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = build_batch(dataset[start:start + batch_size], stage, vocab, cfg)
            logits, _ = forward_logits(batch.images, batch.text_ids, params, cfg,
                                       MaskKind.IMAGE_BIDI_TEXT_CAUSAL, lengths=batch.lengths)
            z = logits.data.reshape(-1, logits.shape[-1])
            y = batch.labels.reshape(-1)
            keep = y != IGNORE_INDEX
            zk = z[keep]
            m = zk.max(axis=1)
            lse = m + np.log(np.exp(zk - m[:, None]).sum(axis=1))
            total += float((lse - zk[np.arange(len(zk)), y[keep]]).sum())
            count += int(keep.sum())
    return total / count
