"""Corpus caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

The arithmetic follows the COCO caption evaluation toolkit (closest
reference length for BLEU's brevity penalty, ROUGE-L with beta = 1.2 over
the best precision and recall, CIDEr-D with clipped tf-idf and sigma = 6),
so scores are comparable with published numbers. Captions are expected
already tokenized; ``corpus.tokenize`` is the tokenizer used throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .corpus import MAX_LEN, tokenize

_TINY = 1e-15
_SMALL = 1e-9


class MetricError(ValueError):
    pass


def _toks(caption):
    return tokenize(caption) if isinstance(caption, str) else [str(t) for t in caption]


def _prepare(candidates, references):
    if len(candidates) == 0:
        raise MetricError("empty candidate set")
    if len(candidates) != len(references):
        raise MetricError(f"{len(candidates)} candidates but {len(references)} reference sets")
    cands = [_toks(c) for c in candidates]
    refs = []
    for i, rs in enumerate(references):
        if isinstance(rs, str) or not rs:
            raise MetricError(f"image {i}: references must be a non-empty list of captions")
        refs.append([_toks(r) for r in rs])
    return cands, refs


def ngram_counts(tokens, n=4):
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(tokens) - k + 1):
            counts[tuple(tokens[i:i + k])] += 1
    return counts


# ---------------------------------------------------------------------- BLEU

def _bleu_counts(cands, refs, n_max):
    correct = [0] * n_max
    guess = [0] * n_max
    testlen = reflen = 0
    for cand, rs in zip(cands, refs):
        maxref = {}
        for r in rs:
            for g, c in ngram_counts(r, n_max).items():
                maxref[g] = max(maxref.get(g, 0), c)
        tl = len(cand)
        testlen += tl
        reflen += min((abs(len(r) - tl), len(r)) for r in rs)[1]
        for k in range(n_max):
            guess[k] += max(0, tl - k)
        for g, c in ngram_counts(cand, n_max).items():
            correct[len(g) - 1] += min(maxref.get(g, 0), c)
    return correct, guess, testlen, reflen


def modified_precisions(candidates, references, n_max=4):
    """Corpus clipped n-gram precisions p_1..p_n_max, without brevity penalty."""
    correct, guess, _, _ = _bleu_counts(*_prepare(candidates, references), n_max)
    return [c / g if g else 0.0 for c, g in zip(correct, guess)]


def bleu(candidates, references, n_max=4):
    """Corpus BLEU-1..n_max with clipped n-gram precision and brevity penalty."""
    correct, guess, testlen, reflen = _bleu_counts(*_prepare(candidates, references), n_max)
    scores = []
    prod = 1.0
    for k in range(n_max):
        prod *= (correct[k] + _TINY) / (guess[k] + _SMALL)
        scores.append(prod ** (1.0 / (k + 1)))
    ratio = (testlen + _TINY) / (reflen + _SMALL)
    if ratio < 1:
        scores = [s * math.exp(1 - 1 / ratio) for s in scores]
    return scores


# ------------------------------------------------------------------- ROUGE-L

def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate, refs, beta=1.2):
    if not candidate:
        return 0.0
    prec = []
    rec = []
    for r in refs:
        lcs = lcs_length(r, candidate)
        prec.append(lcs / len(candidate))
        rec.append(lcs / len(r) if r else 0.0)
    p, r = max(prec), max(rec)
    if p == 0 or r == 0:
        return 0.0
    return ((1 + beta ** 2) * p * r) / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta=1.2):
    cands, refs = _prepare(candidates, references)
    return float(np.mean([rouge_l_single(c, rs, beta) for c, rs in zip(cands, refs)]))


# -------------------------------------------------------------------- CIDEr

@dataclass
class CiderStats:
    document_frequency: dict = field(default_factory=dict)
    n_images: int = 0

    @classmethod
    def from_references(cls, refs, n=4):
        df = defaultdict(float)
        for rs in refs:
            for g in {g for r in rs for g in ngram_counts(r, n)}:
                df[g] += 1
        return cls(document_frequency=dict(df), n_images=len(refs))


def _tfidf(counts, stats, ref_len, n):
    vec = [dict() for _ in range(n)]
    norm = [0.0] * n
    length = 0
    for g, tf in counts.items():
        k = len(g) - 1
        w = float(tf) * (ref_len - np.log(max(1.0, stats.document_frequency.get(g, 0.0))))
        vec[k][g] = w
        norm[k] += w * w
        if k == 1:
            # the toolkit's length is a bigram count
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def _sim(vh, vr, nh, nr, lh, lr, n, sigma):
    delta = float(lh - lr)
    val = np.zeros(n)
    for k in range(n):
        for g, w in vh[k].items():
            wr = vr[k].get(g, 0.0)
            val[k] += min(w, wr) * wr
        if nh[k] != 0 and nr[k] != 0:
            val[k] /= nh[k] * nr[k]
        val[k] *= math.exp(-(delta ** 2) / (2 * sigma ** 2))
    return val


def cider_scores(candidates, references, n=4, sigma=6.0):
    """Per-image CIDEr-D (x10), idf from the references of this corpus."""
    cands, refs = _prepare(candidates, references)
    if len(refs) < 2:
        warnings.warn("CIDEr on a single-image corpus: every idf is log(1/1) = 0", stacklevel=2)
    stats = CiderStats.from_references(refs, n)
    ref_len = np.log(float(stats.n_images))
    out = []
    for cand, rs in zip(cands, refs):
        vh, nh, lh = _tfidf(ngram_counts(cand, n), stats, ref_len, n)
        score = np.zeros(n)
        for r in rs:
            vr, nr, lr = _tfidf(ngram_counts(r, n), stats, ref_len, n)
            score += _sim(vh, vr, nh, nr, lh, lr, n, sigma)
        out.append(float(np.mean(score) / len(rs) * 10.0))
    return out


def cider(candidates, references, n=4, sigma=6.0):
    return float(np.mean(cider_scores(candidates, references, n, sigma)))


# --------------------------------------------------------------- evaluation

@dataclass
class EvalBundle:
    candidates: list
    references: list
    scores: dict
    ids: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(self.scores, sort_keys=True)


def score_captions(candidates, references):
    b = bleu(candidates, references)
    return {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
            "rougeL": rouge_l(candidates, references),
            "cider": cider(candidates, references), "n_images": len(candidates)}


def evaluate(params, examples, vocab, beam=3, max_len=MAX_LEN, expected_vocab=None):
    """Decode every example (beam search) and score against its gold captions."""
    from .inference import beam_decode, greedy_decode_batch

    if expected_vocab is not None and expected_vocab != vocab.digest():
        raise MetricError("vocabulary hash mismatch between checkpoint and evaluation data")
    if beam == 1:
        decoded = greedy_decode_batch(params, examples, vocab, max_len)
    else:
        decoded = [beam_decode(params, ex, vocab, k=beam, max_len=max_len)[0] for ex in examples]
    cands = [d.words(vocab) for d in decoded]
    refs = [ex.gold for ex in examples]
    return EvalBundle(cands, refs, score_captions(cands, refs), [ex.id for ex in examples])
