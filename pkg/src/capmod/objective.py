"""Training loss: masked cross-entropy plus the attribute-occurrence penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError


@dataclass
class LossConfig:
    beta: float = 0.4
    occurrence_threshold: float = 4.0
    attribute_term: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class LossBreakdown:
    cross_entropy: float
    attribute_term: float
    total: float
    loss: ad.Tensor = None  # differentiable part, for backward()

    def as_dict(self):
        return {"xent": self.cross_entropy, "attr_term": self.attribute_term, "total": self.total}


def cross_entropy(log_probs, targets, mask):
    """-(1/N) sum_i sum_t mask * log p(y_t).

    ``log_probs`` is a list over timesteps of (N, V) tensors (or a single
    (N, T, V) array); ``targets`` and ``mask`` are (N, T).
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if isinstance(log_probs, (np.ndarray, ad.Tensor)) and np.ndim(getattr(log_probs, "data", log_probs)) == 3:
        lp = ad.as_tensor(log_probs)
        log_probs = [lp[:, t, :] for t in range(lp.shape[1])]
    N, T = targets.shape
    if len(log_probs) != T:
        raise ShapeError(f"{len(log_probs)} steps of log-probs for {T} target steps")
    V = log_probs[0].shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f"gold token out of range for vocabulary of {V}")
    total = None
    for t, lp in enumerate(log_probs):
        if not mask[:, t].any():
            continue
        term = ad.tsum(ad.pick(lp, targets[:, t]) * mask[:, t].astype(lp.data.dtype))
        total = term if total is None else total + term
    if total is None:
        return ad.Tensor(0.0)
    return total * (-1.0 / N)


def count_attribute_occurrences(generated, attributes):
    """Total occurrences (with multiplicity) of each caption's attribute words in it."""
    f = 0
    for caption, attrs in zip(generated, attributes):
        aset = set(attrs)
        f += sum(1 for tok in caption if tok in aset)
    return f


def attribute_penalty(f, n, cfg):
    """beta * exp(-2f / 3N) while f/N < threshold, else 0."""
    if n <= 0:
        raise ValueError("batch size must be positive")
    if f / n >= cfg.occurrence_threshold:
        return 0.0
    return cfg.beta * math.exp(-2.0 * f / (3.0 * n))


def attribute_term(generated, attributes, cfg):
    return attribute_penalty(count_attribute_occurrences(generated, attributes), len(generated), cfg)


def greedy_tokens(logits, mask):
    """Teacher-forced argmax caption per row over unmasked steps."""
    mask = np.asarray(mask)
    preds = np.stack([lg.data.argmax(axis=-1) for lg in logits], axis=1)
    return [list(preds[b][mask[b] > 0]) for b in range(preds.shape[0])]


def total_loss(logits, batch, cfg):
    """Cross-entropy over log-softmax of ``logits`` plus the (non-differentiable) attribute term."""
    log_probs = [ad.log_softmax(lg) for lg in logits]
    xent = cross_entropy(log_probs, batch.targets, batch.target_mask)
    attr = 0.0
    if cfg.attribute_term:
        gen = greedy_tokens(logits, batch.target_mask)
        attr = attribute_term(gen, [list(a) for a in batch.attributes], cfg)
    x = float(xent.data)
    return LossBreakdown(cross_entropy=x, attribute_term=attr, total=x + attr, loss=xent)
