"""Additive attention over spatial feature rows or region feature rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .dan import uniform

MASK_SCORE = -1e9


@dataclass
class AttentionParams:
    """scores_i = w_score . relu(v_i @ W_feat + h @ W_hidden)."""

    W_feat: Tensor
    W_hidden: Tensor
    w_score: Tensor

    @classmethod
    def init(cls, rng, feat_dim, hidden, att, dtype=np.float64):
        return cls(W_feat=uniform(rng, (feat_dim, att), 1 / np.sqrt(feat_dim), dtype),
                   W_hidden=uniform(rng, (hidden, att), 1 / np.sqrt(hidden), dtype),
                   w_score=uniform(rng, (att, 1), 1 / np.sqrt(att), dtype))

    @property
    def feat_dim(self):
        return self.W_feat.shape[0]


@dataclass
class ContextVector:
    c: Tensor
    alpha: Tensor


def _check(feats, h, params):
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ShapeError(f"attention needs at least one feature row, got {feats.shape}")
    if feats.shape[1] != params.feat_dim:
        raise ShapeError(f"feature width {feats.shape[1]} != expected {params.feat_dim}")
    if h.shape[-1] != params.W_hidden.shape[0]:
        raise ShapeError(f"hidden width {h.shape[-1]} != expected {params.W_hidden.shape[0]}")


def attend(feats, h, params, mask=None):
    """Single-example attention: feats (n, d_f), h (hidden,) -> ContextVector."""
    feats = ad.as_tensor(feats)
    h = ad.as_tensor(h)
    _check(feats, h, params)
    hid = ad.reshape(h, (1, -1)) @ params.W_hidden
    pre = feats @ params.W_feat + ad.reshape(hid, (-1,))
    scores = ad.reshape(ad.relu(pre) @ params.w_score, (-1,))
    if mask is not None:
        scores = scores + Tensor(np.where(np.asarray(mask, bool), 0.0, MASK_SCORE))
    alpha = ad.softmax(scores)
    c = ad.reshape(ad.reshape(alpha, (1, -1)) @ feats, (-1,))
    return ContextVector(c=c, alpha=alpha)


def attend_spatial(V, h1, params, mask=None):
    """Attention over the p local rows plus the global row of V."""
    V = ad.as_tensor(V)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ShapeError(f"spatial features need p >= 1 local rows plus a global row, got {V.shape}")
    return attend(V, h1, params, mask)


def attend_regions(B, h1, params, mask=None):
    B = ad.as_tensor(B)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ShapeError("region attention needs k >= 1 regions")
    return attend(B, h1, params, mask)


class BatchedFeatures:
    """Per-batch constants reused at every timestep.

    ``feats`` is (B, P, d_f) zero-padded, ``mask`` (B, P) marks real rows.
    The feature projection is computed once per sequence.
    """

    def __init__(self, feats, mask, params):
        feats = np.asarray(feats)
        B, P, D = feats.shape
        self.B, self.P = B, P
        dtype = params.W_feat.data.dtype
        self.feats = Tensor(feats.astype(dtype))
        self.mask = np.asarray(mask, bool)
        self.bias = Tensor(np.where(self.mask, 0.0, MASK_SCORE).astype(dtype))
        self.repeat = Tensor(np.repeat(np.eye(B, dtype=dtype), P, axis=0))
        self.proj = ad.reshape(self.feats, (B * P, D)) @ params.W_feat
        counts = self.mask.sum(axis=1, keepdims=True)
        self.mean = Tensor((feats * self.mask[..., None]).sum(axis=1) / np.maximum(counts, 1))


def attend_batch(bf, h, params):
    """Batched attention: h (B, hidden) -> (context (B, d_f), alpha (B, P))."""
    hid = bf.repeat @ (h @ params.W_hidden)
    scores = ad.reshape(ad.relu(bf.proj + hid) @ params.w_score, (bf.B, bf.P)) + bf.bias
    alpha = ad.softmax(scores)
    c = ad.bmm(ad.reshape(alpha, (bf.B, 1, bf.P)), bf.feats)
    return ad.reshape(c, (bf.B, -1)), alpha
