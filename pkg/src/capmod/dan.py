"""Deep averaging network over the existing caption's word vectors."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyCaptionError(ValueError):
    pass


def uniform(rng, shape, scale, dtype=np.float64):
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)


def named(group, prefix):
    """Flatten a parameter dataclass into {prefix.field: Tensor}."""
    out = {}
    for f in fields(group):
        value = getattr(group, f.name)
        if isinstance(value, Tensor):
            out[f"{prefix}.{f.name}"] = value
    return out


@dataclass
class DanParams:
    """Weights are stored (in, out): layer k computes tanh(x @ W_k + b_k).

    ``proj`` maps word vectors to the sentence width when they differ.
    ``e_null`` is the embedding used for captions with no real words.
    """

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    e_null: Tensor
    proj: Tensor | None = None

    @classmethod
    def init(cls, rng, emb_dim, d, dtype=np.float64):
        proj = uniform(rng, (emb_dim, d), 1 / np.sqrt(emb_dim), dtype) if emb_dim != d else None
        s = 1 / np.sqrt(d)
        return cls(W1=uniform(rng, (d, d), s, dtype), b1=uniform(rng, (d,), s, dtype),
                   W2=uniform(rng, (d, d), s, dtype), b2=uniform(rng, (d,), s, dtype),
                   e_null=uniform(rng, (d,), 0.1, dtype), proj=proj)

    @property
    def dim(self):
        return self.W1.shape[0]


def average_words(word_vectors):
    """Mean over the rows of an (m, d) matrix of word vectors."""
    wv = ad.as_tensor(word_vectors)
    if wv.ndim != 2 or wv.shape[0] == 0:
        raise EmptyCaptionError(f"cannot average an empty caption (shape {wv.shape})")
    return ad.mean(wv, axis=0)


def _layers(a, params):
    if params.proj is not None:
        a = a @ params.proj
    e1 = ad.tanh(a @ params.W1 + params.b1)
    return ad.tanh(e1 @ params.W2 + params.b2)


def encode(caption_ids, embeddings, params, special_ids=(0, 1, 2)):
    """Sentence embedding of one caption: tanh(W2 tanh(W1 mean(w) + b1) + b2).

    Specials (pad/start/end) are stripped; a caption with nothing left maps
    to the learned ``e_null`` vector.
    """
    # sorted so the floating-point sum, and hence e, is exactly order invariant
    ids = sorted(int(i) for i in caption_ids if int(i) not in special_ids)
    if not ids:
        return params.e_null * 1.0
    words = ad.embed(embeddings, np.asarray(ids))
    a = ad.reshape(average_words(words), (1, -1))
    return ad.reshape(_layers(a, params), (-1,))


def encode_batch(ids, lengths, embeddings, params):
    """Batched encode of padded (B, L) ids with per-row word counts.

    Rows with length 0 take ``e_null``; the rest average their first
    ``lengths[b]`` word vectors through a constant averaging matrix.
    """
    ids = np.array(ids, dtype=np.int64)
    lengths = np.asarray(lengths)
    B, L = ids.shape
    for b in range(B):
        ids[b, :lengths[b]] = np.sort(ids[b, :lengths[b]])
    dtype = embeddings.data.dtype
    if L == 0:
        ids = np.zeros((B, 1), dtype=np.int64)
        L = 1
    avg = np.zeros((B, B * L), dtype=dtype)
    for b in range(B):
        n = int(lengths[b])
        if n:
            avg[b, b * L:b * L + n] = 1.0 / n
    words = ad.embed(embeddings, ids.reshape(-1))
    a = Tensor(avg) @ words
    e = _layers(a, params)
    # e_null joins the graph even when unused, so it always receives a gradient
    empty = (lengths == 0).astype(dtype)
    keep = Tensor(np.repeat((1.0 - empty)[:, None], e.shape[1], axis=1))
    null = Tensor(empty[:, None]) @ ad.reshape(params.e_null, (1, -1))
    return e * keep + null
