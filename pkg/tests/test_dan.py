import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from capmod import autodiff as ad
from capmod.autodiff import Tensor
from capmod.dan import DanParams, EmptyCaptionError, average_words, encode, encode_batch


def setup(emb=6, d=6, vocab=12, seed=0):
    rng = ad.make_rng(seed)
    table = Tensor(rng.standard_normal((vocab, emb)), requires_grad=True)
    return table, DanParams.init(rng, emb, d)


def test_average_single_word():
    np.testing.assert_array_equal(average_words(np.array([[1.0, -2.0, 3.0]])).data, [1, -2, 3])


def test_average_opposite_words_cancel():
    w = np.array([0.3, -1.2])
    np.testing.assert_array_equal(average_words(np.stack([w, -w])).data, [0, 0])


def test_average_matches_scalar_mean():
    rng = np.random.default_rng(1)
    wv = rng.standard_normal((3, 4))
    got = average_words(wv).data
    for j in range(4):
        assert abs(got[j] - (wv[0, j] + wv[1, j] + wv[2, j]) / 3) < 1e-12


def test_average_empty_raises():
    with pytest.raises(EmptyCaptionError):
        average_words(np.zeros((0, 3)))


def test_zero_everything_gives_zero_embedding():
    table, p = setup()
    table.data[:] = 0
    for t in (p.b1, p.b2):
        t.data[:] = 0
    np.testing.assert_array_equal(encode([4, 5], table, p).data, np.zeros(6))


def test_encode_matches_scalar_oracle():
    table, p = setup(emb=5, d=4, seed=3)
    ids = [4, 7, 9, 4]
    want = oracles.dan(table.data[ids], p.W1.data, p.b1.data, p.W2.data, p.b2.data, p.proj.data)
    np.testing.assert_allclose(encode(ids, table, p).data, want, atol=1e-10, rtol=0)


def test_empty_caption_uses_e_null():
    table, p = setup()
    np.testing.assert_array_equal(encode([], table, p).data, p.e_null.data)
    np.testing.assert_array_equal(encode([1, 2], table, p).data, p.e_null.data)


@settings(max_examples=50, deadline=None)
@given(ids=st.lists(st.integers(4, 11), min_size=1, max_size=8), seed=st.integers(0, 10_000))
def test_order_invariance_and_bounds(ids, seed):
    table, p = setup(seed=seed % 7)
    e = encode(ids, table, p).data
    perm = list(np.random.default_rng(seed).permutation(ids))
    assert np.array_equal(encode(perm, table, p).data, e)
    assert np.all(np.abs(e) < 1)


def test_batch_encoding_matches_single():
    table, p = setup(emb=5, d=4)
    caps = [[4, 5, 6], [], [7]]
    L = 3
    ids = np.zeros((3, L), np.int64)
    for b, c in enumerate(caps):
        ids[b, :len(c)] = c
    got = encode_batch(ids, [len(c) for c in caps], table, p).data
    for b, c in enumerate(caps):
        np.testing.assert_allclose(got[b], encode(c, table, p).data, atol=1e-14)


def test_gradients_reach_embeddings_and_parameters():
    table, p = setup(emb=5, d=4)
    ids = np.array([[4, 5, 6], [0, 0, 0]])
    w = np.random.default_rng(0).standard_normal((2, 4))
    params = {"table": table, "W1": p.W1, "b1": p.b1, "W2": p.W2, "b2": p.b2, "e_null": p.e_null,
              "proj": p.proj}
    rep = ad.check_gradients(lambda: ad.tsum(encode_batch(ids, [3, 0], table, p) * w), params)
    for name, r in rep.items():
        assert r.rel_error < 1e-4, name
