import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from capmod import autodiff as ad
from capmod.attention import AttentionParams, BatchedFeatures, attend_batch, attend_regions, attend_spatial
from capmod.autodiff import ShapeError, Tensor


def params(feat=4, hidden=5, att=3, seed=0):
    return AttentionParams.init(ad.make_rng(seed), feat, hidden, att)


def test_identical_rows_give_uniform_attention():
    p = params()
    v = np.array([0.2, -0.1, 0.5, 1.0])
    ctx = attend_spatial(np.tile(v, (5, 1)), np.ones(5), p)
    np.testing.assert_allclose(ctx.alpha.data, 0.2, atol=1e-15)
    np.testing.assert_allclose(ctx.c.data, v, atol=1e-15)


def test_zero_scorer_gives_uniform_attention():
    p = params()
    p.w_score.data[:] = 0
    rng = np.random.default_rng(0)
    ctx = attend_spatial(rng.standard_normal((6, 4)), rng.standard_normal(5), p)
    np.testing.assert_allclose(ctx.alpha.data, 1 / 6, atol=1e-15)


def test_spatial_matches_scalar_oracle():
    p = params(seed=2)
    rng = np.random.default_rng(2)
    V, h = rng.standard_normal((5, 4)), rng.standard_normal(5)
    alpha, c = oracles.attention(V, h, p.W_feat.data, p.W_hidden.data, p.w_score.data)
    ctx = attend_spatial(V, h, p)
    np.testing.assert_allclose(ctx.alpha.data, alpha, atol=1e-10, rtol=0)
    np.testing.assert_allclose(ctx.c.data, c, atol=1e-10, rtol=0)


def test_single_region():
    p = params()
    b = np.array([[1.0, 2.0, 3.0, 4.0]])
    ctx = attend_regions(b, np.zeros(5), p)
    np.testing.assert_array_equal(ctx.alpha.data, [1.0])
    np.testing.assert_array_equal(ctx.c.data, b[0])


def test_two_identical_regions():
    ctx = attend_regions(np.ones((2, 4)), np.arange(5.0), params())
    np.testing.assert_allclose(ctx.alpha.data, [0.5, 0.5], atol=1e-15)


def test_regions_match_scalar_oracle():
    p = params(seed=5)
    rng = np.random.default_rng(5)
    B, h = rng.standard_normal((4, 4)), rng.standard_normal(5)
    alpha, c = oracles.attention(B, h, p.W_feat.data, p.W_hidden.data, p.w_score.data)
    ctx = attend_regions(B, h, p)
    np.testing.assert_allclose(ctx.alpha.data, alpha, atol=1e-10, rtol=0)
    np.testing.assert_allclose(ctx.c.data, c, atol=1e-10, rtol=0)


def test_shape_errors():
    p = params()
    with pytest.raises(ShapeError):
        attend_spatial(np.ones((1, 4)), np.ones(5), p)
    with pytest.raises(ShapeError):
        attend_regions(np.ones((0, 4)), np.ones(5), p)
    with pytest.raises(ShapeError):
        attend_regions(np.ones((2, 3)), np.ones(5), p)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 7), seed=st.integers(0, 10_000), scale=st.floats(0.1, 50))
def test_simplex_convexity_and_permutation(n, seed, scale):
    p = params(seed=seed % 5)
    rng = np.random.default_rng(seed)
    F, h = rng.standard_normal((n, 4)) * scale, rng.standard_normal(5)
    ctx = attend_regions(F, h, p)
    a, c = ctx.alpha.data, ctx.c.data
    assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-9
    assert np.all(c >= F.min(axis=0) - 1e-9) and np.all(c <= F.max(axis=0) + 1e-9)
    perm = rng.permutation(n)
    ctx2 = attend_regions(F[perm], h, p)
    np.testing.assert_allclose(ctx2.alpha.data, a[perm], atol=1e-12)
    np.testing.assert_allclose(ctx2.c.data, c, atol=1e-12)


def test_padded_rows_get_no_weight():
    p = params()
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((2, 4, 4))
    mask = np.array([[True, True, True, True], [True, True, False, False]])
    h = rng.standard_normal((2, 5))
    c, alpha = attend_batch(BatchedFeatures(feats, mask, p), Tensor(h), p)
    assert np.all(alpha.data[1, 2:] < 1e-300)
    single = attend_regions(feats[1, :2], h[1], p)
    np.testing.assert_allclose(c.data[1], single.c.data, atol=1e-12)
    np.testing.assert_allclose(alpha.data[0], attend_regions(feats[0], h[0], p).alpha.data, atol=1e-12)


@pytest.mark.parametrize("rows", [5, 3])
def test_attention_gradients(rows):
    p = params(seed=1)
    rng = np.random.default_rng(rows)
    feats = rng.standard_normal((2, rows, 4))
    h = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = rng.standard_normal((2, 4))
    bf_mask = np.ones((2, rows), bool)

    def fn():
        c, _ = attend_batch(BatchedFeatures(feats, bf_mask, p), h, p)
        return ad.tsum(c * w)

    rep = ad.check_gradients(fn, {"h": h, "W_feat": p.W_feat, "W_hidden": p.W_hidden, "w_score": p.w_score})
    for name, r in rep.items():
        assert r.rel_error < 1e-4, name
