import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from capmod import autodiff as ad
from capmod.autodiff import ShapeError, Tensor
from capmod.objective import (LossConfig, attribute_penalty, attribute_term, count_attribute_occurrences,
                              cross_entropy, total_loss)


class FakeBatch:
    def __init__(self, targets, mask, attributes):
        self.targets = np.asarray(targets)
        self.target_mask = np.asarray(mask, float)
        self.attributes = np.asarray(attributes)


def onehot_logits(targets, V, big=60.0):
    out = []
    for t in range(targets.shape[1]):
        lg = np.zeros((targets.shape[0], V))
        lg[np.arange(targets.shape[0]), targets[:, t]] = big
        out.append(Tensor(lg))
    return out


def test_one_hot_correct_gives_zero():
    probs = np.zeros((2, 3, 4))
    targets = np.array([[0, 1, 2], [3, 3, 0]])
    for n in range(2):
        for t in range(3):
            probs[n, t, targets[n, t]] = 1.0
    lp = np.log(np.where(probs > 0, probs, 1e-300))
    assert cross_entropy(lp, targets, np.ones((2, 3))).item() == 0.0


def test_uniform_over_four_words():
    lp = np.log(np.full((1, 1, 4), 0.25))
    assert cross_entropy(lp, [[2]], [[1]]).item() == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 4, 6))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    targets = rng.integers(0, 6, (3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]])
    got = cross_entropy(ad.log_softmax(Tensor(logits)), targets, mask).item()
    assert abs(got - oracles.cross_entropy(probs.tolist(), targets.tolist(), mask.tolist())) < 1e-10


def test_cross_entropy_out_of_range_target():
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((1, 1, 3)), [[3]], [[1]])


def test_masked_steps_contribute_nothing():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    targets = np.array([[1, 2, 3], [4, 0, 0]])
    mask = np.array([[1, 1, 1], [1, 0, 0]])
    loss = cross_entropy(ad.log_softmax(x), targets, mask)
    loss.backward()
    np.testing.assert_array_equal(x.grad[1, 1:], 0)
    changed = x.data.copy()
    changed[1, 1:] = 100 * rng.standard_normal((2, 5))
    assert cross_entropy(ad.log_softmax(Tensor(changed)), targets, mask).item() == loss.item()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    lp = ad.log_softmax(Tensor(rng.standard_normal((2, 3, 4)) * 5))
    assert cross_entropy(lp, rng.integers(0, 4, (2, 3)), np.ones((2, 3))).item() >= 0


def test_attribute_term_maximal_at_zero_occurrences():
    assert attribute_penalty(0, 8, LossConfig()) == pytest.approx(0.4, abs=1e-15)


def test_attribute_term_vanishes_at_threshold():
    assert attribute_penalty(32, 8, LossConfig()) == 0.0


def test_attribute_term_at_three_per_caption():
    assert attribute_penalty(3, 1, LossConfig()) == pytest.approx(0.4 * math.exp(-2), abs=1e-12)
    assert attribute_penalty(3, 1, LossConfig()) == pytest.approx(0.05413, abs=1e-5)


def test_attribute_occurrences_count_multiplicity():
    gen = [[5, 5, 6, 9], [7]]
    attrs = [[5, 6, 1, 2, 3], [8, 1, 2, 3, 4]]
    assert count_attribute_occurrences(gen, attrs) == 3
    assert attribute_term(gen, attrs, LossConfig()) == pytest.approx(0.4 * math.exp(-2 * 3 / 6))


def test_attribute_term_monotone_in_occurrences():
    cfg = LossConfig()
    vals = [attribute_penalty(f, 4, cfg) for f in range(0, 25)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[15] > 0 and vals[16] == 0


def test_total_without_attribute_term_is_cross_entropy():
    rng = np.random.default_rng(2)
    targets = rng.integers(0, 5, (2, 3))
    logits = [Tensor(rng.standard_normal((2, 5))) for _ in range(3)]
    batch = FakeBatch(targets, np.ones((2, 3)), rng.integers(0, 5, (2, 5)))
    lb = total_loss(logits, batch, LossConfig(attribute_term=False))
    assert lb.total == lb.cross_entropy and lb.attribute_term == 0.0


def test_perfect_predictions_with_enough_attributes_give_zero():
    targets = np.array([[4, 4, 4, 4], [5, 5, 5, 5]])
    attrs = np.array([[4, 1, 1, 1, 1], [5, 1, 1, 1, 1]])
    batch = FakeBatch(targets, np.ones((2, 4)), attrs)
    lb = total_loss(onehot_logits(targets, 6), batch, LossConfig(attribute_term=True))
    assert lb.attribute_term == 0.0
    assert lb.total == pytest.approx(0.0, abs=1e-20)


def test_total_is_sum_of_independent_terms():
    rng = np.random.default_rng(3)
    targets = rng.integers(0, 6, (3, 4))
    mask = np.ones((3, 4))
    logits = [Tensor(rng.standard_normal((3, 6))) for _ in range(4)]
    attrs = rng.integers(0, 6, (3, 5))
    lb = total_loss(logits, FakeBatch(targets, mask, attrs), LossConfig(attribute_term=True))
    probs = [[list(np.exp(lg.data[n]) / np.exp(lg.data[n]).sum()) for lg in logits] for n in range(3)]
    xent = oracles.cross_entropy(probs, targets.tolist(), mask.tolist())
    greedy = [[int(lg.data[n].argmax()) for lg in logits] for n in range(3)]
    f = sum(sum(1 for t in g if t in set(a)) for g, a in zip(greedy, attrs.tolist()))
    attr = 0.4 * math.exp(-2 * f / 9) if f / 3 < 4 else 0.0
    assert abs(lb.total - (xent + attr)) < 1e-10
