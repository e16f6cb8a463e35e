import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import smoothed_kl
from xmodal.exceptions import ConfigError
from xmodal.losses import (
    LossValue,
    LossWeights,
    cncr_loss,
    collaborative_loss,
    cross_entropy_soft,
    reid_loss,
    softmax,
    total_loss_stage1,
    total_loss_stage2,
    triplet_batch_hard,
)


def _fd_logits(fn, logits, h=1e-6):
    g = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (fn(up) - fn(dn)) / (2 * h)
    return g


# --- cross-entropy -------------------------------------------------------------

def test_ce_perfect_prediction_is_zero():
    assert cross_entropy_soft(np.eye(3), np.eye(3)).value == 0.0


def test_ce_uniform_prediction_is_log_c():
    t = np.random.default_rng(0).dirichlet(np.ones(4), size=5)
    assert cross_entropy_soft(np.full((5, 4), 0.25), t).value == pytest.approx(np.log(4), abs=1e-12)


def test_ce_hand_value():
    # closed form -(0.75 log 0.7 + 0.25 log 0.3) = 0.5684994
    expected = -(0.75 * np.log(0.7) + 0.25 * np.log(0.3))
    assert cross_entropy_soft([[0.7, 0.3]], [[0.75, 0.25]]).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.568499, abs=1e-6)


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 3))
    t = rng.dirichlet(np.ones(3), size=4)
    num = _fd_logits(lambda l: cross_entropy_soft(softmax(l), t).value, z)
    np.testing.assert_allclose(cross_entropy_soft(softmax(z), t).grads["logits"], num, atol=1e-8)


def test_ce_shape_mismatch():
    with pytest.raises(ValueError):
        cross_entropy_soft(np.eye(2), np.eye(3))


# --- triplet ---------------------------------------------------------------------

def test_triplet_separated_classes_zero():
    E = np.array([[0.0], [0.01], [10.0], [10.01]])
    assert triplet_batch_hard(E, [0, 0, 1, 1]).value == 0.0


def test_triplet_hand_value():
    E = np.array([[0.0], [2.0], [1.0], [3.0]])
    loss = triplet_batch_hard(E, [0, 0, 1, 1], margin=0.3)
    assert loss.value == pytest.approx(1.3, abs=1e-12)
    assert loss.info["valid_anchors"] == 4 and loss.info["active_anchors"] == 4


def test_triplet_single_class_is_zero_with_zero_gradient():
    loss = triplet_batch_hard(np.random.default_rng(0).standard_normal((4, 2)), [1, 1, 1, 1])
    assert loss.value == 0.0
    assert not loss.grads["embeddings"].any()


def test_triplet_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((6, 3))
    y = [0, 0, 1, 1, 2, 2]
    an = triplet_batch_hard(E, y, margin=2.0).grads["embeddings"]
    num = _fd_logits(lambda e: triplet_batch_hard(e, y, margin=2.0).value, E)
    np.testing.assert_allclose(an, num, atol=1e-7)


def test_triplet_needs_two_rows():
    with pytest.raises(ValueError):
        triplet_batch_hard(np.zeros((1, 2)), [0])


# --- reid / branch / totals ---------------------------------------------------------

def test_reid_is_sum_of_parts():
    E = np.array([[0.0], [2.0], [1.0], [3.0]])
    loss = reid_loss(E, np.full((4, 2), 0.5), [0, 0, 1, 1])
    assert loss.value == pytest.approx(1.3 + np.log(2), abs=1e-12)
    assert loss.value == pytest.approx(1.993147, abs=1e-6)


def test_reid_perfect_is_zero():
    E = np.array([[0.0], [0.0], [10.0], [10.0]])
    assert reid_loss(E, np.eye(2)[[0, 0, 1, 1]], [0, 0, 1, 1]).value == 0.0


def test_collaborative_hand_batch_and_empty_batch():
    own = LossValue(0.5, {"embeddings": np.zeros((2, 2)), "logits": np.zeros((2, 2))})
    P = np.array([[0.8, 0.2], [0.4, 0.6]])
    T = np.eye(2)
    loss = collaborative_loss("visible", P, T, own)
    assert loss.value == pytest.approx(0.5 - (np.log(0.8) + np.log(0.6)) / 2, abs=1e-12)
    empty = collaborative_loss("infrared", np.zeros((0, 2)), np.zeros((0, 2)), own)
    assert empty.value == 0.5
    with pytest.raises(ValueError):
        collaborative_loss("thermal", P, T, own)


def test_totals():
    a = LossValue(1.3, {"g": np.ones(2)})
    b = LossValue(0.693, {"g": np.ones(2)})
    t = total_loss_stage1(a, b)
    assert t.value == pytest.approx(1.993, abs=1e-12)
    np.testing.assert_array_equal(t.grads["v.g"], 1.0)
    s = total_loss_stage2(LossValue(1.0), LossValue(2.0), LossValue(0.5, {"g": np.ones(1)}), LossWeights(alpha_cncr=0.3))
    assert s.value == pytest.approx(3.15, abs=1e-12)
    np.testing.assert_allclose(s.grads["r.g"], [0.3])
    assert total_loss_stage2(LossValue(1.0), LossValue(2.0), LossValue(0.5), LossWeights(alpha_cncr=0.0)).value == 3.0
    assert LossWeights().alpha_cncr == 0.3


def test_weights_reject_negative():
    with pytest.raises(ConfigError):
        LossWeights(alpha_cncr=-0.1)


# --- neighbour consistency ----------------------------------------------------------

def test_cncr_identical_is_zero():
    p = np.full((3, 4), 0.25)
    assert cncr_loss(p, np.repeat(p[:, None], 2, axis=1)).value == pytest.approx(0.0, abs=1e-15)


def test_cncr_hand_value_and_order_invariance():
    p = np.array([[0.8, 0.2]])
    q = np.array([[[0.5, 0.5], [0.7, 0.3]]])
    # KL((0.8, 0.2) || (0.6, 0.4)) = 0.8 log(4/3) + 0.2 log(1/2) = 0.0915162
    expected = 0.8 * np.log(0.8 / 0.6) + 0.2 * np.log(0.2 / 0.4)
    assert cncr_loss(p, q).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.091516, abs=1e-6)
    assert cncr_loss(p, q[:, ::-1]).value == cncr_loss(p, q).value


def test_cncr_gradient_flows_to_both_sides():
    rng = np.random.default_rng(4)
    zp = rng.standard_normal((3, 4))
    zq = rng.standard_normal((3, 2, 4))
    loss = cncr_loss(softmax(zp), softmax(zq))
    num_own = _fd_logits(lambda l: cncr_loss(softmax(l), softmax(zq)).value, zp)
    num_nbr = _fd_logits(lambda l: cncr_loss(softmax(zp), softmax(l)).value, zq)
    np.testing.assert_allclose(loss.grads["logits_own"], num_own, atol=1e-8)
    np.testing.assert_allclose(loss.grads["logits_neighbors"], num_nbr, atol=1e-8)
    assert np.abs(loss.grads["logits_neighbors"]).max() > 0


def test_cncr_without_neighbours():
    loss = cncr_loss(np.full((2, 3), 1 / 3), np.zeros((2, 0, 3)))
    assert loss.value == 0.0 and loss.info["skipped"] == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 4), st.integers(2, 5))
def test_cncr_matches_reference_and_is_nonnegative(seed, n, k, C):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(C) * 0.5, size=n)
    Q = rng.dirichlet(np.ones(C) * 0.5, size=(n, k))
    loss = cncr_loss(P, Q)
    ref = np.mean([smoothed_kl(P[i], Q[i].mean(0)) for i in range(n)])
    assert loss.value >= 0
    assert loss.value == pytest.approx(max(ref, 0.0), rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(2, 4))
def test_losses_finite_and_nonnegative(seed, B, C):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((B, 3))
    P = rng.dirichlet(np.ones(C), size=B)
    y = rng.integers(0, C, B)
    for loss in (triplet_batch_hard(E, y), reid_loss(E, P, y), cross_entropy_soft(P, np.eye(C)[y])):
        assert np.isfinite(loss.value) and loss.value >= 0
