"""Objective-function tests.

Dice fixtures follow the hard-count convention (2*overlap / (|p| + |g|));
gradients are checked against the central-difference oracle.
"""

import numpy as np
import pytest

from helpers import check_against_fd

from mstp.autodiff import Tensor
from mstp.errors import ContractError, RegistryError
from mstp.losses import (
    batch_targets, ce_targets, dice_loss, one_hot_target, proposal_ce, total_loss,
)


# ---------------------------------------------------------------------------
# targets


def test_one_hot_target_channels():
    # organ voxels (label 1) are background; tumor labels are 10 + class
    g = np.zeros((4, 4, 4), np.uint8)
    g.reshape(-1)[[0, 1]] = 1
    g.reshape(-1)[[5, 6]] = 11
    g.reshape(-1)[[9]] = 13
    t = one_hot_target(g, n_classes=4)
    assert t.shape == (4, 4, 4, 4)
    flat = t.reshape(4, -1)
    np.testing.assert_array_equal(np.flatnonzero(flat[1]), [5, 6])
    assert not flat[2].any()
    np.testing.assert_array_equal(np.flatnonzero(flat[3]), [9])
    # organ voxels land in channel 0; channels partition the grid
    assert flat[0, 0] == 1.0 and flat[0, 1] == 1.0
    np.testing.assert_array_equal(flat.sum(axis=0), np.ones(64))


def test_one_hot_target_requires_3d():
    with pytest.raises(ContractError):
        one_hot_target(np.zeros((4, 4), np.uint8), 4)


def test_batch_targets_stacks():
    g = np.zeros((4, 4, 4), np.uint8)
    out = batch_targets([g, g], 3)
    assert out.shape == (2, 3, 4, 4, 4)


# ---------------------------------------------------------------------------
# dice


def one_hot_logits(target, scale=40.0):
    return (target * 2.0 - 1.0) * scale


def test_dice_loss_perfect_prediction_is_zero():
    g = np.zeros((4, 4, 4), np.uint8)
    g[1, 1, 1] = 11
    g[2, 2, 2] = 12
    g[3, 3, 3] = 13
    target = batch_targets([g], 4)
    loss = dice_loss(Tensor(one_hot_logits(target).astype(np.float32)), target)
    assert float(loss.data) <= 1e-4


def test_dice_loss_half_overlap_fixture():
    # |g| = 4, |p| = 4, overlap 2 -> Dice 2*2/8 = 0.5, loss 0.5
    target = np.zeros((1, 2, 2, 2, 2), np.float32)
    target[0, 1].reshape(-1)[[0, 1, 2, 3]] = 1.0
    target[0, 0] = 1.0 - target[0, 1]
    pred = np.zeros_like(target)
    pred[0, 1].reshape(-1)[[2, 3, 4, 5]] = 1.0   # covers half of g
    pred[0, 0] = 1.0 - pred[0, 1]
    loss = dice_loss(Tensor(one_hot_logits(pred).astype(np.float32)), target)
    assert float(loss.data) == pytest.approx(0.5, abs=1e-5)


def test_dice_loss_absent_class_costs_nothing():
    # class 2 exists as a channel but has no voxels anywhere; predicting no
    # mass there must contribute zero loss via the eps/eps convention
    g = np.zeros((4, 4, 4), np.uint8)
    g[0, 0, 0] = 11
    target = batch_targets([g], 3)
    loss = dice_loss(Tensor(one_hot_logits(target).astype(np.float32)), target)
    assert float(loss.data) <= 1e-4


def test_dice_loss_contracts():
    target = np.zeros((1, 3, 2, 2, 2), np.float32)
    with pytest.raises(ContractError):
        dice_loss(Tensor(np.zeros((1, 3, 2, 2, 4), np.float32)), target)
    with pytest.raises(ContractError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2, 2), np.float32)),
                  np.zeros((1, 1, 2, 2, 2), np.float32))


def test_dice_loss_gradients_match_finite_differences():
    g = np.random.Generator(np.random.Philox(key=np.array([3, 1], np.uint64)))
    logits = g.uniform(-1, 1, (2, 3, 2, 2, 2))
    target = np.zeros((2, 3, 2, 2, 2), np.float32)
    picks = g.integers(0, 3, size=(2, 2, 2, 2))
    for b in range(2):
        for idx in np.ndindex(2, 2, 2):
            target[(b, picks[(b,) + idx]) + idx] = 1.0
    check_against_fd(lambda lg: dice_loss(lg, target), [logits])


# ---------------------------------------------------------------------------
# proposal cross-entropy


def test_proposal_ce_uniform_logits():
    theta = Tensor(np.zeros(4, np.float32))
    ce = proposal_ce([theta, Tensor(np.zeros(4, np.float32))], [1, 3])
    assert float(ce.data) == pytest.approx(np.log(4.0), abs=1e-6)


def test_proposal_ce_confident_correct_is_small():
    theta = Tensor(np.array([-20.0, 20.0, -20.0, -20.0], np.float32))
    assert float(proposal_ce([theta], [1]).data) <= 1e-6


def test_proposal_ce_errors():
    theta = Tensor(np.zeros(4, np.float32))
    with pytest.raises(RegistryError):
        proposal_ce([theta], [7])
    with pytest.raises(RegistryError):
        proposal_ce([theta], [-1])
    with pytest.raises(ContractError):
        proposal_ce([theta, theta], [1])


def test_ce_targets_fall_back_to_background():
    hit = np.zeros((4, 4, 4), np.uint8)
    hit[1, 1, 1] = 12
    miss = np.zeros((4, 4, 4), np.uint8)
    assert ce_targets([hit, miss], [2, 2]) == [2, 0]


# ---------------------------------------------------------------------------
# combination


def test_total_loss_composition():
    g = np.zeros((4, 4, 4), np.uint8)
    g[0, 0, 0] = 11
    target = batch_targets([g], 3)
    rng = np.random.Generator(np.random.Philox(key=np.array([9, 9], np.uint64)))
    logits = Tensor(rng.uniform(-1, 1, target.shape).astype(np.float32))
    theta = Tensor(rng.uniform(-1, 1, 3).astype(np.float32))

    total, d, ce = total_loss(logits, target, [theta], [1], lambda_ce=0.5)
    assert float(total.data) == pytest.approx(float(d.data) + 0.5 * float(ce.data),
                                              abs=1e-6)
    assert float(total.data) >= 0.0

    logits2 = Tensor(logits.data.copy())
    total2, d2, ce2 = total_loss(logits2, target, None, None)
    assert ce2 is None and total2 is d2
