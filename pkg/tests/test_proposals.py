import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from ovseg import tensor as T
from ovseg.backbones import VisionBackbone
from ovseg.proposals import ProposalHead, hungarian_match, matching_cost, proposal_loss
from ovseg.tensor import Tensor


def brute_force(cost):
    G, N = cost.shape
    return min(sum(cost[g, k] for g, k in enumerate(perm)) for perm in itertools.permutations(range(N), G))


def test_identity_favoring_cost():
    a = hungarian_match(1.0 - np.eye(4))
    assert a.pairs == [(i, i) for i in range(4)] and a.cost == 0.0


def test_two_by_two_hand_case():
    a = hungarian_match([[1.0, 2.0], [2.0, 1.0]])
    assert a.as_dict() == {0: 0, 1: 1} and a.cost == 2.0


def test_more_rows_than_columns():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((3, 2)))


def test_non_finite_cost():
    with pytest.raises(ValueError):
        hungarian_match([[np.inf, 1.0]])


def test_empty_cost():
    assert hungarian_match(np.zeros((0, 3))).pairs == []


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        N = int(rng.integers(1, 7))
        G = int(rng.integers(1, N + 1))
        cost = rng.random((G, N))
        a = hungarian_match(cost)
        assert len({k for _, k in a.pairs}) == G and sorted(g for g, _ in a.pairs) == list(range(G))
        assert a.cost == pytest.approx(brute_force(cost), abs=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-50, 50)))
def test_matches_scipy_and_beats_identity(cost):
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    a = hungarian_match(cost)
    r, c = linear_sum_assignment(cost)
    assert a.cost == pytest.approx(cost[r, c].sum(), abs=1e-9)
    assert a.cost <= sum(cost[i, i] for i in range(cost.shape[0])) + 1e-9


# -- loss ------------------------------------------------------------------------


def disk(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


def test_exact_proposals_give_near_zero_loss():
    gts = np.stack([disk(16, 4, 4, 3), disk(16, 11, 11, 3)])
    logits = np.full((3, 16, 16), -30.0)
    logits[2] = np.where(gts[0] > 0, 30.0, -30.0)
    logits[0] = np.where(gts[1] > 0, 30.0, -30.0)
    loss, a = proposal_loss(Tensor(logits), gts)
    assert a.as_dict() == {0: 2, 1: 0}
    assert loss.item() < 1e-6


def test_all_zero_logits_closed_form():
    gt = disk(16, 8, 8, 4)[None]
    loss, _ = proposal_loss(Tensor(np.zeros((2, 16, 16))), gt)
    area, P = gt.sum(), gt.size
    dice = 1.0 - (2.0 * 0.5 * area + 1.0) / (area + 0.5 * P + 1.0)
    assert loss.item() == pytest.approx(math.log(2.0) + dice, rel=1e-12)


def test_weights_scale_terms():
    gt = disk(16, 8, 8, 4)[None]
    logits = Tensor(np.random.default_rng(1).normal(size=(2, 16, 16)))
    a = proposal_loss(logits, gt)[1]
    bce = proposal_loss(logits, gt, 1.0, 0.0, a)[0].item()
    dice = proposal_loss(logits, gt, 0.0, 1.0, a)[0].item()
    assert proposal_loss(logits, gt, 2.0, 3.0, a)[0].item() == pytest.approx(2 * bce + 3 * dice, rel=1e-12)


def test_matching_cost_agrees_with_loss_terms():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 8, 8))
    gts = (rng.random((2, 8, 8)) > 0.5).astype(np.float64)
    cost = matching_cost(logits.reshape(3, -1), gts.reshape(2, -1))
    for g in range(2):
        for k in range(3):
            single = proposal_loss(Tensor(logits[k : k + 1]), gts[g : g + 1])[0].item()
            assert cost[g, k] == pytest.approx(single, rel=1e-10)


def test_empty_ground_truth_gives_zero():
    loss, a = proposal_loss(Tensor(np.zeros((2, 8, 8))), np.zeros((0, 8, 8)))
    assert loss.item() == 0.0 and a.pairs == []


def test_too_many_segments():
    with pytest.raises(ValueError):
        proposal_loss(Tensor(np.zeros((1, 8, 8))), np.zeros((2, 8, 8)))


def test_unmatched_proposals_get_no_gradient():
    gts = disk(16, 8, 8, 5)[None]
    logits = Tensor(np.random.default_rng(3).normal(size=(4, 16, 16)), requires_grad=True)
    loss, a = proposal_loss(logits, gts)
    loss.backward()
    (k,) = [k for _, k in a.pairs]
    for j in range(4):
        assert np.any(logits.grad[j]) == (j == k)


@given(st.integers(0, 2**31 - 1))
def test_loss_is_invariant_to_segment_order(seed):
    rng = np.random.default_rng(seed)
    gts = (rng.random((3, 8, 8)) > 0.6).astype(np.float64)
    logits = Tensor(rng.normal(size=(5, 8, 8)) * 3.0)
    perm = rng.permutation(3)
    a = proposal_loss(logits, gts)[0].item()
    b = proposal_loss(logits, gts[perm])[0].item()
    assert a == pytest.approx(b, rel=1e-12)


# -- head ----------------------------------------------------------------------


def small_head(n=16):
    rng = np.random.default_rng(0)
    bb = VisionBackbone(rng, (8, 8, 16, 16))
    return bb, ProposalHead(rng, bb.widths, num_queries=n, mask_dim=8, heads=2)


def test_proposal_shapes():
    bb, head = small_head()
    img = np.random.default_rng(1).random((3, 64, 64), dtype=np.float32)
    props = head(bb(img))
    assert props.logits.shape == (1, 16, 64, 64) and props.count == 16
    assert props.probabilities().min() >= 0.0 and props.probabilities().max() <= 1.0


def test_identical_images_identical_proposals():
    bb, head = small_head(4)
    img = np.random.default_rng(1).random((3, 64, 64), dtype=np.float32)
    pair = head(bb(np.stack([img, img]))).logits.data
    assert np.array_equal(pair[0], pair[1])
    assert np.array_equal(pair[0], head(bb(img)).logits.data[0])


def test_head_never_reaches_backbone():
    bb, head = small_head(4)
    img = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
    props = head(bb(img))
    loss, _ = proposal_loss(props.logits[0], disk(32, 16, 16, 6)[None])
    loss.backward()
    assert all(p.grad is None for p in bb.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in head.parameters())


def test_backbone_needs_multiple_of_32():
    bb, _ = small_head()
    with pytest.raises(ValueError):
        bb(np.zeros((3, 48, 48), np.float32))
