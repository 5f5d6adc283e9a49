import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdadapt import diffcore as dc
from sdadapt.ctc import (InfeasibleTargetError, brute_force_ctc, collapse, ctc_loss, ctc_loss_batch,
                         greedy_decode, greedy_decode_batch, min_frames)


def random_log_probs(rng, T, V):
    return dc.log_softmax(rng.standard_normal((T, V)) * 2.0).data


def random_instance(rng):
    T = int(rng.integers(1, 7))
    V = int(rng.integers(2, 4))
    n = int(rng.integers(0, 3))
    target = [int(k) for k in rng.integers(1, V, size=n)]
    return T, V, target


def test_single_frame_uniform():
    lp = np.log(np.full((1, 2), 0.5))
    assert abs(ctc_loss(lp, [1]).item() - math.log(2)) < 1e-12


def test_empty_target_is_all_blank():
    rng = np.random.default_rng(0)
    lp = random_log_probs(rng, 5, 4)
    assert abs(ctc_loss(lp, []).item() + lp[:, 0].sum()) < 1e-12


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 200:
        T, V, target = random_instance(rng)
        if min_frames(target) > T:
            continue
        lp = random_log_probs(rng, T, V)
        oracle = -math.log(brute_force_ctc(np.exp(lp), target))
        assert abs(ctc_loss(lp, target).item() - oracle) < 1e-10
        checked += 1


def test_completeness_partition():
    rng = np.random.default_rng(2)
    probs = np.exp(random_log_probs(rng, 2, 2))
    total = sum(brute_force_ctc(probs, list(t)) for n in range(3) for t in itertools.product([1], repeat=n))
    assert abs(total - 1.0) < 1e-9


def test_completeness_larger_alphabet():
    rng = np.random.default_rng(3)
    probs = np.exp(random_log_probs(rng, 3, 3))
    total = sum(brute_force_ctc(probs, list(t)) for n in range(4) for t in itertools.product([1, 2], repeat=n))
    assert abs(total - 1.0) < 1e-9


def test_brute_force_limit():
    with pytest.raises(dc.UsageError):
        brute_force_ctc(np.full((20, 3), 1 / 3), [1])


def test_brute_force_deterministic():
    probs = np.exp(random_log_probs(np.random.default_rng(4), 4, 3))
    assert brute_force_ctc(probs, [1, 2]) == brute_force_ctc(probs, [1, 2])


def test_infeasible_target():
    lp = random_log_probs(np.random.default_rng(5), 2, 3)
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 1])
    assert min_frames([1, 1]) == 3
    assert min_frames([1, 2, 2, 2]) == 6


def test_rejects_blank_or_out_of_range_target():
    lp = random_log_probs(np.random.default_rng(6), 4, 3)
    with pytest.raises(ValueError):
        ctc_loss(lp, [0])
    with pytest.raises(ValueError):
        ctc_loss(lp, [3])


def test_batch_matches_single():
    rng = np.random.default_rng(7)
    lp = np.stack([random_log_probs(rng, 6, 4) for _ in range(3)])
    targets = [[1, 2], [], [3, 3]]
    batch = ctc_loss_batch(lp, targets).data
    single = [ctc_loss(lp[i], t).item() for i, t in enumerate(targets)]
    np.testing.assert_allclose(batch, single, atol=1e-12)


@pytest.mark.parametrize("target", [[], [1], [2, 2], [1, 2, 1]])
def test_gradient_finite_differences(target):
    rng = np.random.default_rng(8)
    logits = dc.DiffArray(rng.standard_normal((7, 3)), requires_grad=True)
    err = dc.grad_check(lambda: ctc_loss(dc.log_softmax(logits), target), [logits])
    assert err < 1e-4


def test_batch_gradient_finite_differences():
    rng = np.random.default_rng(9)
    logits = dc.DiffArray(rng.standard_normal((2, 6, 4)), requires_grad=True)
    err = dc.grad_check(lambda: dc.mean_all(ctc_loss_batch(dc.log_softmax(logits), [[1, 3], [2]])), [logits])
    assert err < 1e-4


def test_small_step_does_not_increase_loss():
    rng = np.random.default_rng(10)
    logits = dc.DiffArray(rng.standard_normal((8, 4)), requires_grad=True)
    before = ctc_loss(dc.log_softmax(logits), [1, 2, 3])
    dc.backward(before)
    logits.data = logits.data - 1e-3 * logits.grad
    assert ctc_loss(dc.log_softmax(logits), [1, 2, 3]).item() <= before.item()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 5), st.integers(0, 2 ** 31))
def test_likelihood_in_unit_interval(T, V, seed):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, T, V)
    target = [int(k) for k in rng.integers(1, V, size=int(rng.integers(0, T + 1)))]
    if min_frames(target) > T:
        return
    p = math.exp(-ctc_loss(lp, target).item())
    assert 0.0 < p <= 1.0 + 1e-12


def test_extreme_log_probs_stay_finite():
    lp = np.full((5, 3), -1e3)
    lp[:, 0] = 0.0
    assert np.isfinite(ctc_loss(lp, [1, 2]).item())


@pytest.mark.parametrize("argmaxes,expect", [([1, 1, 0, 2], [1, 2]), ([0, 0, 0], []), ([1, 0, 1], [1, 1])])
def test_greedy_collapse(argmaxes, expect):
    lp = np.full((len(argmaxes), 3), -5.0)
    lp[np.arange(len(argmaxes)), argmaxes] = 0.0
    assert greedy_decode(lp) == expect
    assert collapse(argmaxes) == expect


def test_greedy_ties_lowest_index():
    assert greedy_decode(np.zeros((3, 4))) == []
    lp = np.array([[-1.0, 0.0, 0.0]])
    assert greedy_decode(lp) == [1]


def test_greedy_batch():
    lp = np.full((2, 3, 3), -5.0)
    lp[0, :, 1] = 0
    lp[1, :, 0] = 0
    assert greedy_decode_batch(lp) == [[1], []]
