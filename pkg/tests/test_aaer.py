import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssatlab import aaer as reg
from ssatlab import autodiff as ad
from ssatlab.errors import ConfigurationError, UsageError

LEVELS = (0.0, 0.5, 1.0, 2.0)


def enumerated_batches():
    """Every 3-sample (before, after) loss pair over a small grid, ties included."""
    for values in itertools.product(LEVELS, repeat=6):
        yield np.array(values[:3]), np.array(values[3:])


def _logits(rng, m=3):
    before = rng.normal(size=(m, 4))
    return before, before + rng.normal(size=(m, 4)) * rng.uniform(0, 2, (m, 1))


def test_partition_is_strict():
    part = reg.partition([1.0, 1.0, 2.0], [1.0, 0.5, 3.0])
    assert part.aae_mask.tolist() == [False, True, False]
    assert (part.n, part.m) == (1, 3)
    assert part.nae_mask.tolist() == [True, False, True]


def test_partition_length_mismatch():
    with pytest.raises(UsageError):
        reg.partition([1.0, 2.0], [1.0])


def test_frozen_worked_example():
    # n = 2 of m = 3; AAE_CE = (1 + 0.25) / 2; AAE_L2 = (1 + 9) / 2, NAE_L2 = 4
    before = np.array([2.0, 1.0, 0.5])
    after = np.array([1.0, 1.5, 0.25])
    zb = np.zeros((3, 2))
    za = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 3.0]])
    cfg = reg.AAERConfig(1.0, 2.0, 3.0)
    part = reg.partition(before, after)
    assert reg.aae_ce(before, after, part).item() == 0.625
    a, b = reg.logit_variation(zb, za, part)
    assert (a.item(), b.item()) == (5.0, 4.0)
    value, _ = reg.aaer_loss(cfg, before, after, zb, za)
    assert value.item() == pytest.approx(17 / 6, abs=1e-15)


def test_enumerated_identities():
    rng = np.random.default_rng(0)
    cfg = reg.AAERConfig(1.0, 1.3, 0.7)
    count = 0
    for before, after in enumerated_batches():
        part = reg.partition(before, after)
        assert part.n == int((before > after).sum())
        ce = reg.aae_ce(before, after, part).item()
        assert (ce > 0) == (part.n > 0)
        zb, za = _logits(rng)
        a, b = reg.logit_variation(zb, za, part)
        cv = reg.constrained_variation(a, b).item()
        assert cv >= 0
        value, _ = reg.aaer_loss(cfg, before, after, zb, za, part)
        if part.n == 0:
            assert value.item() == 0.0
        else:
            assert value.item() >= 0
        stats = reg.variation_stats(before, after, zb, za, part)
        m, n = part.m, part.n
        assert stats.dce_all == pytest.approx((n * stats.dce_aae + (m - n) * stats.dce_nae) / m, abs=1e-12)
        assert stats.l2_all == pytest.approx((n * stats.l2_aae + (m - n) * stats.l2_nae) / m, abs=1e-12)
        count += 1
    assert count == len(LEVELS) ** 6


def test_empty_groups_give_zero():
    part = reg.partition([1.0, 1.0], [2.0, 2.0])
    assert reg.aae_ce([1.0, 1.0], [2.0, 2.0], part).item() == 0.0
    a, b = reg.logit_variation(np.zeros((2, 2)), np.ones((2, 2)), part)
    assert a.item() == 0.0 and b.item() == 2.0
    every = reg.partition([2.0, 2.0], [1.0, 1.0])
    a, b = reg.logit_variation(np.zeros((2, 2)), np.ones((2, 2)), every)
    assert a.item() == 2.0 and b.item() == 0.0


def test_count_weight_carries_no_gradient():
    zb = ad.Tensor(np.zeros((4, 2)), requires_grad=True)
    za = ad.Tensor(np.array([[1.0, 0], [0, 1.0], [2.0, 0], [0, 0.5]]), requires_grad=True)
    lb = ad.Tensor([1.0, 1.0, 1.0, 1.0], requires_grad=True)
    la = ad.Tensor([0.5, 2.0, 0.25, 3.0], requires_grad=True)
    cfg = reg.AAERConfig(2.0, 1.0, 0.0)
    value, part = reg.aaer_loss(cfg, lb, la, zb, za)
    gb, ga = value.backward(wrt=[lb, la])
    # d/d lb_i of 2 * (n/m) * mean_aae(lb - la) = 2 * (2/4) / 2 on AAEs
    np.testing.assert_allclose(gb, [0.5, 0.0, 0.5, 0.0])
    np.testing.assert_allclose(ga, [-0.5, 0.0, -0.5, 0.0])


def test_detached_nae_reference_blocks_gradient():
    zb = np.zeros((2, 2))
    za = ad.Tensor(np.array([[3.0, 0.0], [1.0, 0.0]]), requires_grad=True)
    part = reg.partition([1.0, 1.0], [0.0, 2.0])  # sample 0 abnormal
    for detach, expect_nae in ((False, -2.0), (True, 0.0)):
        a, b = reg.logit_variation(zb, za, part, detach_nae_reference=detach)
        (g,) = reg.constrained_variation(a, b).backward(wrt=[za])
        np.testing.assert_allclose(g[0], [6.0, 0.0])
        np.testing.assert_allclose(g[1], [expect_nae, 0.0])


def test_hinge_is_flat_when_aae_shift_is_smaller():
    zb = np.zeros((2, 2))
    za = ad.Tensor(np.array([[0.1, 0.0], [1.0, 0.0]]), requires_grad=True)
    part = reg.partition([1.0, 1.0], [0.0, 2.0])
    a, b = reg.logit_variation(zb, za, part)
    cv = reg.constrained_variation(a, b)
    assert cv.item() == 0.0
    (g,) = cv.backward(wrt=[za])
    assert not g.any()


def test_ablation_switches():
    before, after = np.array([2.0, 1.0]), np.array([1.0, 3.0])
    zb, za = np.zeros((2, 2)), np.array([[2.0, 0.0], [1.0, 0.0]])
    full, _ = reg.aaer_loss(reg.AAERConfig(1.0, 1.0, 1.0), before, after, zb, za)
    # n/m = 1/2, AAE_CE = 1, AAE_L2 = 4, NAE_L2 = 1, CV = 3
    assert full.item() == 2.0
    only_ce, _ = reg.aaer_loss(reg.AAERConfig(part_iii=False), before, after, zb, za)
    assert only_ce.item() == 0.5
    only_cv, _ = reg.aaer_loss(reg.AAERConfig(part_ii=False), before, after, zb, za)
    assert only_cv.item() == 1.5
    unweighted, _ = reg.aaer_loss(reg.AAERConfig(part_i=False), before, after, zb, za)
    assert unweighted.item() == 4.0
    nothing, _ = reg.aaer_loss(reg.AAERConfig(part_ii=False, part_iii=False), before, after, zb, za)
    assert nothing.item() == 0.0


def test_config_rejects_negative_weights():
    for name in ("lambda1", "lambda2", "lambda3", "warmup_epochs"):
        with pytest.raises(ConfigurationError):
            reg.AAERConfig(**{name: -1.0})


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(0, 5)), arrays(np.float64, 8, elements=st.floats(0, 5)),
       st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_regularizer_nonnegative_and_scales_with_lambda1(before, after, l1, l2, l3):
    rng = np.random.default_rng(0)
    zb, za = _logits(rng, 8)
    value, part = reg.aaer_loss(reg.AAERConfig(l1, l2, l3), before, after, zb, za)
    assert value.item() >= 0
    doubled, _ = reg.aaer_loss(reg.AAERConfig(2 * l1, l2, l3), before, after, zb, za)
    assert doubled.item() == pytest.approx(2 * value.item(), rel=1e-12, abs=1e-300)
    assert (value.item() == 0) or part.n > 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0, 5)), arrays(np.float64, 6, elements=st.floats(0, 5)))
def test_variation_stats_sign_convention(before, after):
    part = reg.partition(before, after)
    z = np.zeros((6, 2))
    stats = reg.variation_stats(before, after, z, z, part)
    if part.n:
        assert stats.dce_aae < 0
    if part.m - part.n:
        assert stats.dce_nae >= 0
