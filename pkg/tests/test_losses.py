import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from plab.ctc import ctc_loss, log_softmax, softmax
from plab.losses import (
    blank_prior_reg,
    blended_loss,
    entropy_reg,
    frame_prior_reg,
    logits_averaging,
    pl_filter,
    sequence_prior_reg,
    smooth_distribution,
    soft_ce_loss,
    soft_l2_loss,
)


def fd_worst(loss_fn, n=100, seed=0, shape=None):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        T, V = shape or (int(rng.integers(1, 6)), int(rng.integers(2, 6)))
        z = rng.normal(size=(T, V)) * 1.5
        zt = rng.normal(size=(T, V)) * 1.5
        _, g = loss_fn(z, zt, rng)
        fd = central_diff(lambda: loss_fn(z, zt, None)[0], z)
        worst = max(worst, max_rel_err(g, fd, floor=1e-4))
    return worst


# soft CE


def test_ce_matched_distributions():
    z = np.random.default_rng(0).normal(size=(4, 5))
    loss, g = soft_ce_loss(z, z.copy(), 1.0, 2.0)
    assert np.max(np.abs(g)) < 1e-15
    p = softmax(z)
    assert loss == pytest.approx(2.0 * float(-(p * np.log(p)).sum()), rel=1e-12)


def test_ce_one_hot_teacher_is_nll():
    z = np.random.default_rng(1).normal(size=(3, 4))
    hot = np.array([2, 0, 3])
    teacher = np.full((3, 4), -1e3)
    teacher[np.arange(3), hot] = 1e3
    loss, _ = soft_ce_loss(z, teacher, 1.0, 1.0)
    assert loss == pytest.approx(-float(log_softmax(z)[np.arange(3), hot].sum()), rel=1e-12)


@pytest.mark.parametrize("tau", [0.5, 1.0, 10.0])
def test_ce_gradient_fd(tau):
    assert fd_worst(lambda z, zt, r: soft_ce_loss(z, zt, tau, 0.7)) < 1e-4


def test_ce_gradient_fd_3x4():
    assert fd_worst(lambda z, zt, r: soft_ce_loss(z, zt, 1.0, 1.0), shape=(3, 4)) < 1e-4


@pytest.mark.parametrize("kw", [dict(direction="literal"), dict(smooth_predictions=0.05),
                                dict(smooth_targets=0.1, smooth_predictions=0.05, direction="literal")])
def test_ce_variants_gradient_fd(kw):
    assert fd_worst(lambda z, zt, r: soft_ce_loss(z, zt, 2.0, 1.3, **kw)) < 1e-4


def test_ce_stationary_iff_match():
    rng = np.random.default_rng(2)
    zt = rng.normal(size=(3, 4))
    # shifting each row by a constant leaves the tempered softmax unchanged
    z = zt + rng.normal(size=(3, 1))
    assert np.max(np.abs(soft_ce_loss(z, zt, 3.0, 1.0)[1])) < 1e-14
    z2 = zt.copy()
    z2[0, 0] += 0.5
    assert np.max(np.abs(soft_ce_loss(z2, zt, 3.0, 1.0)[1])) > 1e-3


def test_ce_errors():
    with pytest.raises(ValueError):
        soft_ce_loss(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        soft_ce_loss(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        soft_ce_loss(np.zeros((1, 2)), np.zeros((1, 2)), tau=0.0)


# L2


def test_l2_hand_values():
    loss, g = soft_l2_loss(np.array([[1.0]]), np.array([[0.0]]), 1.0)
    assert loss == 1.0 and g[0, 0] == 2.0
    z = np.random.default_rng(0).normal(size=(3, 3))
    loss, g = soft_l2_loss(z, z, 3.0)
    assert loss == 0.0 and np.all(g == 0)


def test_l2_gradient_fd():
    assert fd_worst(lambda z, zt, r: soft_l2_loss(z, zt, 0.3)) < 1e-4


# blended


def _hard_target(T, V, rng):
    y = rng.integers(1, V, size=max(1, T // 2))
    y = [t for i, t in enumerate(y) if i == 0 or t != y[i - 1]]
    return np.asarray(y)


def test_blend_endpoints_and_affine():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 4))
    zt = rng.normal(size=(6, 4))
    y = [1, 3]
    l_ctc, g_ctc = ctc_loss(log_softmax(z), y)
    l_ce, g_ce = soft_ce_loss(z, zt, 10.0, 1.0)
    l1, g1 = blended_loss(1.0, y, zt, z, tau=10.0)
    assert l1 == l_ctc and np.array_equal(g1, g_ctc)
    l0, g0 = blended_loss(0.0, y, zt, z, tau=10.0)
    assert l0 == l_ce and np.array_equal(g0, g_ce)
    lb, gb = blended_loss(0.1, y, zt, z, tau=10.0)
    assert abs(lb - (0.1 * l_ctc + 0.9 * l_ce)) < 1e-12
    assert np.max(np.abs(gb - (0.1 * g_ctc + 0.9 * g_ce))) < 1e-12


def test_blend_gradient_fd():
    def fn(z, zt, r):
        return blended_loss(0.3, [1], zt, z, tau=2.0, beta=0.5)

    assert fd_worst(fn, shape=(4, 3)) < 1e-4


# regularizers


def test_entropy_uniform_and_zero_weight():
    z = np.zeros((3, 5))
    loss, g = entropy_reg(z, 1.0)
    assert loss == pytest.approx(-3 * np.log(5))
    assert np.max(np.abs(g)) < 1e-15
    assert entropy_reg(np.random.default_rng(0).normal(size=(2, 3)), 0.0)[0] == 0.0


def test_entropy_gradient_pushes_toward_uniform():
    z = np.array([[4.0, 0.0, 0.0]])
    loss, g = entropy_reg(z, 1.0)
    # descending lowers the dominant logit
    assert g[0, 0] > 0 and g[0, 1] < 0
    fd = central_diff(lambda: entropy_reg(z, 1.0)[0], z)
    assert max_rel_err(g, fd) < 1e-4


def test_entropy_gradient_fd():
    assert fd_worst(lambda z, zt, r: entropy_reg(z, 0.8)) < 1e-4


def test_sequence_prior_fixed_points():
    z = np.zeros((4, 5))
    assert sequence_prior_reg(z, np.full(5, 0.2), 1.0)[0] == pytest.approx(0.0, abs=1e-15)
    zr = np.random.default_rng(0).normal(size=(4, 5))
    m = softmax(zr).mean(axis=0)
    assert sequence_prior_reg(zr, m, 2.0)[0] == pytest.approx(0.0, abs=1e-12)


def test_sequence_prior_gradient_fd():
    def fn(z, zt, r):
        prior = softmax(zt[0:1])[0]
        return sequence_prior_reg(z, prior, 0.7)

    assert fd_worst(fn) < 1e-4


def test_sequence_prior_zero_prior_entry_is_finite():
    prior = np.array([0.5, 0.5, 0.0])
    loss, g = sequence_prior_reg(np.zeros((2, 3)), prior, 1.0)
    assert np.isfinite(loss) and np.all(np.isfinite(g))
    with pytest.raises(ValueError):
        sequence_prior_reg(np.zeros((2, 3)), np.array([0.5, 0.2, 0.2]), 1.0)


def test_blank_prior_gradient_fd_and_fixed_point():
    assert fd_worst(lambda z, zt, r: blank_prior_reg(z, 0.6, 1.5)) < 1e-4
    z = np.log(np.array([[0.6, 0.3, 0.1]]))
    loss, g = frame_prior_reg(z, blank_target=0.6, weight=1.0)
    assert loss == pytest.approx(0.0, abs=1e-15) and np.max(np.abs(g)) < 1e-15


def test_label_smoothing_values():
    p = np.array([[0.0, 1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(smooth_distribution(p, 0.0), p)
    np.testing.assert_allclose(smooth_distribution(p, 1.0), 0.25)
    np.testing.assert_allclose(smooth_distribution(p, 0.05), [[0.0125, 0.9625, 0.0125, 0.0125]], atol=1e-15)
    z = np.array([[-1e3, 1e3, -1e3, -1e3]])
    np.testing.assert_allclose(frame_prior_reg(z, gamma=0.05), [[0.0125, 0.9625, 0.0125, 0.0125]], atol=1e-15)


def test_logits_averaging():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(logits_averaging(x, 1), x)
    c = np.full((6, 4), 2.5)
    for w in range(1, 11):
        np.testing.assert_allclose(logits_averaging(c, w), c)
    r = rng.normal(size=(3, 2))
    out = logits_averaging(r, 3)
    np.testing.assert_allclose(out[1], r.mean(axis=0))
    np.testing.assert_allclose(out[0], r[:2].mean(axis=0))
    np.testing.assert_allclose(out[2], r[1:].mean(axis=0))


def test_pl_filter():
    cat, cut = [3, 2, 4], [3, 5, 4]
    assert pl_filter(cat, cat, 0.05)
    assert not pl_filter([2, 2], [3, 3], 0.99)
    assert pl_filter([2, 2], [3, 3], 1.0)
    assert not pl_filter(cat, cut, 0.15)
    assert pl_filter(cat, cut, 0.5)
    assert pl_filter(None, cut, 0.05)
    with pytest.raises(ValueError):
        pl_filter(cat, cut, 0.0)
