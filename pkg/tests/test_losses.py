import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dvk_forge.errors import DegenerateInputError, ShapeError
from dvk_forge.gradcheck import numeric_grad, rel_error
from dvk_forge.losses import (TRAINING_LOSSES, clinical_loss, clinical_loss_inverse, entropy_like, iou_loss,
                              kl_divergence, log_loss, mae, metric, mse, soft_iou)

# integer-valued entries keep the sums exact, so J == 1 can be tested as an equivalence
nonneg = arrays(np.float64, st.integers(1, 30), elements=st.integers(0, 1000).map(float))


def test_mse_mae_examples():
    x = np.array([0.3, 0.7])
    assert mse(x, x).value == 0.0 and mae(x, x).value == 0.0
    assert mse([0.0, 0.0], [1.0, 3.0]).value == 5.0
    assert mae([0.0, 0.0], [1.0, 3.0]).value == 2.0
    with pytest.raises(ShapeError):
        mse([1.0], [1.0, 2.0])


def test_mse_mae_gradients_fd():
    rng = np.random.default_rng(0)
    p, t = rng.uniform(size=(3, 4)), rng.uniform(size=(3, 4))
    p[np.abs(p - t) < 0.01] += 0.05
    for fn in (mse, mae):
        num = numeric_grad(lambda: fn(p, t).value, p)
        assert rel_error(fn(p, t).grad, num) <= 1e-7


def test_mse_vs_mae_relationship():
    rng = np.random.default_rng(1)
    t = rng.uniform(size=100)
    small = t + rng.uniform(-1, 1, size=100)
    assert mse(small, t).value <= mae(small, t).value
    big = t + rng.choice([-1, 1], size=100) * rng.uniform(1, 3, size=100)
    assert mse(big, t).value >= mae(big, t).value


def test_kl_divergence():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p).value == 0.0
    q = np.array([0.4, 0.4, 0.2])
    expect = sum(a * np.log(a / b) for a, b in zip(p, q))
    assert kl_divergence(p, q).value == pytest.approx(expect, rel=1e-14)
    assert kl_divergence(p, q).value > 0
    with pytest.raises(DegenerateInputError):
        kl_divergence([0.0, 1.0], [0.5, 0.5])
    with pytest.raises(DegenerateInputError):
        kl_divergence([0.3, 0.3], [0.5, 0.5])


def test_log_loss_and_entropy_gradient_identity():
    assert entropy_like([0.5], [0.5]).grad[0] == 0.0
    rng = np.random.default_rng(2)
    x, y = rng.uniform(0.05, 0.95, 20), rng.uniform(0.05, 0.95, 20)
    for fn in (entropy_like, log_loss):
        r = fn(x, y)
        np.testing.assert_allclose(r.grad, (y - x) / (y * (1 - y)), rtol=1e-14)
        assert rel_error(r.grad, numeric_grad(lambda: fn(x, y).value, y)) <= 1e-7
    assert log_loss(x, x).value == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        entropy_like([0.5], [1.0])
    with pytest.raises(DegenerateInputError):
        log_loss([0.0], [0.5])


def test_soft_iou_examples():
    x = np.array([0.2, 0.8])
    assert soft_iou(x, x).value == 1.0
    assert soft_iou(x, [0.4, 0.4]).value == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(DegenerateInputError):
        soft_iou([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        soft_iou([-0.1, 1.0], [0.2, 0.3])


def test_soft_iou_gradient_fd_and_ties():
    rng = np.random.default_rng(3)
    t = rng.uniform(0.1, 0.9, size=(4, 5))
    p = t + rng.choice([-1, 1], size=t.shape) * rng.uniform(0.02, 0.08, size=t.shape)
    num = numeric_grad(lambda: iou_loss(p, t).value, p)
    assert rel_error(iou_loss(p, t).grad, num) <= 1e-6
    # ties average the one-sided derivatives
    p2, t2 = np.array([0.5, 0.2]), np.array([0.5, 0.6])
    s_min, s_max = 0.7, 1.1
    expect_tie = -0.5 * (1 / s_max - s_min / s_max ** 2)
    assert iou_loss(p2, t2).grad[0] == pytest.approx(expect_tie, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(nonneg, st.data())
def test_soft_iou_properties(x, data):
    y = data.draw(arrays(np.float64, x.shape, elements=st.integers(0, 1000).map(float)))
    if x.sum() == 0 and y.sum() == 0:
        return
    j = soft_iou(x, y).value
    assert j == soft_iou(y, x).value
    assert 0.0 <= j <= 1.0
    assert (j == 1.0) == bool(np.array_equal(x, y))


def test_clinical_examples():
    x = np.random.default_rng(4).uniform(0.1, 0.9, size=(9, 9, 9))
    assert clinical_loss(x, x).value == 0.0 and clinical_loss_inverse(x, x).value == 0.0
    with pytest.raises(DegenerateInputError):
        clinical_loss(np.zeros(3), np.ones(3))


def test_clinical_identity_1000_pairs():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        x, y = rng.uniform(0.1, 0.9, size=(9, 9, 9)), rng.uniform(0.1, 0.9, size=(9, 9, 9))
        lhs = clinical_loss(x, y).value + clinical_loss_inverse(x, y, 0.9).value
        rhs = 0.9 * float(np.sum((x - y) ** 2))
        worst = max(worst, abs(lhs - rhs) / rhs)
    assert worst <= 1e-12


def test_clinical_center_error_weighs_more():
    x = np.full((9, 9, 9), 0.1)
    x[4, 4, 4] = 0.9
    center = x.copy()
    center[4, 4, 4] -= 0.2
    corner = x.copy()
    corner[0, 0, 0] += 0.2
    assert clinical_loss(x, center).value > clinical_loss(x, corner).value
    # the reversed weighting favours the periphery instead
    assert clinical_loss_inverse(x, center).value < clinical_loss_inverse(x, corner).value


def test_training_loss_gradients_fd():
    rng = np.random.default_rng(6)
    for name, fn in TRAINING_LOSSES.items():
        t = rng.uniform(0.1, 0.9, size=(2, 3, 3))
        p = np.clip(t + rng.choice([-1, 1], size=t.shape) * rng.uniform(0.02, 0.08, size=t.shape), 0.01, 0.99)
        num = numeric_grad(lambda: fn(p, t).value, p)
        assert rel_error(fn(p, t).grad, num) <= 1e-6, name


def test_metric_lookup():
    x, y = np.array([0.2, 0.8]), np.array([0.4, 0.4])
    assert metric("iou", x, y) == 0.5
    assert metric("mse", x, y) == mse(x, y).value
    with pytest.raises(ValueError):
        metric("entropy", x, y)
