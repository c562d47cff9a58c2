import math

import numpy as np
import pytest

from dvk_forge import layers as L
from dvk_forge.errors import DegenerateInputError, NumericalError
from dvk_forge.optim import (SGD, Adam, Momentum, Nadam, Nesterov, RegSpec, apply_regularization, make_optimizer,
                             regularization_penalty, regularize_grad, sgd_step)


def grad_sq(theta):
    return 2.0 * theta


def run(opt, theta, steps, grad=grad_sq, key="theta"):
    path = [theta]
    for _ in range(steps):
        opt.begin_step()
        theta = opt.update(key, theta, grad(theta))
        path.append(theta)
    return path


# Independent transcriptions, written statement by statement from the algorithm boxes.


def adam_reference(theta, steps, alpha=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    out = [theta]
    while t < steps:
        t = t + 1
        g = 2.0 * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - alpha * m_hat / (np.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def nadam_reference(theta, steps, alpha=0.001, mu=0.9, nu=0.999, eps=1e-8):
    mus = [None] + [mu] * (steps + 2)  # 1-based schedule
    m = np.zeros_like(theta)
    n = np.zeros_like(theta)
    prod = 1.0
    out = [theta]
    for t in range(1, steps + 1):
        g = 2.0 * theta
        prod = prod * mus[t]
        prod_next = prod * mus[t + 1]
        m = mus[t] * m + (1 - mus[t]) * g
        n = nu * n + (g * g) * (1 - nu)
        m_hat = mus[t + 1] * m / (1 - prod_next) + (1 - mus[t]) * g / (1 - prod)
        n_hat = nu * n / (1 - nu ** t)
        theta = theta - alpha * m_hat / (np.sqrt(n_hat) + eps)
        out.append(theta)
    return out


# -- SGD / momentum ---------------------------------------------------------------


def test_sgd_examples():
    assert sgd_step(1.0, 2.0, 0.1) == pytest.approx(0.8, abs=1e-16)
    assert sgd_step(1.0, 0.0, 0.1) == 1.0
    theta = np.array(1.0)
    for _ in range(200):
        theta = sgd_step(theta, grad_sq(theta), 0.1)
    assert abs(theta) < 1e-9
    assert abs(theta - 0.8 ** 200) <= 1e-12 * 0.8 ** 200 * 200


def test_sgd_rejects_bad_input():
    with pytest.raises(ValueError):
        sgd_step(1.0, 1.0, 0.0)
    with pytest.raises(NumericalError):
        sgd_step(1.0, math.nan, 0.1)


def test_momentum_recurrence():
    opt = Momentum(0.1, mu=0.9)
    opt.begin_step()
    th = opt.update("k", np.array(0.0), np.array(1.0))
    assert opt.state["k"]["m"] == 1.0 and th == pytest.approx(-0.1, abs=1e-16)
    opt.begin_step()
    th2 = opt.update("k", th, np.array(1.0))
    assert opt.state["k"]["m"] == pytest.approx(1.9, abs=1e-15)
    assert th2 - th == pytest.approx(-0.19, abs=1e-15)
    for _ in range(198):
        opt.begin_step()
        opt.update("k", th2, np.array(1.0))
    assert abs(opt.state["k"]["m"] - 10.0) < 1e-6


def test_mu_zero_equals_sgd_bitwise():
    x0 = np.array([5.0, -3.0, 0.25])
    ref = run(SGD(0.05), x0, 50)
    for opt in (Momentum(0.05, mu=0.0), Nesterov(0.05, mu=0.0)):
        got = run(opt, x0, 50)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(ref, got))


# -- Nesterov ---------------------------------------------------------------------


def test_nesterov_trivial_cases():
    opt = Nesterov(0.1, mu=0.9)
    opt.begin_step()
    assert opt.update("k", np.array(2.0), np.array(0.0)) == 2.0


def lookahead_nesterov(theta, steps, lr, mu, hess):
    """Textbook look-ahead form: gradient at theta + mu v, v <- mu v - lr g, theta <- theta + v."""
    v = np.zeros_like(theta)
    out = [theta]
    for _ in range(steps):
        g = hess @ (theta + mu * v)
        v = mu * v - lr * g
        theta = theta + v
        out.append(theta)
    return out


def test_nesterov_matches_lookahead_form():
    # The single-evaluation form tracks the look-ahead point phi = theta + mu v.
    hess = np.array([[3.0, 0.5], [0.5, 1.0]])
    x0 = np.array([2.0, -1.0])
    lr, mu, steps = 0.05, 0.9, 100
    ref = lookahead_nesterov(x0, steps, lr, mu, hess)
    opt = Nesterov(lr, mu=mu)
    phi = x0.copy()
    ok = True
    for t in range(steps):
        opt.begin_step()
        phi = opt.update("k", phi, hess @ phi)
        theta_next = ref[t + 1]
        v_next = ref[t + 1] - ref[t]
        ok &= np.allclose(phi, theta_next + mu * v_next, rtol=0, atol=1e-10)
    assert ok


# -- Adam ------------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    opt = Adam(0.001)
    opt.begin_step()
    th = opt.update("k", np.array(0.0), np.array(1.0))
    assert th == -0.001 / (1 + 1e-8)
    rng = np.random.default_rng(0)
    g = rng.normal(size=50) * 10 ** rng.uniform(-3, 3, size=50)
    opt = Adam(0.001)
    opt.begin_step()
    step = opt.update("k", np.zeros(50), g)
    # at t=1 the bias corrections give m_hat = g and sqrt(v_hat) = |g|
    np.testing.assert_allclose(step, -0.001 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)
    assert np.all(np.abs(step) <= 0.001)


def test_adam_zero_grad_keeps_theta():
    opt = Adam()
    opt.begin_step()
    assert opt.update("k", np.array(3.0), np.array(0.0)) == 3.0


def test_adam_scale_invariance_at_t1():
    g = np.random.default_rng(1).normal(size=20)
    base = Adam()
    base.begin_step()
    ref = base.update("k", np.zeros(20), g)
    for c in (0.01, 100.0):
        opt = Adam()
        opt.begin_step()
        np.testing.assert_allclose(opt.update("k", np.zeros(20), c * g), ref, rtol=0, atol=1e-6)


def test_adam_matches_reference_bitwise():
    x0 = np.array([5.0, -2.5, 0.75])
    got = run(Adam(0.001), x0, 100)
    ref = adam_reference(x0, 100)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(got, ref))


# -- Nadam ---------------------------------------------------------------------------


def test_nadam_first_step_symbolic():
    # t=1, m0=n0=0, constant mu: m1=(1-mu)g, n1=(1-nu)g^2,
    # m_hat = mu(1-mu)g/(1-mu^2) + (1-mu)g/(1-mu) = g (mu/(1+mu) + 1), n_hat = nu g^2
    mu, nu, lr, eps = 0.9, 0.999, 0.001, 1e-8
    g = np.array([0.3, -2.0, 7.0])
    opt = Nadam(lr, mu, nu, eps)
    opt.begin_step()
    step = opt.update("k", np.zeros(3), g)
    m_hat = g * (mu / (1 + mu) + 1)
    expect = -lr * m_hat / (np.sqrt(nu) * np.abs(g) + eps)
    np.testing.assert_allclose(step, expect, rtol=1e-13)


def test_nadam_zero_grad_keeps_theta():
    opt = Nadam()
    opt.begin_step()
    assert opt.update("k", np.array(-1.5), np.array(0.0)) == -1.5


def test_nadam_matches_reference_bitwise_and_decreases():
    x0 = np.array([5.0, -1.0, 2.0])
    got = run(Nadam(0.001, 0.9, 0.999), x0, 100)
    ref = nadam_reference(x0, 100)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(got, ref))
    losses = [float(np.sum(t * t)) for t in got]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_nadam_mu_zero_is_rmsprop_like():
    rng = np.random.default_rng(2)
    nu, lr, eps = 0.999, 0.01, 1e-8
    opt = Nadam(lr, mu=0.0, nu=nu, eps=eps)
    theta = rng.normal(size=5)
    n = np.zeros(5)
    for t in range(1, 30):
        g = rng.normal(size=5)
        opt.begin_step()
        new = opt.update("k", theta, g)
        n = nu * n + (1 - nu) * g * g
        expect = theta - lr * g / (np.sqrt(nu * n / (1 - nu ** t)) + eps)
        np.testing.assert_allclose(new, expect, rtol=1e-14)
        theta = new


def test_nadam_product_incremental_and_bad_schedule():
    opt = Nadam(0.001, mu=0.9)
    for _ in range(7):
        opt.begin_step()
    assert opt.mu_prod == pytest.approx(0.9 ** 7, rel=1e-15)
    bad = Nadam(0.001, mu_schedule=lambda t: 1.0)
    with pytest.raises(DegenerateInputError):
        bad.begin_step()


def test_warmup_schedule_runs():
    opt = make_optimizer("nadam", 0.001, mu_warmup=True)
    path = run(opt, np.array([1.0, -1.0]), 20)
    assert np.all(np.isfinite(path[-1]))


def test_all_optimizers_decrease_quadratic():
    # lr 0.001 everywhere; with mu 0.9 the heavy-ball recurrence on theta^2 is then
    # overdamped ((1 + mu - 2 lr)^2 > 4 mu), so every step lowers the loss
    x0 = np.full(3, 5.0)
    for opt in (SGD(0.001), Momentum(0.001), Nesterov(0.001), Adam(0.001), Nadam(0.001)):
        losses = [float(np.sum(t * t)) for t in run(opt, x0, 100)]
        assert all(b < a for a, b in zip(losses, losses[1:])), opt.name


def test_update_rejects_nan_gradient():
    for opt in (SGD(0.1), Momentum(0.1), Nesterov(0.1), Adam(), Nadam()):
        opt.begin_step()
        with pytest.raises(NumericalError):
            opt.update("k", np.zeros(2), np.array([0.0, math.inf]))


def test_make_optimizer_names():
    for name in ("sgd", "momentum", "nesterov", "adam", "nadam"):
        assert make_optimizer(name, 0.1).name == name
    with pytest.raises(ValueError):
        make_optimizer("adagrad", 0.1)


# -- regularisation --------------------------------------------------------------------


def test_regularize_grad_examples():
    assert regularize_grad(0.0, 3.0, RegSpec("l2", 0.001)) == pytest.approx(0.006, abs=1e-18)
    assert regularize_grad(0.0, -2.0, RegSpec("l1", 0.005)) == -0.005
    assert regularize_grad(0.0, 0.0, RegSpec("l1", 0.005)) == 0.0
    g = np.array([1.0, 2.0])
    assert regularize_grad(g, np.array([5.0, 6.0]), RegSpec("l2", 0.0)) is g
    with pytest.raises(DegenerateInputError):
        RegSpec("l2", -1.0)


def test_regularisation_skips_bias_and_bn():
    net = L.Network([L.Conv2D(2, (3, 3), reg=RegSpec("l2", 0.5)), L.BatchNorm()], (4, 4, 1))
    conv, bn = net.layers
    conv.params["bias"][:] = 3.0
    net.zero_grads()
    apply_regularization(net)
    np.testing.assert_array_equal(conv.grads["weights"], 2 * 0.5 * conv.params["weights"])
    assert not np.any(conv.grads["bias"])
    assert not np.any(bn.grads["gamma"]) and not np.any(bn.grads["beta"])
    assert regularization_penalty(net) == pytest.approx(0.5 * float(np.sum(conv.params["weights"] ** 2)))


def test_lr_zero_step_is_bitwise_noop():
    net = L.Network([L.Conv2D(2, (3, 3)), L.BatchNorm()], (4, 4, 1))
    before = [layer.params[p].tobytes() for _, layer, p in net.named_params()]
    y, trace = net.forward(np.random.default_rng(3).standard_normal((2, 4, 4, 1)))
    net.backward(trace, np.ones_like(y))
    for name in ("sgd", "momentum", "nesterov", "adam", "nadam"):
        make_optimizer(name, 0.0).step(net)
    assert before == [layer.params[p].tobytes() for _, layer, p in net.named_params()]
