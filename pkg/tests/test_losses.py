import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _helpers import gradcheck, random_slots, tiny_action, tiny_cvr
from gdfm import losses
from gdfm.model import CvrModel, IdentityChannel


class FixedChannel:
    """q(a|y) table independent of x: table[a, y]."""

    def __init__(self, table):
        self.table = np.asarray(table, float)

    def predict_action(self, X, y, action_id):
        n = len(np.atleast_2d(X))
        return np.broadcast_to(self.table[:, y], (n, self.table.shape[0])).copy()


def const_cvr(q, n_fields=1):
    m = CvrModel(4, n_fields, embed_dim=1, hidden=1, dtype=np.float64)
    m.params["b2"][0] = math.log(q / (1 - q))
    return m


X1 = np.array([[0]])


def test_action_loss_values():
    phi = tiny_action(np.random.default_rng(0), scale=0.0)
    assert losses.loss_action(phi, X1.repeat(2, 1), 1, [0], 0).value == pytest.approx(math.log(2), abs=1e-15)
    phi.params["c0"][1] = [-60.0, 60.0]  # clamped logits, softmax still ~1
    assert losses.loss_action(phi, X1.repeat(2, 1), 1, [1], 0).value < 1e-20


def test_delayed_label_values():
    half = const_cvr(0.5)
    for y in (0, 1):
        assert losses.loss_delayed_label(half, X1, [y]).value == pytest.approx(math.log(2), abs=1e-15)
    assert losses.loss_delayed_label(const_cvr(0.75), X1, [1]).value == pytest.approx(math.log(4 / 3), abs=1e-15)


@given(st.floats(-20, 20), st.integers(0, 1))
def test_cross_entropy_logit_derivative(z, y):
    _, dz = losses.cross_entropy_terms(np.array([z]), np.array([y]))
    assert dz[0] == pytest.approx(1 / (1 + math.exp(-z)) - y, abs=1e-15)


def test_proxy_worked_example():
    phi = FixedChannel([[0.8, 0.2], [0.2, 0.8]])
    theta = const_cvr(0.5)
    out = losses.loss_proxy(theta, phi, X1, [1], 0)
    assert out.value == pytest.approx(math.log(2), abs=1e-15)
    # d/dq = (d/dz) / (q (1 - q)), read off the output-bias gradient
    assert out.grads["b2"][0] / 0.25 == pytest.approx(-1.2, abs=1e-12)


def test_proxy_with_identity_channel_is_cross_entropy():
    rng = np.random.default_rng(1)
    theta = tiny_cvr(rng)
    X = random_slots(rng, 50)
    a = rng.integers(0, 2, 50)
    p = losses.loss_proxy(theta, IdentityChannel(), X, a, 0)
    c = losses.loss_delayed_label(theta, X, a)
    assert p.value == pytest.approx(c.value, abs=1e-12)
    for k in c.grads:
        np.testing.assert_allclose(p.grads[k], c.grads[k], atol=1e-12)


def test_proxy_uninformative_channel_has_zero_gradient():
    rng = np.random.default_rng(2)
    theta = tiny_cvr(rng)
    out = losses.loss_proxy(theta, FixedChannel([[0.3, 0.3], [0.7, 0.7]]), random_slots(rng, 20),
                            rng.integers(0, 2, 20), 0)
    assert all(not g.any() for g in out.grads.values())


def test_proxy_underflow_counted():
    theta = const_cvr(0.5)
    out = losses.loss_proxy(theta, FixedChannel([[1.0, 1.0], [0.0, 0.0]]), X1, [1], 0)
    assert out.clamp_events == 1 and math.isfinite(out.value)


def test_reg_values():
    assert losses.loss_reg(const_cvr(0.3), const_cvr(0.3), X1).value == pytest.approx(0, abs=1e-15)
    v = losses.loss_reg(const_cvr(0.25), const_cvr(0.5), X1).value
    assert v == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert v == pytest.approx(0.1438, abs=1e-4)


def test_kl_non_negative():
    rng = np.random.default_rng(3)
    q_prev = rng.random(10_000)
    z = rng.normal(0, 5, 10_000)
    assert np.all(losses.kl_terms(z, q_prev)[0] >= 0)


def test_total_loss_examples():
    phi = FixedChannel([[0.8, 0.2], [0.2, 0.8]])
    theta, delayed = const_cvr(0.25), const_cvr(0.5)
    proxy = losses.loss_proxy(theta, phi, X1, [1], 0).value
    assert losses.loss_total(theta, phi, delayed, X1, [1], 0, 0.0, 0.0).value == 0
    assert all(not g.any() for g in losses.loss_total(theta, phi, delayed, X1, [1], 0, 0.0, 0.0).grads.values())
    assert losses.loss_total(theta, phi, delayed, X1, [1], 0, 1.0, 0.0).value == proxy
    # proxy at q=0.5 and regulariser at (0.5, 0.25), combined with w=2, lam=0.01
    half = const_cvr(0.5)
    combined = 2 * losses.loss_proxy(half, phi, X1, [1], 0).value + 0.01 * losses.loss_reg(theta, delayed, X1).value
    exact = 2 * math.log(2) + 0.01 * (0.5 * math.log(2) + 0.5 * math.log(2 / 3))
    assert combined == pytest.approx(exact, abs=1e-12)
    assert combined == pytest.approx(1.38766, abs=1e-4)  # figure built from 4-digit inputs
    with pytest.raises(ValueError):
        losses.loss_total(theta, phi, delayed, X1, [1], 0, -1.0, 0.0)


def test_total_loss_linear_in_weights():
    rng = np.random.default_rng(4)
    theta, delayed, phi = tiny_cvr(rng), tiny_cvr(rng), tiny_action(rng)
    X, a = random_slots(rng, 30), rng.integers(0, 2, 30)
    f = lambda w, lam: losses.loss_total(theta, phi, delayed, X, a, 0, w, lam)
    lhs, rhs = f(0.7, 0.2), f(1.1, 0.05)
    both = f(1.8, 0.25)
    assert lhs.value + rhs.value == pytest.approx(both.value, abs=1e-12)
    for k in both.grads:
        np.testing.assert_allclose(lhs.grads[k] + rhs.grads[k], both.grads[k], atol=1e-12)


def test_fnw_and_esdfm_weights():
    np.testing.assert_allclose(losses.fnw_weights([0.5, 0.5], [1, 0]), [1.5, 0.75])
    np.testing.assert_allclose(losses.fnw_weights([0.0, 0.0], [1, 0]), [1.0, 1.0])
    pi = np.linspace(0, 1, 11)
    for y in (0, 1):
        np.testing.assert_array_equal(losses.esdfm_weights(pi, 0.0, y), losses.fnw_weights(pi, y))
    np.testing.assert_array_equal(losses.esdfm_weights(0.0, 0.4, [0, 1]), [1.0, 1.0])


def test_fnw_default_uses_own_prediction():
    rng = np.random.default_rng(5)
    theta = tiny_cvr(rng)
    X, y = random_slots(rng, 10), rng.integers(0, 2, 10)
    a = losses.loss_fnw(theta, X, y)
    b = losses.loss_fnw(theta, X, y, q_hat=theta.predict(X))
    assert a.value == b.value


LOSSES = ["action", "delayed", "proxy", "reg", "total", "mixed", "fnw", "esdfm"]


@pytest.mark.parametrize("which", LOSSES)
def test_gradients_finite_difference(which):
    rng = np.random.default_rng(LOSSES.index(which))
    for _ in range(5):
        theta, delayed, phi = tiny_cvr(rng), tiny_cvr(rng), tiny_action(rng)
        X = random_slots(rng, 7)
        y = rng.integers(0, 2, 7)
        fn, model = {
            "action": (lambda: losses.loss_action(phi, X, y, rng_a, 1), phi),
            "delayed": (lambda: losses.loss_delayed_label(delayed, X, y), delayed),
            "proxy": (lambda: losses.loss_proxy(theta, phi, X, y, 0), theta),
            "reg": (lambda: losses.loss_reg(theta, delayed, X), theta),
            "total": (lambda: losses.loss_total(theta, phi, delayed, X, y, 0, 1.3, 0.4), theta),
            "mixed": (lambda: losses.loss_total_mixed(
                theta, {0: phi, 2: IdentityChannel()}, delayed, X, y, ids, w, 0.2), theta),
            "fnw": (lambda: losses.loss_fnw(theta, X, y, q_hat=q_hat), theta),
            "esdfm": (lambda: losses.loss_esdfm(theta, X, y, q_hat, p_in), theta),
        }[which]
        rng_a = rng.integers(0, 3, 7)
        ids = rng.choice([0, 2], 7)
        w = rng.random(7)
        q_hat, p_in = rng.random(7), rng.random(7)
        assert gradcheck(model, fn) < 1e-6
