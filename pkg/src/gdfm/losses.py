"""Training objectives. Every loss returns the batch-mean value and the
gradient of that mean with respect to the model being updated; all other
models passed in are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit, xlogy

from .model import sigmoid

PROB_FLOOR = 1e-12


@dataclass
class LossOutput:
    value: float
    grads: dict = field(default_factory=dict)
    clamp_events: int = 0


def _mean_grad(model, cache, dz):
    return model.backward(cache, dz / len(dz))


def cross_entropy_terms(z, y):
    """Per-sample -[y log q + (1-y) log(1-q)] for q = sigmoid(z), and d/dz."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    value = -(y * log_expit(z) + (1 - y) * log_expit(-z))
    return value, sigmoid(z) - y


def proxy_terms(z, q0, q1):
    """Per-sample -log(q0 + q (q1 - q0)) with q = sigmoid(z); q0, q1 are the
    observed action's likelihoods under y=0 and y=1."""
    z = np.asarray(z, dtype=np.float64)
    q = sigmoid(z)
    mix = q0 + q * (q1 - q0)
    low = mix < PROB_FLOOR
    mix = np.maximum(mix, PROB_FLOOR)
    dz = -(q1 - q0) * q * (1 - q) / mix
    return -np.log(mix), dz, int(low.sum())


def kl_terms(z, q_prev):
    """Per-sample KL(Bern(q_prev) || Bern(sigmoid(z))) and d/dz = q - q_prev."""
    z = np.asarray(z, dtype=np.float64)
    q_prev = np.asarray(q_prev, dtype=np.float64)
    value = (xlogy(q_prev, q_prev) - q_prev * log_expit(z)
             + xlogy(1 - q_prev, 1 - q_prev) - (1 - q_prev) * log_expit(-z))
    return np.maximum(value, 0.0), sigmoid(z) - q_prev


def loss_action(phi, X, y, a, action_id) -> LossOutput:
    z, cache = phi.forward(X, y, action_id)
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(z))
    value = lse - z[rows, a]
    dz = np.exp(z - lse[:, None])
    dz[rows, a] -= 1.0
    return LossOutput(float(value.mean()), _mean_grad(phi, cache, dz))


def loss_delayed_label(theta_delayed, X, y) -> LossOutput:
    z, cache = theta_delayed.forward(X)
    value, dz = cross_entropy_terms(z, y)
    return LossOutput(float(value.mean()), _mean_grad(theta_delayed, cache, dz))


def _observed_likelihoods(phi, X, a, action_id):
    a = np.asarray(a, dtype=np.int64)
    rows = np.arange(len(a))
    q0 = phi.predict_action(X, 0, action_id)[rows, a].astype(np.float64)
    q1 = phi.predict_action(X, 1, action_id)[rows, a].astype(np.float64)
    return q0, q1


def loss_proxy(theta, phi, X, a, action_id) -> LossOutput:
    q0, q1 = _observed_likelihoods(phi, X, a, action_id)
    z, cache = theta.forward(X)
    value, dz, low = proxy_terms(z, q0, q1)
    return LossOutput(float(value.mean()), _mean_grad(theta, cache, dz), low)


def loss_reg(theta, theta_delayed, X) -> LossOutput:
    q_prev = theta_delayed.predict(X)
    z, cache = theta.forward(X)
    value, dz = kl_terms(z, q_prev)
    return LossOutput(float(value.mean()), _mean_grad(theta, cache, dz))


def loss_total(theta, phi, theta_delayed, X, a, action_id, w, lam) -> LossOutput:
    """w * proxy + lam * reg for a single action id."""
    if w < 0 or lam < 0:
        raise ValueError("weights must be non-negative")
    n = len(np.atleast_2d(X))
    return loss_total_mixed(theta, {action_id: phi}, theta_delayed, X, a,
                            np.full(n, action_id), np.full(n, float(w)), lam)


def loss_total_mixed(theta, channels: dict, theta_delayed, X, a, action_ids, w, lam) -> LossOutput:
    """Weighted proxy + regulariser over a batch mixing several action ids.

    ``channels`` maps action id -> object with ``predict_action`` (the action
    model, or an identity channel for the label action); ``w`` holds one
    weight per sample.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    a = np.asarray(a, dtype=np.int64)
    action_ids = np.asarray(action_ids, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    q0 = np.empty(len(a))
    q1 = np.empty(len(a))
    for j in np.unique(action_ids):
        idx = action_ids == j
        q0[idx], q1[idx] = _observed_likelihoods(channels[int(j)], X[idx], a[idx], int(j))
    z, cache = theta.forward(X)
    pv, pdz, low = proxy_terms(z, q0, q1)
    value = w * pv
    dz = w * pdz
    if lam:
        kv, kdz = kl_terms(z, theta_delayed.predict(X))
        value = value + lam * kv
        dz = dz + lam * kdz
    return LossOutput(float(value.mean()), _mean_grad(theta, cache, dz), low)


def fnw_weights(q_hat, y_obs):
    q_hat = np.asarray(q_hat, dtype=np.float64)
    return np.where(np.asarray(y_obs) == 1, 1 + q_hat, (1 - q_hat) * (1 + q_hat))


def esdfm_weights(p_dp, p_in, y_obs):
    """p_dp = P(eventual conversion | observed negative), p_in = P(conversion
    inside the window)."""
    p_dp = np.asarray(p_dp, dtype=np.float64)
    d = p_dp * (1 - np.asarray(p_in, dtype=np.float64))
    return np.where(np.asarray(y_obs) == 1, 1 + d, (1 + d) * (1 - p_dp))


def _weighted_ce(theta, X, y_obs, weights) -> LossOutput:
    z, cache = theta.forward(X)
    value, dz = cross_entropy_terms(z, y_obs)
    return LossOutput(float((weights * value).mean()), _mean_grad(theta, cache, weights * dz))


def _probs(source, X):
    return source.predict(X).astype(np.float64) if hasattr(source, "predict") else np.asarray(source, dtype=np.float64)


def loss_fnw(theta, X, y_obs, q_hat=None) -> LossOutput:
    """Fake-negative weighted cross-entropy; ``q_hat`` defaults to the model's
    own (gradient-stopped) prediction."""
    q_hat = theta.predict(X) if q_hat is None else _probs(q_hat, X)
    return _weighted_ce(theta, X, y_obs, fnw_weights(q_hat, y_obs))


def loss_esdfm(theta, X, y_obs, p_dp, p_in) -> LossOutput:
    """``p_dp``/``p_in``: frozen auxiliary models or precomputed arrays."""
    return _weighted_ce(theta, X, y_obs, esdfm_weights(_probs(p_dp, X), _probs(p_in, X), y_obs))
