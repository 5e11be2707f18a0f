"""Standalone analyses: recovering p(y|x) from p(a|x) through a known channel,
the entropy/total-variation Monte-Carlo study and the data-analysis curves
(temporal gap, entropy against revealing time, action stability).
"""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import xlogy
from scipy.stats import spearmanr

from . import losses
from .core import Stream
from .datagen import WorldParams, true_cvr
from .model import CvrModel, Optimizer, apply_update
from .weights import SMOOTHING, binary_entropy, conditional_entropy, estimate_joint

COLUMN_TOL = 1e-12
RANK_RTOL = 1e-10
RECOVERY_TOL = 1e-9


class RankDeficient(ValueError):
    """The channel matrix has rank below the number of label values."""


class Inconsistent(ValueError):
    """No distribution over labels maps onto the given action distribution."""


def check_channel(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("channel matrix must be 2-d")
    if np.any(M < 0) or np.any(M > 1) or np.any(np.abs(M.sum(axis=0) - 1) > COLUMN_TOL):
        raise ValueError("channel matrix must be column-stochastic")
    return M


def channel_rank(M) -> int:
    s = np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    return int((s > RANK_RTOL * s.max()).sum()) if s.size and s.max() > 0 else 0


def recover_cvr(M, p_a) -> np.ndarray:
    """Solve M p_y = p_a in the least-squares sense; M[j, i] = p(a=j | y=i)."""
    M = check_channel(M)
    p_a = np.asarray(p_a, dtype=np.float64)
    k, n = M.shape
    if p_a.shape != (k,) or np.any(p_a < -RECOVERY_TOL) or abs(p_a.sum() - 1) > RECOVERY_TOL:
        raise ValueError("p_a must be a distribution over the k action values")
    rank = channel_rank(M)
    if rank < n:
        raise RankDeficient(f"rank(M) = {rank} < n = {n}")
    p_y, *_ = np.linalg.lstsq(M, p_a, rcond=None)
    residual = np.abs(M @ p_y - p_a).max()
    if residual > RECOVERY_TOL or p_y.min() < -RECOVERY_TOL or abs(p_y.sum() - 1) > RECOVERY_TOL:
        raise Inconsistent(f"no label distribution reproduces p_a (residual {residual:.3g})")
    return p_y


def tv_distance(p, q) -> float:
    """sum_i |p_i - q_i| (no one-half factor)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    return float(np.abs(p - q).sum())


def channel_entropy(M, marginal) -> float:
    """H(y|a) of the joint p(a, y) = M[a, y] * marginal[y]."""
    return conditional_entropy(np.asarray(M, float) * np.asarray(marginal, float)[None, :])


def contraction_ratio(M, p1, p2) -> float:
    M = np.asarray(M, dtype=np.float64)
    return tv_distance(M @ p1, M @ p2) / tv_distance(p1, p2)


@dataclass
class MCStudy:
    entropy: np.ndarray  # per trial
    ratio: np.ndarray  # per trial
    bins: list  # (mean H, mean ratio, count) per non-empty bin
    resampled: int
    spearman: float

    def rows(self):
        return [(h, r, c) for h, r, c in self.bins]


def mc_entropy_vs_tv(n_trials: int, k: int = 2, n: int = 2, marginal=None, rng=None,
                     n_bins: int = 10, min_tv: float = 1e-12) -> MCStudy:
    """Random Dirichlet(1) channels against the contraction of TV distance."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(rng)
    marginal = np.full(n, 1.0 / n) if marginal is None else np.asarray(marginal, float)
    M = rng.dirichlet(np.ones(k), size=(n_trials, n)).transpose(0, 2, 1)  # (T, k, n)
    p1 = rng.dirichlet(np.ones(n), size=n_trials)
    p2 = rng.dirichlet(np.ones(n), size=n_trials)
    resampled = 0
    while True:
        tv_in = np.abs(p1 - p2).sum(axis=1)
        bad = tv_in < min_tv
        if not bad.any():
            break
        resampled += int(bad.sum())
        p1[bad] = rng.dirichlet(np.ones(n), size=bad.sum())
        p2[bad] = rng.dirichlet(np.ones(n), size=bad.sum())
    tv_out = np.abs(np.einsum("tkn,tn->tk", M, p1 - p2)).sum(axis=1)
    ratio = tv_out / tv_in
    joint = M * marginal[None, None, :]
    p_a = joint.sum(axis=2, keepdims=True)
    H = np.maximum((xlogy(joint, p_a) - xlogy(joint, joint)).sum(axis=(1, 2)), 0.0)

    edges = np.linspace(H.min(), H.max(), n_bins + 1)
    which = np.clip(np.searchsorted(edges, H, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            bins.append((float(H[sel].mean()), float(ratio[sel].mean()), int(sel.sum())))
    rho = spearmanr([b[0] for b in bins], [b[1] for b in bins])[0] if len(bins) > 2 else math.nan
    return MCStudy(H, ratio, bins, resampled, float(rho))


# ---------------------------------------------------------- data curves

@dataclass
class GapConfig:
    base_days: int = 4
    n_days: int = 10
    epochs: int = 3
    finetune_epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 256
    embed_dim: int = 8
    hidden: int = 32
    holdout_fraction: float = 0.1
    seed: int = 0
    day_hours: float = 24.0


@dataclass
class GapCurve:
    days: list
    kl_model: list
    kl_true: list = field(default_factory=list)

    def rows(self):
        true = self.kl_true or [math.nan] * len(self.days)
        return list(zip(self.days, self.kl_model, true))


def _bernoulli_kl(p, q):
    p = np.clip(np.asarray(p, float), 1e-12, 1 - 1e-12)
    q = np.clip(np.asarray(q, float), 1e-12, 1 - 1e-12)
    return p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))


def _fit(model, X, y, lr, epochs, batch_size, rng, opt=None):
    opt = opt or Optimizer("adam", lr)
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for i in range(0, len(X), batch_size):
            b = perm[i:i + batch_size]
            apply_update(model, opt, losses.loss_delayed_label(model, X[b], y[b]).grads)
    return opt


def temporal_gap_curve(stream: Stream, config: Optional[GapConfig] = None,
                       world: Optional[WorldParams] = None, n_bins: Optional[int] = None) -> GapCurve:
    """Fit a base model on the first ``base_days``, then fine-tune a copy one
    day at a time and report the mean KL(base || fine-tuned) over held-out x.
    With ``world`` the exact KL between true conversion rates is also given."""
    config = config or GapConfig()
    day = np.floor(stream.click_time / config.day_hours).astype(np.int64)
    if day.max() < config.base_days + config.n_days - 1:
        raise ValueError("stream does not span base_days + n_days")
    rng = np.random.default_rng(config.seed)
    holdout = rng.random(len(stream)) < config.holdout_fraction
    X, y = stream.features, stream.converts.astype(np.int64)
    n_bins = n_bins or (world.n_bins if world is not None else int(X.max()) + 1)
    base = CvrModel(n_bins, stream.n_fields, config.embed_dim, config.hidden,
                    dtype=np.float64, seed=config.seed)
    train = ~holdout & (day < config.base_days)
    opt = _fit(base, X[train], y[train], config.lr, config.epochs, config.batch_size, rng)
    X_eval = X[holdout]
    p0 = base.predict(X_eval)
    t0 = config.base_days * config.day_hours
    tuned = copy.deepcopy(base)
    opt = copy.deepcopy(opt)
    curve = GapCurve([0], [0.0], [0.0] if world is not None else [])
    for t in range(1, config.n_days + 1):
        sel = ~holdout & (day == config.base_days + t - 1)
        _fit(tuned, X[sel], y[sel], config.lr, config.finetune_epochs, config.batch_size, rng, opt)
        curve.days.append(t)
        curve.kl_model.append(float(_bernoulli_kl(p0, tuned.predict(X_eval)).mean()))
        if world is not None:
            ref = true_cvr(world, X_eval, np.full(len(X_eval), t0))
            now = true_cvr(world, X_eval, np.full(len(X_eval), t0 + t * config.day_hours))
            curve.kl_true.append(float(_bernoulli_kl(ref, now).mean()))
    return curve


def early_conversion_entropy(pi: float, reveal_cdf: float) -> float:
    """Exact H(y | A) for A = [converted by the revealing time], given the
    conversion rate and the delay CDF at that time."""
    p_a0 = 1 - pi * reveal_cdf
    if p_a0 <= 0:
        return 0.0
    return p_a0 * binary_entropy(pi * (1 - reveal_cdf) / p_a0)


def entropy_vs_reveal_curve(stream: Stream, reveal_grid: Sequence[float],
                            eps: float = SMOOTHING) -> list:
    """(delta, H(y|A_delta)) with A_delta = [converted within delta]."""
    y = stream.converts.astype(np.int64)
    delay = np.nan_to_num(stream.delay, nan=np.inf)
    out = []
    for d in reveal_grid:
        a = (stream.converts & (delay <= d)).astype(np.int64)
        joint = estimate_joint(y, a, cardinality=2)
        out.append((float(d), conditional_entropy(joint.probabilities(eps))))
    return out


@dataclass
class StabilityCurve:
    rows: list  # (day, n, cvr, [p(a_j=1|y=1) per action, nan when undefined])
    missing_days: list  # days without clicks
    no_conversion_days: list


def action_stability_curve(stream: Stream, action_ids: Optional[Sequence[int]] = None,
                           bucket_hours: float = 24.0) -> StabilityCurve:
    day = np.floor(stream.click_time / bucket_hours).astype(np.int64)
    action_ids = list(range(stream.n_actions)) if action_ids is None else list(action_ids)
    rows, missing, no_conv = [], [], []
    for d in range(int(day.min()), int(day.max()) + 1):
        sel = day == d
        if not sel.any():
            missing.append(d)
            continue
        conv = sel & stream.converts
        if conv.any():
            cond = [float(stream.actions[conv, j].mean()) for j in action_ids]
        else:
            no_conv.append(d)
            cond = [math.nan] * len(action_ids)
        rows.append((d, int(sel.sum()), float(stream.converts[sel].mean()), cond))
    return StabilityCurve(rows, missing, no_conv)


def coefficient_of_variation(values) -> float:
    v = np.asarray([x for x in values if not math.isnan(x)], float)
    return float(v.std(ddof=1) / v.mean())


def to_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        flat = []
        for v in r:
            flat.extend(v if isinstance(v, (list, tuple)) else [v])
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in flat])
    return buf.getvalue()
