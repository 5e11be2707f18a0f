"""AUC, average precision, NLL and the per-hour streaming report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

NLL_CLAMP = 1e-12
PR_AUC_VARIANT = "average precision, stable input order among tied scores"


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney statistic via rank sums; ties count one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].mean())


def nll(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    s = np.clip(scores, NLL_CLAMP, 1 - NLL_CLAMP)
    return float(-np.mean(labels * np.log(s) + (1 - labels) * np.log1p(-s)))


def relative_improvement(metric: float, pretrain_anchor: float, oracle_anchor: float) -> float:
    gap = oracle_anchor - pretrain_anchor
    if gap == 0:
        raise ZeroDivisionError("pretrain and oracle anchors coincide")
    return 100.0 * (metric - pretrain_anchor) / gap


@dataclass
class HourMetrics:
    hour: int
    n: int
    auc: float = math.nan
    pr_auc: float = math.nan
    nll: float = math.nan

    @property
    def valid(self) -> bool:
        return self.n >= 2 and not math.isnan(self.auc)


def hour_metrics(hour: int, scores, labels) -> HourMetrics:
    scores, labels = _check(scores, labels)
    row = HourMetrics(hour, len(scores))
    if len(scores):
        row.nll = nll(scores, labels)
    if 0 < labels.sum() < len(labels):
        row.auc = auc(scores, labels)
        row.pr_auc = pr_auc(scores, labels)
    return row


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    @property
    def valid_rows(self) -> list:
        return [r for r in self.rows if r.valid]

    @property
    def skipped_hours(self) -> list:
        return [r.hour for r in self.rows if not r.valid]

    def _mean(self, key) -> float:
        vals = [getattr(r, key) for r in self.valid_rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def auc(self) -> float:
        return self._mean("auc")

    @property
    def pr_auc(self) -> float:
        return self._mean("pr_auc")

    @property
    def nll(self) -> float:
        return self._mean("nll")

    def averages(self) -> dict:
        return {"auc": self.auc, "pr_auc": self.pr_auc, "nll": self.nll}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hour", "n_eval", "auc", "pr_auc", "nll"])
        for r in self.rows:
            w.writerow([r.hour, r.n] + [repr(float(v)) for v in (r.auc, r.pr_auc, r.nll)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "averages": self.averages(),
            "hours": len(self.rows),
            "hours_used": len(self.valid_rows),
            "skipped_hours": self.skipped_hours,
            "pr_auc_variant": PR_AUC_VARIANT,
        }
