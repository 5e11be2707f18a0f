"""Per-action information and temporal weights.

Joint tables are indexed ``[a, y]``. Entropies are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .core import validate_specs

SMOOTHING = 0.5


@dataclass
class JointCounts:
    counts: np.ndarray  # counts[v, c] = n(a = v, y = c)
    action_id: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative 2-d table")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "JointCounts") -> "JointCounts":
        if self.action_id != other.action_id or self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge counts of different actions")
        return JointCounts(self.counts + other.counts, self.action_id)

    def probabilities(self, eps: float = SMOOTHING) -> np.ndarray:
        c = self.counts + eps
        return c / c.sum()


def estimate_joint(y, a, action_id: int = 0, cardinality: int | None = None) -> JointCounts:
    y = np.asarray(y, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot estimate a joint from an empty dataset")
    if len(a) != len(y):
        raise ValueError("y and a must have equal length")
    k = int(a.max()) + 1 if cardinality is None else cardinality
    k = max(k, 2)
    counts = np.zeros((k, 2), dtype=np.int64)
    np.add.at(counts, (a, y), 1)
    return JointCounts(counts, action_id)


def conditional_entropy(joint) -> float:
    """H(y|a) = sum_a p(a) H(y | a); zero cells contribute nothing.

    Accepts a probability table ``[a, y]`` or :class:`JointCounts` (smoothed).
    """
    p = joint.probabilities() if isinstance(joint, JointCounts) else np.asarray(joint, float)
    if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise ValueError("joint must be a probability table")
    p_a = p.sum(axis=1)
    # normalising rows first makes an uninformative channel give exactly H(y)
    cond = p / np.where(p_a > 0, p_a, 1.0)[:, None]
    h = float(p_a @ -xlogy(cond, cond).sum(axis=1))
    return float(max(h, 0.0))


def binary_entropy(pi: float) -> float:
    return float(-xlogy(pi, pi) - xlogy(1 - pi, 1 - pi))


def w_info(H: float, alpha: float) -> float:
    if H < 0 or alpha < 0:
        raise ValueError("H and alpha must be non-negative")
    return float(np.exp(-alpha * H))


def w_time(delta: float, beta: float, delta_y: float) -> float:
    """exp(-beta * delta / delta_y): revealing time normalised by the label delay."""
    if delta_y <= 0:
        raise ValueError("delta_y must be positive")
    if not 0 <= delta <= delta_y or beta < 0:
        raise ValueError("need 0 <= delta <= delta_y and beta >= 0")
    return float(np.exp(-beta * delta / delta_y))


@dataclass
class WeightVector:
    w: np.ndarray
    raw: np.ndarray
    entropies: np.ndarray
    deltas: np.ndarray
    alpha: float
    beta: float
    delta_y: float
    joints: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "delta_y": self.delta_y,
            "entropy": self.entropies.tolist(), "delta": self.deltas.tolist(),
            "raw": self.raw.tolist(), "normalized": self.w.tolist(),
            "joint_counts": [j.counts.tolist() for j in self.joints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightVector":
        return cls(np.array(d["normalized"], float), np.array(d["raw"], float),
                   np.array(d["entropy"], float), np.array(d["delta"], float),
                   float(d["alpha"]), float(d["beta"]), float(d["delta_y"]),
                   [JointCounts(c, j) for j, c in enumerate(d.get("joint_counts", []))])


def normalize_mean(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    mean = raw.mean()
    if not mean > 0:
        raise ValueError("all raw weights are zero; cannot normalise")
    return raw / mean


def combine_and_normalize(entropies, deltas, alpha: float, beta: float, delta_y: float,
                          joints=()) -> WeightVector:
    entropies = np.asarray(entropies, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if len(entropies) < 1 or len(entropies) != len(deltas):
        raise ValueError("need one entropy and one delay per action")
    raw = np.array([w_info(h, alpha) * w_time(d, beta, delta_y)
                    for h, d in zip(entropies, deltas)])
    return WeightVector(normalize_mean(raw), raw, entropies, deltas, float(alpha),
                        float(beta), float(delta_y), list(joints))


def estimate_weights(y, actions, specs, alpha: float, beta: float) -> WeightVector:
    """Count joints on a labelled dataset, then weight every action spec."""
    delta_y = validate_specs(specs)
    joints = [estimate_joint(y, actions[:, s.action_id], s.action_id, s.cardinality)
              for s in sorted(specs, key=lambda s: s.action_id)]
    ents = [conditional_entropy(j) for j in joints]
    deltas = [s.reveal_delay for s in sorted(specs, key=lambda s: s.action_id)]
    return combine_and_normalize(ents, deltas, alpha, beta, delta_y, joints)
