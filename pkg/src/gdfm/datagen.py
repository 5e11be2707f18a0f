"""Synthetic drifting-world generator and Criteo conversion-log ingestion.

A world samples clicks in the order x ~ p(x), y ~ p^t(y|x), a_j ~ p(a_j|x, y).
The conversion model is logistic over hashed slots whose weights take a
Gaussian random walk, one step per hour. Action channels are stationary.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .core import ActionSpec, Stream, validate_specs

log = logging.getLogger(__name__)

HASH_NAME = "blake2b-64, 4-byte little-endian field salt, mod n_bins"
MISSING = b"\x00missing"

# SeedSequence spawn keys; fixed so that adding a new consumer never shifts old ones
_WEIGHTS, _DRIFT, _STREAM = 1, 2, 3


@dataclass
class ChannelConfig:
    """One post-click action. ``kind`` is 'table' (explicit p(a|y)) or 'flip'."""
    reveal_delay: float
    kind: str = "table"
    table: Optional[list] = None  # table[v][c] = p(a=v | y=c)
    flip_p: float = 0.5
    bucket_field: Optional[int] = None
    bucket_tables: Optional[list] = None  # per-bucket tables, used with bucket_field


@dataclass
class WorldConfig:
    n_fields: int = 4
    n_bins: int = 64
    weight_scale: float = 0.7
    bias: float = -1.2
    drift_step: float = 0.05
    delay_rate: float = 1 / 12
    label_delay: float = 48.0
    channels: list = field(default_factory=list)
    label_action_id: Optional[int] = None  # None: label action is last
    seed: int = 0

    def __post_init__(self):
        self.channels = [c if isinstance(c, ChannelConfig) else ChannelConfig(**c)
                         for c in self.channels]


@dataclass
class ActionChannel:
    """table[v, c] = p(a = v | y = c); bucketed channels carry one table per bucket."""
    table: np.ndarray
    bucket_field: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim not in (2, 3) or t.shape[-1] != 2:
            raise ValueError("channel table must have shape (k, 2) or (buckets, k, 2)")
        if np.any(t < 0) or np.any(t > 1) or np.any(np.abs(t.sum(axis=-2) - 1) > 1e-12):
            raise ValueError("channel columns must be probability distributions")
        if (t.ndim == 3) != (self.bucket_field is not None):
            raise ValueError("bucketed tables require bucket_field and vice versa")
        self.table = t

    @property
    def cardinality(self) -> int:
        return self.table.shape[-2]

    def probs(self, y, features=None, bins_per_field=None) -> np.ndarray:
        """p(a = . | y, x) as an (N, k) array."""
        y = np.asarray(y, dtype=np.int64)
        if self.bucket_field is None:
            return self.table[:, y].T
        local = features[:, self.bucket_field] - self.bucket_field * bins_per_field
        bucket = local % self.table.shape[0]
        return self.table[bucket, :, y]

    def sample(self, y, u, features=None, bins_per_field=None) -> np.ndarray:
        """Inverse-CDF draw with caller-supplied uniforms (common random numbers)."""
        cdf = np.cumsum(self.probs(y, features, bins_per_field), axis=1)
        out = (u[:, None] >= cdf).sum(axis=1)
        return np.minimum(out, self.cardinality - 1)


def identity_channel() -> ActionChannel:
    return ActionChannel(np.eye(2))


def flip_table(p: float) -> np.ndarray:
    return np.array([[p, 1 - p], [1 - p, p]], dtype=np.float64)


@dataclass
class WorldParams:
    base_weights: np.ndarray
    bias: float
    drift_step: float
    delay_rate: float
    label_delay: float
    channels: list
    specs: list
    n_bins: int
    n_fields: int
    seed: int

    @property
    def bins_per_field(self) -> int:
        return self.n_bins // self.n_fields

    def _increment(self, hour: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, _DRIFT, hour])
        return rng.normal(0.0, self.drift_step, size=self.n_bins + 1)

    @cached_property
    def _walk(self) -> list:
        return [np.concatenate([self.base_weights, [self.bias]])]

    def params_at(self, hour: int) -> np.ndarray:
        """Slot weights followed by the bias, after ``hour`` random-walk steps."""
        walk = self._walk
        if self.drift_step == 0:
            return walk[0]
        while len(walk) <= hour:
            walk.append(walk[-1] + self._increment(len(walk) - 1))
        return walk[hour]

    def to_json(self) -> str:
        fmt = lambda v: format(float(v), ".17g")
        doc = {
            "base_weights": [fmt(v) for v in self.base_weights],
            "bias": fmt(self.bias),
            "drift_step": fmt(self.drift_step),
            "delay_rate": fmt(self.delay_rate),
            "label_delay": fmt(self.label_delay),
            "channels": [{"table": np.vectorize(fmt)(c.table).tolist(),
                          "bucket_field": c.bucket_field} for c in self.channels],
            "specs": [{**asdict(s), "reveal_delay": fmt(s.reveal_delay)} for s in self.specs],
            "n_bins": self.n_bins,
            "n_fields": self.n_fields,
            "seed": self.seed,
            "hash": HASH_NAME,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "WorldParams":
        d = json.loads(text)
        return cls(
            base_weights=np.array([float(v) for v in d["base_weights"]]),
            bias=float(d["bias"]),
            drift_step=float(d["drift_step"]),
            delay_rate=float(d["delay_rate"]),
            label_delay=float(d["label_delay"]),
            channels=[ActionChannel(np.array(c["table"], dtype=float), c["bucket_field"])
                      for c in d["channels"]],
            specs=[ActionSpec(**{**s, "reveal_delay": float(s["reveal_delay"])})
                   for s in d["specs"]],
            n_bins=d["n_bins"], n_fields=d["n_fields"], seed=d["seed"],
        )


def _channel_from_config(c: ChannelConfig) -> ActionChannel:
    if c.kind == "flip":
        if not 0 <= c.flip_p <= 1:
            raise ValueError("flip_p must lie in [0, 1]")
        return ActionChannel(flip_table(c.flip_p))
    if c.kind != "table":
        raise ValueError(f"unknown channel kind {c.kind!r}")
    if c.bucket_field is not None:
        return ActionChannel(np.array(c.bucket_tables, dtype=float), c.bucket_field)
    if c.table is None:
        raise ValueError("table channel needs a table")
    return ActionChannel(np.array(c.table, dtype=float))


def gen_world(config: WorldConfig) -> WorldParams:
    if config.n_fields <= 0 or config.n_bins <= 0 or config.n_bins % config.n_fields:
        raise ValueError("n_bins must be a positive multiple of n_fields")
    if config.drift_step < 0 or config.delay_rate <= 0 or config.label_delay <= 0:
        raise ValueError("drift_step >= 0, delay_rate > 0 and label_delay > 0 required")
    channels = [_channel_from_config(c) for c in config.channels]
    for c in config.channels:
        if c.bucket_field is not None and not 0 <= c.bucket_field < config.n_fields:
            raise ValueError("bucket_field out of range")
    label_id = len(channels) if config.label_action_id is None else config.label_action_id
    channels.insert(label_id, identity_channel())
    delays = [c.reveal_delay for c in config.channels]
    delays.insert(label_id, config.label_delay)
    specs = [ActionSpec(j, float(d), ch.cardinality, j == label_id)
             for j, (d, ch) in enumerate(zip(delays, channels))]
    validate_specs(specs)
    rng = np.random.default_rng([config.seed, _WEIGHTS])
    weights = rng.normal(0.0, config.weight_scale, size=config.n_bins)
    return WorldParams(weights, float(config.bias), float(config.drift_step),
                       float(config.delay_rate), float(config.label_delay), channels, specs,
                       config.n_bins, config.n_fields, config.seed)


def true_cvr(world: WorldParams, x, t) -> np.ndarray | float:
    """p^t(y=1|x). Accepts one feature vector and time, or (N, F) / (N,) arrays."""
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    hours = np.floor(t).astype(np.int64)
    logits = np.empty(len(x))
    for h in np.unique(hours):
        idx = hours == h
        p = world.params_at(int(h))
        logits[idx] = p[x[idx]].sum(axis=1) + p[-1]
    out = 1.0 / (1.0 + np.exp(-logits))
    return float(out[0]) if single else out


def _truncated_exponential(u, rate, upper):
    # inverse CDF of Exp(rate) restricted to (0, upper]
    return -np.log1p(-u * -np.expm1(-rate * upper)) / rate


def gen_stream(world: WorldParams, n_clicks: int, horizon_hours: float,
               seed: Optional[int] = None) -> Stream:
    if n_clicks <= 0 or horizon_hours <= 0:
        raise ValueError("n_clicks and horizon_hours must be positive")
    seed = world.seed if seed is None else seed
    rng = np.random.default_rng([seed, _STREAM])
    click_time = np.sort(rng.uniform(0.0, horizon_hours, size=n_clicks))
    bpf = world.bins_per_field
    local = rng.integers(0, bpf, size=(n_clicks, world.n_fields))
    features = local + np.arange(world.n_fields) * bpf
    p = true_cvr(world, features, click_time)
    y = rng.random(n_clicks) < p
    u_delay = 1.0 - rng.random(n_clicks)
    delay = np.where(y, _truncated_exponential(u_delay, world.delay_rate, world.label_delay),
                     np.nan)
    u_act = rng.random((n_clicks, len(world.channels)))
    actions = np.empty((n_clicks, len(world.channels)), dtype=np.int64)
    for j, ch in enumerate(world.channels):
        actions[:, j] = ch.sample(y.astype(np.int64), u_act[:, j], features, bpf)
    return Stream(np.arange(n_clicks), click_time, features, y, delay, actions)


def flip_action(y: int, p: float, rng: np.random.Generator) -> int:
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    return int(y) if rng.random() < p else 1 - int(y)


def hash_feature(field_index: int, raw: bytes, n_bins: int) -> int:
    if n_bins <= 0 or n_bins & (n_bins - 1):
        raise ValueError("n_bins must be a power of two")
    h = hashlib.blake2b(field_index.to_bytes(4, "little") + raw, digest_size=8)
    return int.from_bytes(h.digest(), "little") & (n_bins - 1)


N_NUMERIC, N_CATEGORICAL = 8, 9


@dataclass
class IngestReport:
    rows_read: int = 0
    accepted: int = 0
    skipped: int = 0  # malformed rows
    rejected: int = 0  # conversion before click
    problems: list = field(default_factory=list)  # (line number, reason)
    hash: str = HASH_NAME
    numeric_edges: list = field(default_factory=list)


def _parse_optional_float(s: str) -> Optional[float]:
    s = s.strip()
    return None if s == "" else float(s)


def ingest_criteo(path, hash_bins: int, numeric_bins: int,
                  specs: Optional[Sequence[ActionSpec]] = None) -> tuple[Stream, IngestReport]:
    """Read a Criteo conversion-log TSV into a stream.

    Columns: click ts, conversion ts (may be empty), 8 numeric, 9 categorical.
    Timestamps are seconds; times are re-origined at the earliest click.
    Non-label actions become early-conversion indicators
    ``converts and delay <= reveal_delay``; the label action reveals y.
    """
    if specs is None:
        specs = [ActionSpec(0, 720.0, 2, True)]
    validate_specs(specs)
    if numeric_bins < 1:
        raise ValueError("numeric_bins must be >= 1")
    report = IngestReport()
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            report.rows_read += 1
            cols = line.split("\t")
            try:
                if len(cols) != 2 + N_NUMERIC + N_CATEGORICAL:
                    raise ValueError(f"expected {2 + N_NUMERIC + N_CATEGORICAL} columns, got {len(cols)}")
                click = float(cols[0])
                conv = _parse_optional_float(cols[1])
                nums = [_parse_optional_float(c) for c in cols[2:2 + N_NUMERIC]]
            except ValueError as exc:
                report.skipped += 1
                report.problems.append((lineno, str(exc)))
                log.warning("%s:%d: skipped malformed row (%s)", path, lineno, exc)
                continue
            if conv is not None and conv < click:
                report.rejected += 1
                report.problems.append((lineno, "conversion before click"))
                log.warning("%s:%d: rejected, conversion precedes click", path, lineno)
                continue
            rows.append((click, conv, nums, cols[2 + N_NUMERIC:]))
    if not rows:
        raise ValueError(f"{path}: no usable rows")
    report.accepted = len(rows)

    qs = np.linspace(0, 1, numeric_bins + 1)[1:-1]
    edges = []
    for f in range(N_NUMERIC):
        vals = np.array([r[2][f] for r in rows if r[2][f] is not None])
        edges.append(np.quantile(vals, qs) if len(vals) else np.array([]))
    report.numeric_edges = [e.tolist() for e in edges]

    n = len(rows)
    feats = np.empty((n, N_NUMERIC + N_CATEGORICAL), dtype=np.int64)
    click_ts = np.array([r[0] for r in rows])
    conv_ts = np.array([np.nan if r[1] is None else r[1] for r in rows])
    for i, (_, _, nums, cats) in enumerate(rows):
        for f, v in enumerate(nums):
            raw = MISSING if v is None else b"q%d" % int(np.searchsorted(edges[f], v, side="right"))
            feats[i, f] = hash_feature(f, raw, hash_bins)
        for c, v in enumerate(cats):
            raw = MISSING if v == "" else v.encode("utf-8")
            feats[i, N_NUMERIC + c] = hash_feature(N_NUMERIC + c, raw, hash_bins)

    order = np.argsort(click_ts, kind="stable")
    converts = ~np.isnan(conv_ts)
    delay = (conv_ts - click_ts) / 3600.0
    actions = np.empty((n, len(specs)), dtype=np.int64)
    for s in specs:
        if s.is_label_action:
            actions[:, s.action_id] = converts
        else:
            actions[:, s.action_id] = converts & (np.nan_to_num(delay, nan=np.inf) <= s.reveal_delay)
    click_h = (click_ts - click_ts.min()) / 3600.0
    stream = Stream(np.arange(n)[order], click_h[order], feats[order], converts[order],
                    delay[order], actions[order])
    return stream, report
