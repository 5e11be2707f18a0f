"""Streaming protocol: pretraining, the hourly evaluate-then-train loop and
the multi-seed experiment suite.

Every method starts streaming from the same pretrained CVR model. Each hour
the live model is first scored on that hour's clicks, then trained on the
observation events whose reveal time falls in the hour.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import losses
from .core import ActionSpec, Stream, label_spec, validate_specs
from .datagen import WorldConfig, gen_stream, gen_world
from .metrics import MetricsReport, auc, hour_metrics, relative_improvement
from .model import ActionModel, CvrModel, IdentityChannel, Optimizer, add_grads, apply_update
from .weights import WeightVector, estimate_weights

log = logging.getLogger(__name__)

METHODS = ("pretrain", "vanilla", "oracle", "fnw", "esdfm", "gdfm")


@dataclass
class RunConfig:
    method: str = "gdfm"
    alpha: float = 2.0
    beta: float = 1.0
    lam: float = 0.01
    lr: float = 1e-3
    delta_y: float = 48.0
    actions: Optional[list] = None  # [{reveal_delay, cardinality, is_label_action}], ids by position
    esdfm_window: float = 24.0
    pretrain_fraction: float = 0.4
    batch_size: int = 512
    seed: int = 0
    optimizer: str = "adam"
    embed_dim: int = 8
    hidden: int = 32
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-2
    min_pretrain: int = 100
    world: Optional[dict] = None  # WorldConfig fields, used by `generate` and the suite
    n_clicks: int = 100_000
    horizon_hours: float = 240.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0 < self.pretrain_fraction < 1:
            raise ValueError("pretrain_fraction must lie in (0, 1)")
        for name in ("alpha", "beta", "lam", "esdfm_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.pretrain_lr <= 0 or self.batch_size < 1:
            raise ValueError("lr, pretrain_lr and batch_size must be positive")

    def world_config(self) -> WorldConfig:
        if self.world is None:
            raise ValueError("config has no world section")
        return WorldConfig(**{**self.world, "seed": self.world.get("seed", self.seed)})

    def specs(self) -> list:
        if self.actions is not None:
            specs = [ActionSpec(j, float(a["reveal_delay"]), int(a.get("cardinality", 2)),
                                bool(a.get("is_label_action", False)))
                     for j, a in enumerate(self.actions)]
        elif self.world is not None:
            specs = gen_world(self.world_config()).specs
        else:
            specs = [ActionSpec(0, self.delta_y, 2, True)]
        if validate_specs(specs) != self.delta_y:
            raise ValueError("label action reveal_delay must equal delta_y")
        return specs

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# event kinds
ACTION, LABEL, OBSERVED = 0, 1, 2


@dataclass
class EventQueue:
    """Observation events sorted by (reveal_time, action_id, sample)."""
    time: np.ndarray
    sample: np.ndarray  # row index into the stream
    kind: np.ndarray
    action_id: np.ndarray  # -1 for baseline label events
    value: np.ndarray  # action outcome or observed label

    def __len__(self):
        return len(self.time)

    def subset(self, idx) -> "EventQueue":
        return EventQueue(*(getattr(self, f.name)[idx] for f in fields(self)))


def _queue(parts) -> EventQueue:
    cols = [np.concatenate([np.asarray(p[i]) for p in parts]) for i in range(5)]
    time, sample, kind, action_id, value = cols
    order = np.lexsort((sample, action_id, time))
    return EventQueue(time[order].astype(np.float64), sample[order].astype(np.int64),
                      kind[order].astype(np.int64), action_id[order].astype(np.int64),
                      value[order].astype(np.int64))


def schedule_events(stream: Stream, config: RunConfig, method: Optional[str] = None) -> EventQueue:
    method = method or config.method
    n = len(stream)
    rows = np.arange(n)
    t0 = stream.click_time
    y = stream.converts.astype(np.int64)
    delay = np.nan_to_num(stream.delay, nan=np.inf)
    full = lambda v: np.full(n, v)
    if method == "gdfm":
        parts = []
        for s in config.specs():
            kind = LABEL if s.is_label_action else ACTION
            value = y if s.is_label_action else stream.actions[:, s.action_id]
            parts.append((t0 + s.reveal_delay, rows, full(kind), full(s.action_id), value))
        return _queue(parts)
    if method in ("vanilla", "pretrain"):
        return _queue([(t0 + config.delta_y, rows, full(LABEL), full(-1), y)])
    if method == "oracle":
        return _queue([(t0, rows, full(LABEL), full(-1), y)])
    if method == "fnw":
        conv = stream.converts
        return _queue([(t0, rows, full(OBSERVED), full(-1), np.zeros(n)),
                       (t0[conv] + delay[conv], rows[conv], np.full(conv.sum(), OBSERVED),
                        np.full(conv.sum(), -1), np.ones(conv.sum()))])
    if method == "esdfm":
        w = config.esdfm_window
        early = stream.converts & (delay <= w)
        late = stream.converts & ~early
        first_t = np.where(early, t0 + np.where(early, delay, 0), t0 + w)
        return _queue([(first_t, rows, full(OBSERVED), full(-1), early.astype(np.int64)),
                       (t0[late] + delay[late], rows[late], np.full(late.sum(), OBSERVED),
                        np.full(late.sum(), -1), np.ones(late.sum()))])
    raise ValueError(f"unknown method {method!r}")


@dataclass
class Pretrained:
    theta: CvrModel
    theta_delayed: CvrModel
    phi: ActionModel
    weights: WeightVector
    split_hour: int
    aux_dp: Optional[CvrModel] = None
    aux_in: Optional[CvrModel] = None
    train_auc: float = math.nan


def _seeds(seed: int) -> dict:
    names = ["theta", "phi", "aux_dp", "aux_in", "pretrain_shuffle", "stream_shuffle"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {k: int(c.generate_state(1)[0]) for k, c in zip(names, children)}


def split_hour(stream: Stream, config: RunConfig) -> int:
    horizon = math.floor(float(stream.click_time.max())) + 1
    return int(math.floor(config.pretrain_fraction * horizon))


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i:i + size]


def _fit_binary(model, X, labels, config: RunConfig, rng) -> None:
    opt = Optimizer(config.optimizer, config.pretrain_lr)
    for _ in range(config.pretrain_epochs):
        for b in _batches(len(X), config.batch_size, rng):
            apply_update(model, opt, losses.loss_delayed_label(model, X[b], labels[b]).grads)


def _phi_grads(phi, X, actions, specs) -> dict:
    grads = phi.zero_grads()
    for s in specs:
        if not s.is_label_action:
            add_grads(grads, losses.loss_action(phi, X, actions[0], actions[1][:, s.action_id],
                                                s.action_id).grads)
    return grads


def run_pretrain(stream: Stream, config: RunConfig) -> Pretrained:
    """Fit the CVR model, its delayed copy, the action model, the ES-DFM
    auxiliaries and the action weights on the pretraining split. The split
    uses eventual labels, i.e. it is treated as fully matured."""
    specs = config.specs()
    if stream.n_actions != len(specs):
        raise ValueError(f"stream has {stream.n_actions} actions, config declares {len(specs)}")
    seeds = _seeds(config.seed)
    split = split_hour(stream, config)
    pre = stream.click_time < split
    if pre.sum() < config.min_pretrain:
        raise ValueError(f"only {int(pre.sum())} pretraining clicks (< {config.min_pretrain})")
    X = stream.features[pre]
    y = stream.converts[pre].astype(np.int64)
    acts = stream.actions[pre]
    n_bins = int(stream.features.max()) + 1 if config.world is None else config.world_config().n_bins
    shape = dict(n_bins=n_bins, n_fields=stream.n_fields, embed_dim=config.embed_dim,
                 hidden=config.hidden)
    rng = np.random.default_rng(seeds["pretrain_shuffle"])

    theta = CvrModel(**shape, seed=seeds["theta"])
    _fit_binary(theta, X, y, config, rng)

    cards = {s.action_id: s.cardinality for s in specs if not s.is_label_action}
    phi = ActionModel(**shape, cardinalities=cards, seed=seeds["phi"])
    if cards:
        opt = Optimizer(config.optimizer, config.pretrain_lr)
        for _ in range(config.pretrain_epochs):
            for b in _batches(len(X), config.batch_size, rng):
                apply_update(phi, opt, _phi_grads(phi, X[b], (y[b], acts[b]), specs))

    delay = np.nan_to_num(stream.delay[pre], nan=np.inf)
    in_window = (stream.converts[pre] & (delay <= config.esdfm_window)).astype(np.int64)
    aux_in = CvrModel(**shape, seed=seeds["aux_in"])
    _fit_binary(aux_in, X, in_window, config, rng)
    aux_dp = CvrModel(**shape, seed=seeds["aux_dp"])
    neg = in_window == 0
    if neg.any():
        _fit_binary(aux_dp, X[neg], y[neg], config, rng)

    weights = estimate_weights(y, acts, specs, config.alpha, config.beta)
    train_auc = auc(theta.predict(X), y) if 0 < y.sum() < len(y) else math.nan
    return Pretrained(theta, copy.deepcopy(theta), phi, weights, split, aux_dp, aux_in, train_auc)


@dataclass
class RunResult:
    report: MetricsReport
    theta: CvrModel
    theta_delayed: Optional[CvrModel]
    phi: Optional[ActionModel]
    events_trained: int = 0
    clamp_events: dict = field(default_factory=dict)
    weights: Optional[WeightVector] = None

    def summary(self, config: RunConfig) -> dict:
        out = self.report.summary()
        out.update(method=config.method, events_trained=self.events_trained,
                   clamp_events=self.clamp_events,
                   weights=None if self.weights is None else self.weights.to_dict())
        return out


def _check_finite(value: float, what: str, hour: int):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} loss in hour {hour}")


def run_stream(stream: Stream, pretrained: Pretrained, config: RunConfig) -> RunResult:
    method = config.method
    specs = config.specs()
    label_id = label_spec(specs).action_id
    theta = copy.deepcopy(pretrained.theta)
    theta_d = copy.deepcopy(pretrained.theta_delayed) if method == "gdfm" else None
    phi = copy.deepcopy(pretrained.phi) if method == "gdfm" else None
    opt = Optimizer(config.optimizer, config.lr)
    opt_d = Optimizer(config.optimizer, config.lr)
    opt_phi = Optimizer(config.optimizer, config.lr)
    channels = {s.action_id: (IdentityChannel() if s.is_label_action else phi) for s in specs}
    w_action = pretrained.weights.w
    rng = np.random.default_rng(_seeds(config.seed)["stream_shuffle"])
    bs = config.batch_size

    split = pretrained.split_hour
    last_hour = int(math.floor(float(stream.click_time.max())))
    queue = schedule_events(stream, config, method)
    queue = queue.subset(stream.click_time[queue.sample] >= split)
    queue = queue.subset(queue.time < last_hour + 1)
    ev_hour = np.floor(queue.time).astype(np.int64)
    ev_bounds = np.searchsorted(ev_hour, np.arange(split, last_hour + 2))
    click_hour = np.floor(stream.click_time).astype(np.int64)
    click_bounds = np.searchsorted(click_hour, np.arange(split, last_hour + 2))
    if np.any(np.diff(stream.click_time) < 0):
        raise ValueError("stream must be sorted by click time")

    X_all = stream.features
    y_all = stream.converts.astype(np.int64)
    report = MetricsReport()
    trained = 0
    proxy_clamps = 0
    for i, hour in enumerate(range(split, last_hour + 1)):
        c0, c1 = click_bounds[i], click_bounds[i + 1]
        scores = theta.predict(X_all[c0:c1]) if c1 > c0 else np.zeros(0)
        report.rows.append(hour_metrics(hour, scores, y_all[c0:c1]))

        e0, e1 = ev_bounds[i], ev_bounds[i + 1]
        if e1 == e0 or method == "pretrain":
            continue
        ev = queue.subset(slice(e0, e1))
        if ev.time[0] < hour:
            raise RuntimeError(f"event at t={ev.time[0]} scheduled before hour {hour}")
        trained += len(ev)
        X_ev = X_all[ev.sample]

        if method in ("vanilla", "oracle"):
            for b in _batches(len(ev), bs, rng):
                out = losses.loss_delayed_label(theta, X_ev[b], ev.value[b])
                _check_finite(out.value, method, hour)
                apply_update(theta, opt, out.grads)
        elif method == "fnw":
            for b in _batches(len(ev), bs, rng):
                out = losses.loss_fnw(theta, X_ev[b], ev.value[b])
                _check_finite(out.value, method, hour)
                apply_update(theta, opt, out.grads)
        elif method == "esdfm":
            for b in _batches(len(ev), bs, rng):
                out = losses.loss_esdfm(theta, X_ev[b], ev.value[b], pretrained.aux_dp,
                                        pretrained.aux_in)
                _check_finite(out.value, method, hour)
                apply_update(theta, opt, out.grads)
        elif method == "gdfm":
            a_ids = np.where(ev.kind == LABEL, label_id, ev.action_id)
            for b in _batches(len(ev), bs, rng):
                out = losses.loss_total_mixed(theta, channels, theta_d, X_ev[b], ev.value[b],
                                              a_ids[b], w_action[a_ids[b]], config.lam)
                _check_finite(out.value, "gdfm", hour)
                proxy_clamps += out.clamp_events
                apply_update(theta, opt, out.grads)
            lab = ev.subset(ev.kind == LABEL)
            if len(lab):
                X_lab = X_all[lab.sample]
                acts = stream.actions[lab.sample]
                for b in _batches(len(lab), bs, rng):
                    if len(phi.cardinalities):
                        apply_update(phi, opt_phi, _phi_grads(phi, X_lab[b], (lab.value[b], acts[b]), specs))
                    out = losses.loss_delayed_label(theta_d, X_lab[b], lab.value[b])
                    _check_finite(out.value, "delayed", hour)
                    apply_update(theta_d, opt_d, out.grads)

    clamps = {"theta_logit": theta.clamp_events, "proxy_mixture": proxy_clamps}
    if phi is not None:
        clamps["phi_logit"] = phi.clamp_events
    return RunResult(report, theta, theta_d, phi, trained, clamps,
                     pretrained.weights if method == "gdfm" else None)


# ---------------------------------------------------------------- suite

@dataclass
class SuiteConfig:
    base: dict
    seeds: list = field(default_factory=lambda: [0])
    runs: list = field(default_factory=list)  # [{"name": str, "overrides": {...}}]
    jobs: int = 1


def _apply_overrides(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if k == "world" and isinstance(v, dict) and out.get("world") is not None:
            out["world"] = {**out["world"], **v}
        else:
            out[k] = v
    return out


_STREAM_ONLY = ("method", "lam", "lr")


def _seed_unit(args):
    """All runs of one seed; streams and pretrained models are shared between
    runs whose configs only differ in streaming-time fields."""
    runs, seed = args
    streams, pretrains, results = {}, {}, {}
    for name, cfg_dict in runs:
        cfg = RunConfig(**{**cfg_dict, "seed": seed})
        world_key = json.dumps([cfg.world, cfg.n_clicks, cfg.horizon_hours, seed], sort_keys=True)
        if world_key not in streams:
            world = gen_world(replace(cfg.world_config(), seed=seed))
            streams[world_key] = gen_stream(world, cfg.n_clicks, cfg.horizon_hours)
        stream = streams[world_key]
        pre_key = json.dumps([world_key, {k: v for k, v in cfg.to_dict().items()
                                          if k not in _STREAM_ONLY}], sort_keys=True)
        if pre_key not in pretrains:
            pretrains[pre_key] = run_pretrain(stream, cfg)
        res = run_stream(stream, pretrains[pre_key], cfg)
        results[name] = {**res.report.averages(), "summary": res.summary(cfg)}
    return seed, results


def _rel(results: dict, name: str, metric: str) -> float:
    try:
        return relative_improvement(results[name][metric], results["pretrain"][metric],
                                    results["oracle"][metric])
    except ZeroDivisionError:
        return math.nan


def run_experiment_suite(suite: SuiteConfig) -> dict:
    base = suite.base
    runs = [(r["name"], _apply_overrides(base, r.get("overrides", {}))) for r in suite.runs]
    names = [n for n, _ in runs]
    if len(set(names)) != len(names):
        raise ValueError("run names must be unique")
    for anchor in ("pretrain", "oracle"):
        if not any(cfg.get("method") == anchor and n == anchor for n, cfg in runs):
            runs.append((anchor, _apply_overrides(base, {"method": anchor})))
    per_seed, failure = {}, None
    units = [(runs, s) for s in suite.seeds]
    try:
        if suite.jobs > 1:
            with ProcessPoolExecutor(max_workers=suite.jobs) as ex:
                for seed, res in ex.map(_seed_unit, units):
                    per_seed[seed] = res
        else:
            for unit in units:
                seed, res = _seed_unit(unit)
                per_seed[seed] = res
    except Exception as exc:  # partial results are still reported
        log.exception("suite aborted")
        failure = f"{type(exc).__name__}: {exc}"

    table = {}
    for name, _ in runs:
        entry = {}
        done = [s for s in suite.seeds if s in per_seed]
        for metric in ("auc", "pr_auc", "nll"):
            vals = np.array([per_seed[s][name][metric] for s in done])
            rel = np.array([_rel(per_seed[s], name, metric) for s in done])
            entry[metric] = {
                "mean": float(vals.mean()) if len(vals) else math.nan,
                "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "per_seed": vals.tolist(),
                "rel_mean": float(rel.mean()) if len(rel) else math.nan,
                "rel_std": float(rel.std(ddof=1)) if len(rel) > 1 else 0.0,
            }
        table[name] = entry
    return {
        "runs": table,
        "seeds": list(suite.seeds),
        "completed_seeds": sorted(per_seed),
        "partial": failure is not None,
        "failure": failure,
        "details": {str(s): {n: r["summary"] for n, r in res.items()}
                    for s, res in sorted(per_seed.items())},
    }
