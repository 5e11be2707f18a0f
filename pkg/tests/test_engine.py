import copy
import math

import numpy as np
import pytest

from gdfm import engine
from gdfm.core import Stream
from gdfm.datagen import gen_stream, gen_world, true_cvr
from gdfm.engine import (
    ACTION, LABEL, RunConfig, SuiteConfig, run_experiment_suite, run_pretrain, run_stream,
    schedule_events,
)
from gdfm.metrics import auc
from gdfm.model import ActionModel, checkpoint_bytes

SMALL_WORLD = {"drift_step": 0.05, "label_delay": 12.0,
               "channels": [{"reveal_delay": 1.0, "table": [[0.9, 0.2], [0.1, 0.8]]},
                            {"reveal_delay": 4.0, "kind": "flip", "flip_p": 0.7}]}


def small_config(**kw):
    base = dict(lr=1e-2, delta_y=12.0, n_clicks=6000, horizon_hours=60.0, world=SMALL_WORLD,
                batch_size=128, hidden=8, embed_dim=4)
    return RunConfig(**{**base, **kw})


def small_stream(cfg):
    return gen_stream(gen_world(cfg.world_config()), cfg.n_clicks, cfg.horizon_hours)


def one_click(delay, t=10.0):
    conv = delay is not None
    return Stream([0], [t], [[0]], [conv], [delay if conv else math.nan], [[1, int(conv)]])


def test_fnw_schedule():
    q = schedule_events(one_click(5.0), RunConfig(method="fnw"))
    assert q.time.tolist() == [10.0, 15.0] and q.value.tolist() == [0, 1]
    q = schedule_events(one_click(None), RunConfig(method="fnw"))
    assert q.time.tolist() == [10.0] and q.value.tolist() == [0]


def test_esdfm_schedule():
    cfg = RunConfig(method="esdfm", esdfm_window=24.0)
    q = schedule_events(one_click(5.0), cfg)
    assert q.time.tolist() == [15.0] and q.value.tolist() == [1]
    q = schedule_events(one_click(None), cfg)
    assert q.time.tolist() == [34.0] and q.value.tolist() == [0]
    q = schedule_events(one_click(40.0), cfg)
    assert q.time.tolist() == [34.0, 50.0] and q.value.tolist() == [0, 1]


def test_vanilla_oracle_schedule():
    assert schedule_events(one_click(5.0), RunConfig(method="vanilla")).time.tolist() == [58.0]
    assert schedule_events(one_click(5.0), RunConfig(method="oracle")).time.tolist() == [10.0]


def test_gdfm_emits_one_event_per_spec():
    cfg = small_config()
    s = small_stream(cfg)
    q = schedule_events(s, cfg, "gdfm")
    m = len(cfg.specs())
    assert m == 3 and len(q) == m * len(s)
    assert np.all(np.bincount(q.sample, minlength=len(s)) == m)
    assert np.all(np.diff(q.time) >= 0)
    lab = q.kind == LABEL
    np.testing.assert_allclose(q.time[lab], s.click_time[q.sample[lab]] + cfg.delta_y)
    np.testing.assert_array_equal(q.value[lab], s.converts[q.sample[lab]])
    assert set(q.kind[~lab]) == {ACTION}


@pytest.mark.parametrize("method", ["vanilla", "fnw", "esdfm", "gdfm"])
def test_schedule_has_no_early_labels(method):
    cfg = small_config(method=method)
    s = small_stream(cfg)
    q = schedule_events(s, cfg)
    t0 = s.click_time[q.sample]
    delay = np.nan_to_num(s.delay[q.sample], nan=np.inf)
    if method in ("vanilla", "gdfm"):
        assert np.all(q.time[q.kind == LABEL] >= t0[q.kind == LABEL] + cfg.delta_y)
    else:
        pos = q.value == 1
        # a positive is only ever observed once the conversion has happened
        assert np.all(q.time[pos] >= t0[pos] + delay[pos] - 1e-12)


def scores_by_hour(monkeypatch, stream, pre, cfg) -> dict:
    """Run the stream and capture the scores handed to the per-hour metrics."""
    seen = {}
    real = engine.hour_metrics

    def wrapped(hour, scores, labels):
        seen[hour] = np.array(scores)
        return real(hour, scores, labels)

    with monkeypatch.context() as m:
        m.setattr(engine, "hour_metrics", wrapped)
        run_stream(stream, pre, cfg)
    return seen


def relabel_hour(s, hour):
    """Flip the eventual label of every click in ``hour``; actions stay put."""
    conv = s.converts.copy()
    sel = np.floor(s.click_time) == hour
    conv[sel] = ~conv[sel]
    delay = np.where(conv, np.where(np.isnan(s.delay), 1.0, s.delay), np.nan)
    return Stream(s.sample_id, s.click_time, s.features, conv, delay, s.actions)


def test_evaluate_before_train(monkeypatch):
    cfg = small_config(method="oracle")
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    h = pre.split_hour + 5
    a = scores_by_hour(monkeypatch, s, pre, cfg)
    b = scores_by_hour(monkeypatch, relabel_hour(s, h), pre, cfg)
    for hour in range(pre.split_hour, h + 1):
        np.testing.assert_array_equal(a[hour], b[hour])
    assert not np.array_equal(a[h + 1], b[h + 1])


@pytest.mark.parametrize("method", ["vanilla", "gdfm"])
def test_labels_do_not_leak(monkeypatch, method):
    cfg = small_config(method=method)
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    h = pre.split_hour + 3
    a = scores_by_hour(monkeypatch, s, pre, cfg)
    b = scores_by_hour(monkeypatch, relabel_hour(s, h), pre, cfg)
    reveal = h + int(cfg.delta_y)  # earliest hour any flipped label can be trained on
    for hour in range(pre.split_hour, reveal + 1):
        np.testing.assert_array_equal(a[hour], b[hour])
    assert not np.array_equal(a[reveal + 2], b[reveal + 2])


def test_pretrain_method_keeps_parameters():
    cfg = small_config(method="pretrain")
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    res = run_stream(s, pre, cfg)
    assert checkpoint_bytes(res.theta) == checkpoint_bytes(pre.theta)
    assert res.events_trained == 0


def test_uninformative_gdfm_without_reg_never_moves_theta():
    # label events fall past the horizon, so only action events are trained on
    cfg = small_config(method="gdfm", lam=0.0, horizon_hours=20.0, n_clicks=3000)
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    uniform = ActionModel(pre.phi.n_bins, pre.phi.n_fields, pre.phi.cardinalities,
                          cfg.embed_dim, cfg.hidden)
    pre = engine.Pretrained(pre.theta, pre.theta_delayed, uniform, pre.weights, pre.split_hour)
    res = run_stream(s, pre, cfg)
    assert res.events_trained > 0
    assert checkpoint_bytes(res.theta) == checkpoint_bytes(pre.theta)


def test_run_is_deterministic():
    cfg = small_config(method="gdfm")
    s = small_stream(cfg)
    pa, pb = run_pretrain(s, cfg), run_pretrain(s, cfg)
    for name in ("theta", "phi", "aux_dp", "aux_in"):
        assert checkpoint_bytes(getattr(pa, name)) == checkpoint_bytes(getattr(pb, name))
    ra, rb = run_stream(s, pa, cfg), run_stream(s, pb, cfg)
    assert ra.report.to_csv() == rb.report.to_csv()
    assert checkpoint_bytes(ra.theta) == checkpoint_bytes(rb.theta)
    assert pa.weights.w.mean() == pytest.approx(1, abs=1e-12)


def test_pretrain_split_events_are_dropped():
    cfg = small_config(method="oracle")
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    res = run_stream(s, pre, cfg)
    assert res.events_trained == int((s.click_time >= pre.split_hour).sum())
    assert res.report.rows[0].hour == pre.split_hour


def test_pretrain_needs_enough_data():
    cfg = small_config(min_pretrain=10**6)
    with pytest.raises(ValueError):
        run_pretrain(small_stream(cfg), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(method="magic")
    with pytest.raises(ValueError):
        RunConfig(pretrain_fraction=1.0)
    with pytest.raises(ValueError):
        RunConfig(lam=-0.1)
    with pytest.raises(ValueError):
        small_config(delta_y=24.0).specs()  # world label delay is 12h
    d = RunConfig()
    assert (d.alpha, d.beta, d.lam, d.lr) == (2.0, 1.0, 0.01, 1e-3)


def test_pretrained_model_near_bayes_auc():
    world = {"drift_step": 0.0, "channels": []}
    cfg = RunConfig(n_clicks=125_000, horizon_hours=100.0, world=world, delta_y=48.0)
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    sel = s.click_time < pre.split_hour
    assert sel.sum() == pytest.approx(50_000, rel=0.02)
    w = gen_world(cfg.world_config())
    bayes = auc(true_cvr(w, s.features[sel], s.click_time[sel]), s.converts[sel])
    assert abs(pre.train_auc - bayes) < 0.02


def test_oracle_on_stationary_world_tracks_bayes():
    world = {"drift_step": 0.0, "channels": []}
    cfg = RunConfig(method="oracle", lr=1e-3, n_clicks=40_000, horizon_hours=100.0, world=world)
    s = small_stream(cfg)
    pre = run_pretrain(s, cfg)
    res = run_stream(s, pre, cfg)
    w = gen_world(cfg.world_config())
    p = true_cvr(w, s.features, s.click_time)
    hours = np.floor(s.click_time)
    bayes = [auc(p[hours == r.hour], s.converts[hours == r.hour]) for r in res.report.valid_rows]
    assert abs(res.report.auc - np.mean(bayes)) < 0.02


def suite_base():
    return {**small_config().to_dict(), "n_clicks": 4000}


def test_suite_aggregates_seeds():
    suite = SuiteConfig(suite_base(), seeds=[0, 1, 2, 3, 4],
                        runs=[{"name": "gdfm", "overrides": {"method": "gdfm"}},
                              {"name": "no_alpha", "overrides": {"method": "gdfm", "alpha": 0.0}}])
    out = run_experiment_suite(suite)
    assert not out["partial"] and out["completed_seeds"] == [0, 1, 2, 3, 4]
    assert set(out["runs"]) == {"gdfm", "no_alpha", "pretrain", "oracle"}
    g = out["runs"]["gdfm"]["auc"]
    assert len(g["per_seed"]) == 5
    assert g["std"] == pytest.approx(np.std(g["per_seed"], ddof=1), abs=1e-15)
    assert out["runs"]["pretrain"]["auc"]["rel_mean"] == 0.0
    assert out["runs"]["oracle"]["auc"]["rel_mean"] == 100.0


def test_suite_parallel_matches_serial():
    runs = [{"name": "vanilla", "overrides": {"method": "vanilla"}}]
    a = run_experiment_suite(SuiteConfig(suite_base(), seeds=[0, 1], runs=runs, jobs=1))
    b = run_experiment_suite(SuiteConfig(suite_base(), seeds=[0, 1], runs=runs, jobs=2))
    assert a["runs"] == b["runs"]


def test_suite_failure_is_flagged():
    runs = [{"name": "bad", "overrides": {"method": "gdfm", "min_pretrain": 10**7}}]
    out = run_experiment_suite(SuiteConfig(suite_base(), seeds=[0], runs=runs))
    assert out["partial"] and "ValueError" in out["failure"]


def test_flip_sweep_emits_one_row_per_p():
    base = suite_base()
    runs = []
    for p in (0.5, 0.8, 0.9, 0.95):
        world = copy.deepcopy(base["world"])
        world["channels"] = [{"reveal_delay": 1.0, "kind": "flip", "flip_p": p}]
        runs.append({"name": f"flip_{p}", "overrides": {"world": world}})
    out = run_experiment_suite(SuiteConfig(base, seeds=[0], runs=runs))
    assert [n for n in out["runs"] if n.startswith("flip")] == ["flip_0.5", "flip_0.8", "flip_0.9", "flip_0.95"]
