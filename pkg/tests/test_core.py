import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdfm.core import (
    ActionRevealed, ActionSpec, ClickEvent, LabelRevealed, Stream, atomic_write,
    derive_timeline, read_stream_csv, stream_to_csv_text, validate_specs, write_stream_csv,
)


def click(t=100.0, converts=True, delay=5.0, actions=((0, 1), (1, 0), (2, 1))):
    return ClickEvent(7, t, (1, 2), converts, delay if converts else None, actions)


SPECS = [ActionSpec(0, 1.0), ActionSpec(1, 24.0), ActionSpec(2, 720.0, 2, True)]


def test_timeline_times_and_order():
    ev = derive_timeline(click(), SPECS)
    assert [e.reveal_time for e in ev] == [101.0, 124.0, 820.0]
    assert ev[0].kind == ActionRevealed(0, 1)
    assert ev[1].kind == ActionRevealed(1, 0)
    assert ev[2].kind == LabelRevealed(1)


def test_zero_label_delay_is_one_immediate_event():
    ev = derive_timeline(click(actions=((0, 1),)), [ActionSpec(0, 0.0, 2, True)])
    assert len(ev) == 1 and ev[0].reveal_time == 100.0 and ev[0].kind == LabelRevealed(1)


@given(st.lists(st.floats(0, 720), min_size=1, max_size=6), st.floats(0, 1e4))
def test_timeline_length_and_monotone(delays, t):
    specs = [ActionSpec(j, d) for j, d in enumerate(delays)] + [ActionSpec(len(delays), 720.0, 2, True)]
    acts = tuple((j, 0) for j in range(len(delays)))
    ev = derive_timeline(ClickEvent(0, t, (0,), False, None, acts), specs)
    assert len(ev) == len(specs)
    times = [e.reveal_time for e in ev]
    assert times == sorted(times)


def test_click_event_delay_iff_converts():
    with pytest.raises(ValueError):
        ClickEvent(0, 1.0, (0,), True, None, ())
    with pytest.raises(ValueError):
        ClickEvent(0, 1.0, (0,), False, 3.0, ())


@pytest.mark.parametrize("specs", [
    [],
    [ActionSpec(0, 1.0)],  # no label action
    [ActionSpec(0, 1.0, 2, True), ActionSpec(1, 2.0, 2, True)],
    [ActionSpec(0, 50.0), ActionSpec(1, 48.0, 2, True)],  # action after the label
    [ActionSpec(1, 1.0), ActionSpec(2, 48.0, 2, True)],  # ids not dense
    [ActionSpec(0, 1.0, 1), ActionSpec(1, 48.0, 2, True)],
])
def test_invalid_specs(specs):
    with pytest.raises(ValueError):
        validate_specs(specs)


def _stream(n=20, seed=0):
    rng = np.random.default_rng(seed)
    conv = rng.random(n) < 0.4
    delay = np.where(conv, rng.exponential(10, n), np.nan)
    return Stream(np.arange(n), np.sort(rng.uniform(0, 50, n)), rng.integers(0, 32, (n, 3)),
                  conv, delay, rng.integers(0, 2, (n, 2)))


def test_stream_csv_round_trip(tmp_path):
    s = _stream()
    write_stream_csv(s, tmp_path / "s.csv")
    back = read_stream_csv(tmp_path / "s.csv")
    assert back.equals(s)
    assert stream_to_csv_text(back) == stream_to_csv_text(s)
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == ("sample_id,click_time_hours,converts,conversion_delay_hours,"
                      "slot_0,slot_1,slot_2,action_0,action_1")


def test_stream_events_view():
    s = _stream()
    events = list(s)
    assert len(events) == len(s)
    again = Stream.from_events(events)
    assert again.equals(s)
    for e in events:
        assert (e.conversion_delay is None) == (not e.converts)
        assert e.conversion_delay is None or not math.isnan(e.conversion_delay)


def test_csv_rejects_bad_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("sample_id,click_time_hours,converts,conversion_delay_hours,slot_0,action_0\n0,1.0,0,\n")
    with pytest.raises(ValueError, match=":2:"):
        read_stream_csv(p)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write(target, "first")
    with pytest.raises(TypeError):
        atomic_write(target, 12345)  # cannot be written; original must survive
    assert target.read_text() == "first"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


@settings(max_examples=25)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_csv_round_trip_property(n, seed):
    s = _stream(n, seed)
    assert read_stream_csv_text(stream_to_csv_text(s)).equals(s)


def read_stream_csv_text(text):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        p = f"{d}/s.csv"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text)
        return read_stream_csv(p)
