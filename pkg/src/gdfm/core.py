"""Domain types shared across the package and observation timelines.

Time is measured in hours since the stream origin.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

FeatureVector = tuple  # tuple[int, ...] of slot ids in [0, n_bins)


@dataclass(frozen=True)
class ActionSpec:
    action_id: int
    reveal_delay: float
    cardinality: int = 2
    is_label_action: bool = False


@dataclass(frozen=True)
class ClickEvent:
    sample_id: int
    click_time: float
    features: FeatureVector
    converts: bool
    conversion_delay: float | None
    actions: tuple  # ((action_id, outcome), ...)

    def __post_init__(self):
        if (self.conversion_delay is not None) != bool(self.converts):
            raise ValueError(f"sample {self.sample_id}: conversion_delay must be set iff converts")
        if self.click_time < 0:
            raise ValueError(f"sample {self.sample_id}: negative click_time")


@dataclass(frozen=True)
class ActionRevealed:
    action_id: int
    outcome: int


@dataclass(frozen=True)
class LabelRevealed:
    y: int


@dataclass(frozen=True)
class ObservationEvent:
    sample_id: int
    reveal_time: float
    kind: Union[ActionRevealed, LabelRevealed]


def validate_specs(specs: Sequence[ActionSpec]) -> float:
    """Check the action-spec invariants and return the label delay."""
    if not specs:
        raise ValueError("at least one action spec is required")
    ids = sorted(s.action_id for s in specs)
    if ids != list(range(len(specs))):
        raise ValueError(f"action ids must be dense 0..m-1, got {ids}")
    labels = [s for s in specs if s.is_label_action]
    if len(labels) != 1:
        raise ValueError("exactly one spec must be the label action")
    delta_y = labels[0].reveal_delay
    for s in specs:
        if s.cardinality < 2:
            raise ValueError(f"action {s.action_id}: cardinality must be >= 2")
        if not 0 <= s.reveal_delay <= delta_y:
            raise ValueError(f"action {s.action_id}: reveal_delay must lie in [0, delta_y]")
    if labels[0].cardinality != 2:
        raise ValueError("the label action must be binary")
    return float(delta_y)


def label_spec(specs: Sequence[ActionSpec]) -> ActionSpec:
    return next(s for s in specs if s.is_label_action)


def derive_timeline(click: ClickEvent, specs: Sequence[ActionSpec]) -> list[ObservationEvent]:
    outcomes = dict(click.actions)
    events = []
    for s in sorted(specs, key=lambda s: (s.reveal_delay, s.action_id)):
        t = click.click_time + s.reveal_delay
        if s.is_label_action:
            kind = LabelRevealed(int(click.converts))
        else:
            kind = ActionRevealed(s.action_id, int(outcomes[s.action_id]))
        events.append(ObservationEvent(click.sample_id, t, kind))
    return events


class Stream:
    """Columnar click stream; iterating yields :class:`ClickEvent` objects.

    ``delay`` holds NaN for non-converting clicks. ``actions[:, j]`` is the
    outcome of action ``j``.
    """

    def __init__(self, sample_id, click_time, features, converts, delay, actions):
        self.sample_id = np.asarray(sample_id, dtype=np.int64)
        self.click_time = np.asarray(click_time, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.int64)
        self.converts = np.asarray(converts, dtype=bool)
        self.delay = np.asarray(delay, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.int64)
        n = len(self.sample_id)
        if self.features.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("features and actions must be 2-d")
        for name in ("click_time", "features", "converts", "delay", "actions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(np.isnan(self.delay) == self.converts):
            raise ValueError("delay must be present iff converts")

    def __len__(self) -> int:
        return len(self.sample_id)

    @property
    def n_fields(self) -> int:
        return self.features.shape[1]

    @property
    def n_actions(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i: int) -> ClickEvent:
        conv = bool(self.converts[i])
        return ClickEvent(
            sample_id=int(self.sample_id[i]),
            click_time=float(self.click_time[i]),
            features=tuple(int(v) for v in self.features[i]),
            converts=conv,
            conversion_delay=float(self.delay[i]) if conv else None,
            actions=tuple((j, int(v)) for j, v in enumerate(self.actions[i])),
        )

    def __iter__(self) -> Iterator[ClickEvent]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, index) -> "Stream":
        return Stream(self.sample_id[index], self.click_time[index], self.features[index],
                      self.converts[index], self.delay[index], self.actions[index])

    def with_actions(self, actions) -> "Stream":
        return Stream(self.sample_id, self.click_time, self.features, self.converts,
                      self.delay, actions)

    @classmethod
    def from_events(cls, events: Iterable[ClickEvent]) -> "Stream":
        events = list(events)
        if not events:
            raise ValueError("empty stream")
        return cls(
            [e.sample_id for e in events],
            [e.click_time for e in events],
            [list(e.features) for e in events],
            [e.converts for e in events],
            [e.conversion_delay if e.converts else math.nan for e in events],
            [[v for _, v in sorted(e.actions)] for e in events],
        )

    def equals(self, other: "Stream") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=(k == "delay"))
            for k in ("sample_id", "click_time", "features", "converts", "delay", "actions")
        )


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stream_to_csv_text(stream: Stream) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["sample_id", "click_time_hours", "converts", "conversion_delay_hours"]
    header += [f"slot_{f}" for f in range(stream.n_fields)]
    header += [f"action_{j}" for j in range(stream.n_actions)]
    w.writerow(header)
    for i in range(len(stream)):
        conv = bool(stream.converts[i])
        row = [int(stream.sample_id[i]), repr(float(stream.click_time[i])), int(conv),
               repr(float(stream.delay[i])) if conv else ""]
        row += stream.features[i].tolist()
        row += stream.actions[i].tolist()
        w.writerow(row)
    return buf.getvalue()


def write_stream_csv(stream: Stream, path) -> None:
    atomic_write(path, stream_to_csv_text(stream))


def read_stream_csv(path) -> Stream:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["sample_id", "click_time_hours", "converts",
                                            "conversion_delay_hours"]:
            raise ValueError(f"{path}: missing or malformed header row")
        n_fields = sum(h.startswith("slot_") for h in header)
        n_actions = sum(h.startswith("action_") for h in header)
        ids, times, conv, delay, feats, acts = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 + n_fields + n_actions:
                raise ValueError(f"{path}:{lineno}: expected {4 + n_fields + n_actions} columns")
            ids.append(int(row[0]))
            times.append(float(row[1]))
            c = row[2] == "1"
            conv.append(c)
            delay.append(float(row[3]) if c else math.nan)
            feats.append([int(v) for v in row[4:4 + n_fields]])
            acts.append([int(v) for v in row[4 + n_fields:]])
    if not ids:
        raise ValueError(f"{path}: no rows")
    return Stream(ids, times, feats, conv, delay, acts)
