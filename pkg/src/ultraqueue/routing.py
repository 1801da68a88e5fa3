"""Two-level learned routing (room type, then room) and the join-shortest-queue baseline.

Queue length everywhere means patients routed to a room who have not begun
service (a patient still walking to an idle room counts as waiting).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import forest as rf
from .eventlog import PatientRecord, group_by_day

if TYPE_CHECKING:
    from .calibrate import CalibratedModel

log = logging.getLogger(__name__)

MODES = ("sample", "argmax")
MIN_ROWS_PER_ROOM = 50


@dataclass(frozen=True)
class RoutingFeaturesL1:
    age: float
    item_group: str
    arrival_hour: int
    weekday: int
    queue_length_by_type: tuple[int, ...]
    num_open_by_type: tuple[int, ...]


@dataclass(frozen=True)
class RoutingFeaturesL2:
    age: float
    item_group: str
    arrival_hour: int
    weekday: int
    queue_length: tuple[int, ...]
    is_open: tuple[int, ...]


def _base_columns(groups: Sequence[str]):
    names = ["age"] + [f"item_group={g}" for g in groups] + ["arrival_hour"] + [f"weekday={d}" for d in range(7)]
    kinds = ["age"] + ["item_group"] * len(groups) + ["arrival_hour"] + ["weekday"] * 7
    return names, kinds


def l1_schema(groups: Sequence[str], types: Sequence[str]) -> rf.FeatureSchema:
    names, kinds = _base_columns(groups)
    names += [f"queue_length[{t}]" for t in types] + [f"num_open[{t}]" for t in types]
    kinds += ["queue_length"] * len(types) + ["num_open"] * len(types)
    return rf.FeatureSchema(tuple(names), tuple(kinds))


def l2_schema(groups: Sequence[str], rooms: Sequence[int]) -> rf.FeatureSchema:
    names, kinds = _base_columns(groups)
    names += [f"queue_length[{r}]" for r in rooms] + [f"is_open[{r}]" for r in rooms]
    kinds += ["queue_length"] * len(rooms) + ["is_open"] * len(rooms)
    return rf.FeatureSchema(tuple(names), tuple(kinds))


def _base_vector(age, group, hour, weekday, groups):
    v = [float(age)] + [1.0 if group == g else 0.0 for g in groups] + [float(hour)]
    return v + [1.0 if weekday == d else 0.0 for d in range(7)]


@dataclass
class RoutingPolicy:
    level1: rf.RandomForest | None
    level2: dict[str, rf.RandomForest]
    room_type: dict[int, str]
    eligibility: dict[str, tuple[str, ...]]
    groups: tuple[str, ...]
    mode: str = "sample"
    report: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}")
        members = defaultdict(list)
        for r in sorted(self.room_type):
            members[self.room_type[r]].append(r)
        self.members = dict(sorted(members.items(), key=lambda kv: int(kv[0][1:])))

    @property
    def types(self) -> list[str]:
        return list(self.members)

    def with_mode(self, mode: str) -> "RoutingPolicy":
        return replace(self, mode=mode)

    def admissible_types(self, group: str) -> tuple[str, ...]:
        return self.eligibility.get(group, tuple(self.types))

    def l1_vector(self, f: RoutingFeaturesL1) -> np.ndarray:
        v = _base_vector(f.age, f.item_group, f.arrival_hour, f.weekday, self.groups)
        return np.array(v + list(f.queue_length_by_type) + list(f.num_open_by_type), dtype=float)

    def l2_vector(self, f: RoutingFeaturesL2) -> np.ndarray:
        v = _base_vector(f.age, f.item_group, f.arrival_hour, f.weekday, self.groups)
        return np.array(v + list(f.queue_length) + list(f.is_open), dtype=float)

    def to_dict(self) -> dict:
        return {
            "level1": None if self.level1 is None else self.level1.to_dict(),
            "level2": {t: f.to_dict() for t, f in sorted(self.level2.items())},
            "room_type": {str(r): t for r, t in sorted(self.room_type.items())},
            "eligibility": {g: list(v) for g, v in sorted(self.eligibility.items())},
            "groups": list(self.groups),
            "mode": self.mode,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d) -> "RoutingPolicy":
        return cls(
            level1=None if d["level1"] is None else rf.RandomForest.from_dict(d["level1"]),
            level2={t: rf.RandomForest.from_dict(f) for t, f in d["level2"].items()},
            room_type={int(r): t for r, t in d["room_type"].items()},
            eligibility={g: tuple(v) for g, v in d["eligibility"].items()},
            groups=tuple(d["groups"]),
            mode=d["mode"],
            report=list(d.get("report", [])),
        )


# ---------------------------------------------------------------- state features


def extract_l1(state, patient, members: Mapping[str, Sequence[int]]) -> RoutingFeaturesL1:
    """Per-type sums of room queues and open-room counts at the current clock.

    ``state`` needs ``waiting(room)``, ``is_open(room)``, ``hour`` and ``weekday``.
    """
    q = tuple(sum(state.waiting(r) for r in rooms) for rooms in members.values())
    n = tuple(sum(1 for r in rooms if state.is_open(r)) for rooms in members.values())
    return RoutingFeaturesL1(patient.age, patient.group, state.hour, state.weekday, q, n)


def extract_l2(state, patient, rooms: Sequence[int]) -> RoutingFeaturesL2:
    return RoutingFeaturesL2(
        patient.age, patient.group, state.hour, state.weekday,
        tuple(state.waiting(r) for r in rooms), tuple(int(state.is_open(r)) for r in rooms),
    )


def _choose(probs: np.ndarray, mode: str, rng) -> int:
    if mode == "argmax":
        return int(np.argmax(probs))
    cum = np.cumsum(probs)
    return int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(probs) - 1))


def masked(probs, allowed) -> np.ndarray:
    """Zero disallowed entries and renormalize; uniform over allowed if no mass remains."""
    p = np.where(allowed, probs, 0.0)
    s = p.sum()
    if s > 0:
        return p / s
    allowed = np.asarray(allowed, dtype=float)
    return allowed / allowed.sum()


def route(policy: RoutingPolicy, state, patient, rng) -> int | None:
    """Pick an open admissible room, or None when there is none."""
    admissible = policy.admissible_types(patient.group)
    members = policy.members
    open_rooms = {t: [r for r in members[t] if state.is_open(r)] for t in admissible}
    open_types = [t for t in admissible if open_rooms[t]]
    if not open_types:
        return None
    if len(open_types) == 1:
        rtype = open_types[0]
    else:
        f1 = extract_l1(state, patient, members)
        labels = policy.level1.classes
        p1 = policy.level1.predict_proba(policy.l1_vector(f1))
        allowed = np.array([t in open_types for t in labels])
        if not allowed.any():
            rtype = open_types[0]
        else:
            rtype = labels[_choose(masked(p1, allowed), policy.mode, rng)]
    candidates = open_rooms[rtype]
    if len(candidates) == 1:
        return candidates[0]
    forest = policy.level2.get(rtype)
    rooms = members[rtype]
    if forest is None:
        return candidates[0] if policy.mode == "argmax" else candidates[int(rng.random() * len(candidates))]
    f2 = extract_l2(state, patient, rooms)
    p2 = forest.predict_proba(policy.l2_vector(f2))
    labels = forest.classes
    allowed = np.array([r in candidates for r in labels])
    if not allowed.any():
        return candidates[0] if policy.mode == "argmax" else candidates[int(rng.random() * len(candidates))]
    return int(labels[_choose(masked(p2, allowed), policy.mode, rng)])


def jsq_route(state, patient, members: Mapping[str, Sequence[int]], eligibility: Mapping[str, Sequence[str]]) -> int | None:
    """Open admissible room with the fewest patients present (waiting or in service); lowest id on ties."""
    best = None
    for t in eligibility.get(patient.group, tuple(members)):
        for r in members[t]:
            if state.is_open(r):
                key = (state.occupancy(r), r)
                if best is None or key < best:
                    best = key
    return None if best is None else best[1]


# ---------------------------------------------------------------- training


@dataclass
class ReplayRow:
    record: PatientRecord
    group: str
    hour: int
    weekday: int
    waiting: dict[int, int]
    is_open: dict[int, int]


class _ReplayState:
    def __init__(self, row: ReplayRow):
        self.row = row
        self.hour = row.hour
        self.weekday = row.weekday

    def waiting(self, room):
        return self.row.waiting.get(room, 0)

    def is_open(self, room):
        return bool(self.row.is_open.get(room, 0))


def queues_at_arrival(day_records: Sequence[PatientRecord], rooms: Sequence[int]) -> np.ndarray:
    """Waiting count per room seen by each arrival of one day, rows in arrival order.

    Queue at arrival = earlier arrivals (log order within equal timestamps) to
    the same room whose service had not started before this arrival's second.
    """
    col = {r: j for j, r in enumerate(rooms)}
    arr = np.array([r.arrival_ts for r in day_records], dtype=np.int64)
    start = np.array([r.service_start_ts for r in day_records], dtype=np.int64)
    room_idx = np.array([col[r.room_id] for r in day_records], dtype=np.int64)
    out = np.zeros((len(day_records), len(rooms)), dtype=np.int64)
    for i in range(len(day_records)):
        pending = start[:i] >= arr[i]
        out[i] = np.bincount(room_idx[:i][pending], minlength=len(rooms))
    return out


def replay_features(records: Sequence[PatientRecord], model: "CalibratedModel") -> list[ReplayRow]:
    """Reconstruct the state seen by every historical arrival.

    Open status comes from the day's inferred open pattern.
    """
    rooms = model.rooms
    out = []
    for day_id, recs in sorted(group_by_day(records).items()):
        recs = sorted(recs, key=lambda r: r.arrival_ts)  # stable: keeps log order on ties
        q = queues_at_arrival(recs, rooms)
        pattern = model.patterns.get(day_id)
        for i, r in enumerate(recs):
            hour = r.arrival_ts // 3600
            out.append(ReplayRow(
                record=r,
                group=model.item_groups.group_of(r.exam_items),
                hour=hour,
                weekday=r.weekday,
                waiting={room: int(q[i, j]) for j, room in enumerate(rooms)},
                is_open={room: int(pattern.is_open(room, hour)) for room in rooms},
            ))
    return out


class _Row:
    __slots__ = ("age", "group")

    def __init__(self, age, group):
        self.age, self.group = age, group


def _evaluate(forest, X, y, level, name, split):
    entry = {"level": level, "model": name, "split": split, "n": int(len(y)), "auc": None, "accuracy": None}
    if len(y) == 0:
        return entry
    P = forest.predict_proba(X)
    entry["accuracy"] = rf.accuracy(forest, X, y, proba=P)
    if len(set(np.asarray(y).tolist()) & set(forest.classes)) >= 2:
        entry["auc"] = rf.ovr_auc(forest, X, y, proba=P)
    return entry


def level1_data(rows: Sequence[ReplayRow], policy: RoutingPolicy) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([policy.l1_vector(extract_l1(_ReplayState(w), _Row(w.record.age, w.group), policy.members))
                  for w in rows]).reshape(len(rows), -1)
    y = np.array([policy.room_type[w.record.room_id] for w in rows], dtype=object)
    return X, y


def level2_data(rows: Sequence[ReplayRow], policy: RoutingPolicy, rtype: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows routed to ``rtype``, with that type's per-room features."""
    rooms = policy.members[rtype]
    mine = [w for w in rows if policy.room_type[w.record.room_id] == rtype]
    X = np.array([policy.l2_vector(extract_l2(_ReplayState(w), _Row(w.record.age, w.group), rooms))
                  for w in mine]).reshape(len(mine), -1)
    y = np.array([w.record.room_id for w in mine], dtype=np.int64)
    return X, y


def split_mask(n: int, seed: int, train_fraction: float) -> np.ndarray:
    """Boolean train mask over n rows from a seeded permutation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(round(train_fraction * n))]] = True
    return mask


def train_policy(records: Sequence[PatientRecord], model: "CalibratedModel",
                 first_level: rf.Hyperparams = rf.FIRST_LEVEL,
                 second_level: Mapping[str, rf.Hyperparams] | None = None,
                 seed: int = 0, train_fraction: float = 0.8, mode: str = "sample") -> RoutingPolicy:
    """Fit the type-level forest and one room-level forest per type on replayed features."""
    second_level = dict(rf.SECOND_LEVEL if second_level is None else second_level)
    room_type = dict(model.room_types.room_type)
    groups = tuple(model.item_groups.labels)
    policy = RoutingPolicy(None, {}, room_type, dict(model.eligibility), groups, mode)
    types = policy.types
    rows = replay_features(records, model)
    if not rows:
        raise ValueError("no records to train routing on")

    X1, y1 = level1_data(rows, policy)
    is_train = split_mask(len(rows), seed, train_fraction)

    hp1 = replace(first_level, seed=int(np.random.SeedSequence([seed, 2]).generate_state(1)[0]))
    policy.level1 = rf.train(X1[is_train], y1[is_train], hp1, l1_schema(groups, types), classes=tuple(types))
    report = [_evaluate(policy.level1, X1[is_train], y1[is_train], 1, "room_type", "train"),
              _evaluate(policy.level1, X1[~is_train], y1[~is_train], 1, "room_type", "test")]

    for k, t in enumerate(types):
        rooms = policy.members[t]
        X2, y2 = level2_data(rows, policy, t)
        tr = is_train[y1 == t]
        counts = np.bincount(np.searchsorted(rooms, y2[tr]), minlength=len(rooms))
        for r, c in zip(rooms, counts):
            if c < MIN_ROWS_PER_ROOM:
                log.warning("room %s has only %d routing training rows", r, c)
        if tr.sum() == 0:
            log.warning("no routing rows for room type %s; rooms chosen uniformly", t)
            continue
        hp = second_level.get(t, rf.SECOND_LEVEL.get(t, rf.FIRST_LEVEL))
        hp = replace(hp, seed=int(np.random.SeedSequence([seed, 3, k]).generate_state(1)[0]))
        forest = rf.train(X2[tr], y2[tr], hp, l2_schema(groups, rooms), classes=tuple(rooms))
        policy.level2[t] = forest
        report.append(_evaluate(forest, X2[tr], y2[tr], 2, t, "train"))
        report.append(_evaluate(forest, X2[~tr], y2[~tr], 2, t, "test"))
    policy.report = report
    return policy


def evaluation_csv(policy: RoutingPolicy) -> str:
    """level,model,split,n,auc,accuracy"""
    lines = ["level,model,split,n,auc,accuracy"]
    for e in policy.report:
        fmt = lambda v: "" if v is None else repr(float(v))
        lines.append(f"{e['level']},{e['model']},{e['split']},{e['n']},{fmt(e['auc'])},{fmt(e['accuracy'])}")
    return "\n".join(lines) + "\n"
