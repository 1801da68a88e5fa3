"""Ground-truth scenarios and synthetic event logs for closed-loop experiments.

A scenario fixes the true arrival curves, item catalog, room types with
their opening odds, service distributions, breaks, walks and a routing rule
(preference by item group, then queue-averse choice among open rooms). The
log is produced by running the engine under a :class:`ScenarioWorld`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import Patient, SimConfig, run_world_replications, thinning
from .eventlog import PatientRecord, day_kind_of

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MULTI = "P2"


@dataclass
class GroupSpec:
    service_mean: float  # seconds
    service_cv: float
    type_pref: dict[str, float]
    female_prob: float = 0.7
    age: list[list[float]] = field(default_factory=lambda: [[1.0, 35.0, 12.0]])  # [weight, mean, sd] rows
    departments: dict[str, float] = field(default_factory=lambda: {"general": 1.0})


@dataclass
class RoomTypeSpec:
    rooms: list[int]
    speed: float = 1.0  # service-time multiplier
    open_prob: dict[str, float] = field(default_factory=lambda: {"weekday": 1.0, "weekend": 1.0})
    break_prob: float = 0.0
    break_mean: float = 60.0
    walk_prob: float = 0.0
    walk_mean: float = 40.0


@dataclass
class SynthScenario:
    items: dict[str, tuple[float, str]]  # item -> (weight among single-item visits, group)
    groups: dict[str, GroupSpec]
    room_types: dict[str, RoomTypeSpec]
    arrival_rates: dict[str, list[float]]  # day kind -> total patients per hour over the horizon
    multi_item_prob: float = 0.0
    horizon: tuple[int, int] = (7, 17)
    hour_speed: dict[int, float] = field(default_factory=dict)
    queue_sensitivity: float = 0.0
    room_weights: dict[int, float] = field(default_factory=dict)
    min_gap: int = 15  # every break or walk is at least this long
    start_date: str = "2029-01-01"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.horizon = tuple(self.horizon)
        self.validate()

    @property
    def rooms(self) -> list[int]:
        return sorted(r for spec in self.room_types.values() for r in spec.rooms)

    @property
    def room_type(self) -> dict[int, str]:
        return {r: t for t, spec in self.room_types.items() for r in spec.rooms}

    def validate(self):
        h0, h1 = self.horizon
        if not h0 < h1:
            raise ValueError("horizon start must precede its end")
        if not 0 <= self.multi_item_prob <= 1:
            raise ValueError("multi_item_prob outside [0, 1]")
        rooms = [r for spec in self.room_types.values() for r in spec.rooms]
        if len(rooms) != len(set(rooms)):
            raise ValueError("a room belongs to two types")
        for kind, curve in self.arrival_rates.items():
            if len(curve) != h1 - h0 or min(curve, default=0) < 0:
                raise ValueError(f"arrival curve {kind!r} must have one non-negative rate per horizon hour")
        for t, spec in self.room_types.items():
            for p in (*spec.open_prob.values(), spec.break_prob, spec.walk_prob):
                if not 0 <= p <= 1:
                    raise ValueError(f"room type {t}: probability outside [0, 1]")
        for item, (w, g) in self.items.items():
            if w < 0 or g not in self.groups:
                raise ValueError(f"item {item!r}: bad weight or unknown group {g!r}")
        if self.multi_item_prob > 0 and MULTI not in self.groups:
            raise ValueError(f"multi-item visits need a {MULTI} group")
        for g, spec in self.groups.items():
            if not 0 <= spec.female_prob <= 1:
                raise ValueError(f"group {g}: female_prob outside [0, 1]")
            if set(spec.type_pref) - set(self.room_types):
                raise ValueError(f"group {g}: preference for unknown room type")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizon"] = list(self.horizon)
        d["items"] = {k: list(v) for k, v in self.items.items()}
        d["hour_speed"] = {str(h): v for h, v in self.hour_speed.items()}
        d["room_weights"] = {str(r): v for r, v in self.room_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthScenario":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema_version {d.get('schema_version')!r}")
        d = dict(d)
        d["items"] = {k: (float(w), g) for k, (w, g) in d["items"].items()}
        d["groups"] = {g: GroupSpec(**v) for g, v in d["groups"].items()}
        d["room_types"] = {t: RoomTypeSpec(**v) for t, v in d["room_types"].items()}
        d["hour_speed"] = {int(h): float(v) for h, v in d.get("hour_speed", {}).items()}
        d["room_weights"] = {int(r): float(v) for r, v in d.get("room_weights", {}).items()}
        return cls(**d)


def dumps_scenario(s: SynthScenario) -> str:
    return json.dumps(s.to_dict(), indent=2, sort_keys=True) + "\n"


def load_scenario(path) -> SynthScenario:
    return SynthScenario.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ScenarioWorld:
    """The true system behind a scenario, in the engine's world interface."""

    def __init__(self, scenario: SynthScenario):
        s = self.scenario = scenario
        self.rooms = s.rooms
        self.horizon = s.horizon
        self.hours = list(range(*s.horizon))
        self.room_type = s.room_type
        self.members = {t: sorted(spec.rooms) for t, spec in s.room_types.items()}
        names = sorted(s.items)
        w = np.array([s.items[i][0] for i in names], dtype=float)
        self._items = names
        self._item_p = w / w.sum() if w.sum() > 0 else w
        self._sigma = {g: math.sqrt(math.log1p(spec.service_cv ** 2)) for g, spec in s.groups.items()}

    def plan_day(self, day_id, rng):
        kind = day_kind_of(day_id)
        plan = {}
        for t in sorted(self.scenario.room_types):
            spec = self.scenario.room_types[t]
            for r in sorted(spec.rooms):
                is_open = rng.random() < spec.open_prob.get(kind, 0.0)
                plan[r] = tuple(self.hours) if is_open else ()
        return plan

    def _patient(self, n, t, stem, rng):
        s = self.scenario
        if rng.random() < s.multi_item_prob:
            picks = rng.choice(len(self._items), size=2, replace=False, p=self._item_p)
            items = tuple(self._items[i] for i in sorted(picks))
            group = MULTI
        else:
            items = (self._items[rng.choice(len(self._items), p=self._item_p)],)
            group = s.items[items[0]][1]
        g = s.groups[group]
        gender = "female" if rng.random() < g.female_prob else "male"
        comp = np.array(g.age, dtype=float)
        k = rng.choice(len(comp), p=comp[:, 0] / comp[:, 0].sum())
        age = round(float(np.clip(rng.normal(comp[k, 1], comp[k, 2]), 0.0, 99.0)), 2)
        depts = sorted(g.departments)
        dw = np.array([g.departments[d] for d in depts], dtype=float)
        dept = depts[rng.choice(len(depts), p=dw / dw.sum())]
        return Patient(f"{stem}-{n:05d}", t, "", group, age, gender, dept, items)

    def arrivals(self, day_id, rng):
        curve = self.scenario.arrival_rates.get(day_kind_of(day_id), [0.0] * len(self.hours))
        times = thinning(curve, self.hours, rng)
        stem = day_id.replace("-", "")
        return [self._patient(n, int(t), stem, rng) for n, t in enumerate(times)]

    def route(self, state, patient, rng):
        s = self.scenario
        pref = s.groups[patient.group].type_pref
        types = [t for t in sorted(pref) if pref[t] > 0 and any(state.is_open(r) for r in self.members[t])]
        if not types:
            return None
        w = np.array([pref[t] for t in types])
        rtype = types[rng.choice(len(types), p=w / w.sum())]
        rooms = [r for r in self.members[rtype] if state.is_open(r)]
        w = np.array([s.room_weights.get(r, 1.0) * math.exp(-s.queue_sensitivity * state.waiting(r)) for r in rooms])
        return rooms[rng.choice(len(rooms), p=w / w.sum())]

    def service_time(self, room, t, patient, rng):
        s = self.scenario
        g = s.groups[patient.group]
        mean = g.service_mean * s.room_types[self.room_type[room]].speed * s.hour_speed.get(t // 3600, 1.0)
        sigma = self._sigma[patient.group]
        x = rng.lognormal(math.log(mean) - sigma ** 2 / 2, sigma)
        return max(1, int(round(x)))

    def _gap(self, mean, rng):
        extra = max(mean - self.scenario.min_gap, 0.0)
        return self.scenario.min_gap + int(round(rng.exponential(extra))) if extra > 0 else self.scenario.min_gap

    def break_time(self, room, t, rng):
        spec = self.scenario.room_types[self.room_type[room]]
        return self._gap(spec.break_mean, rng) if rng.random() < spec.break_prob else 0

    def walk_time(self, room, t, rng):
        spec = self.scenario.room_types[self.room_type[room]]
        return self._gap(spec.walk_mean, rng) if rng.random() < spec.walk_prob else 0


def closed_hours(scenario: SynthScenario, plans: list[dict[int, tuple[int, ...]]], day_ids) -> list[tuple[str, int]]:
    """(day, hour) pairs with positive arrival rate and every room closed."""
    h0 = scenario.horizon[0]
    out = []
    for day_id, plan in zip(day_ids, plans):
        curve = scenario.arrival_rates.get(day_kind_of(day_id), [])
        open_hours = {h for hs in plan.values() for h in hs}
        out += [(day_id, h0 + i) for i, lam in enumerate(curve) if lam > 0 and h0 + i not in open_hours]
    return out


def synthesize_log(scenario: SynthScenario, n_days: int, seed: int = 0, threads: int = 1) -> list[PatientRecord]:
    """Run the ground-truth system for ``n_days`` consecutive days from ``scenario.start_date``.

    Hours with arrivals but no open room are allowed (patients wait for a
    room to open or go unserved) and summarized in a warning.
    """
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    world = ScenarioWorld(scenario)
    config = SimConfig(n_replications=n_days, seed=seed, start_date=scenario.start_date, threads=threads)
    results = run_world_replications(world, config)
    unserved = sum(len(r.unserved) for r in results)
    plans = [world.plan_day(r.day_id, _day_stream(seed, i)) for i, r in enumerate(results)]
    closed = closed_hours(scenario, plans, [r.day_id for r in results])
    if closed or unserved:
        log.warning("%d day-hours had arrivals but no open room; %d patients unserved", len(closed), unserved)
    return [rec for r in results for rec in r.records]


def _day_stream(seed, i):
    from .engine import Streams, replication_seed

    return Streams.from_seed(replication_seed(seed, i)).day


# ---------------------------------------------------------------- built-in scenarios

# single-item visit shares by group and the top items of the catalog
_ITEMS = {
    "A": (0.2950, "P6"), "B": (0.1050, "P6"), "C": (0.0850, "P6"), "D": (0.0760, "P6"),
    "E": (0.0640, "P6"), "I": (0.0390, "P6"), "K": (0.0800, "P6"), "L": (0.0650, "P6"),
    "M": (0.0415, "P6"), "F": (0.0316, "P1"), "H": (0.0224, "P3"), "G": (0.0150, "P4"),
    "J": (0.0214, "P5"),
}

_AGE_ADULT = [[0.8, 33.0, 8.0], [0.2, 55.0, 12.0]]


def _groups(scale=1.0):
    """Service means in seconds; ``scale`` stretches every group alike."""
    return {
        "P1": GroupSpec(420 * scale, 0.45, {"R2": 1.0}, 1.0, [[1.0, 34.0, 7.0]], {"gynecology": 1.0}),
        "P2": GroupSpec(660 * scale, 0.6, {"R1": 0.35, "R2": 0.15, "R3": 0.2, "R4": 0.3}, 0.75, _AGE_ADULT,
                        {"gynecology": 0.5, "internal": 0.3, "surgery": 0.2}),
        "P3": GroupSpec(540 * scale, 0.35, {"R1": 0.2, "R2": 0.1, "R3": 0.6, "R4": 0.1}, 1.0, [[1.0, 30.0, 4.0]],
                        {"obstetrics": 1.0}),
        "P4": GroupSpec(1080 * scale, 0.3, {"R3": 1.0}, 1.0, [[1.0, 30.0, 4.0]], {"obstetrics": 1.0}),
        "P5": GroupSpec(780 * scale, 0.4, {"R1": 0.1, "R2": 0.1, "R3": 0.1, "R4": 0.7}, 0.45,
                        [[0.3, 6.0, 4.0], [0.7, 58.0, 14.0]], {"cardiology": 1.0}),
        "P6": GroupSpec(300 * scale, 0.5, {"R1": 0.45, "R2": 0.15, "R3": 0.15, "R4": 0.25}, 0.7, _AGE_ADULT,
                        {"gynecology": 0.4, "internal": 0.3, "surgery": 0.2, "pediatrics": 0.1}),
    }


_WEEKDAY_CURVE = [0.9, 1.35, 1.3, 1.15, 0.85, 0.6, 0.9, 1.0, 0.95, 0.6]
_WEEKEND_CURVE = [0.8, 1.1, 1.1, 1.0, 0.8, 0.6, 0.8, 0.8, 0.7, 0.5]


def large_scenario() -> SynthScenario:
    """31 rooms in the four observed types, about 480 visits on an average weekday."""
    types = {
        "R1": RoomTypeSpec([1, 2, 3, 4, 5, 6, 7, 8, 10, 12], 1.0, {"weekday": 0.9, "weekend": 0.5}, 0.25, 90.0, 0.4, 35.0),
        "R2": RoomTypeSpec([9, 11, 13, 14, 29], 1.1, {"weekday": 0.85, "weekend": 0.4}, 0.3, 120.0, 0.4, 45.0),
        "R3": RoomTypeSpec([17, 18, 20, 26, 27, 28, 30], 1.2, {"weekday": 0.8, "weekend": 0.4}, 0.3, 150.0, 0.5, 50.0),
        "R4": RoomTypeSpec([15, 16, 19, 21, 22, 23, 24, 25, 31], 0.95, {"weekday": 0.75, "weekend": 0.3}, 0.2, 100.0, 0.35, 40.0),
    }
    return SynthScenario(
        items=dict(_ITEMS), groups=_groups(1.15), room_types=types,
        arrival_rates={"weekday": [48.0 * v for v in _WEEKDAY_CURVE], "weekend": [22.0 * v for v in _WEEKEND_CURVE]},
        multi_item_prob=0.1748, queue_sensitivity=0.6,
    )


def compact_scenario() -> SynthScenario:
    """Twelve rooms, three per type, about 250 visits on a weekday: the closed-loop test bed."""
    types = {
        "R1": RoomTypeSpec([1, 2, 3], 1.0, {"weekday": 0.95, "weekend": 0.7}, 0.25, 90.0, 0.4, 35.0),
        "R2": RoomTypeSpec([4, 5, 6], 1.1, {"weekday": 0.9, "weekend": 0.6}, 0.3, 120.0, 0.4, 45.0),
        "R3": RoomTypeSpec([7, 8, 9], 1.2, {"weekday": 0.9, "weekend": 0.6}, 0.3, 150.0, 0.5, 50.0),
        "R4": RoomTypeSpec([10, 11, 12], 0.95, {"weekday": 0.9, "weekend": 0.6}, 0.2, 100.0, 0.35, 40.0),
    }
    return SynthScenario(
        items=dict(_ITEMS), groups=_groups(1.5), room_types=types,
        arrival_rates={"weekday": [30.0 * v for v in _WEEKDAY_CURVE], "weekend": [18.0 * v for v in _WEEKEND_CURVE]},
        multi_item_prob=0.1748, queue_sensitivity=0.6,
    )


SCENARIOS = {"large": large_scenario, "compact": compact_scenario}
