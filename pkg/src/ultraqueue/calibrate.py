"""Estimate arrival, availability, service and gap components from a log."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import classify
from .classify import ItemGroupModel, PatientClass, RoomTypeModel, class_of
from .eventlog import PatientRecord, day_kind_of, dumps_log, group_by_day, weekday_of
from .forest import FIRST_LEVEL, SECOND_LEVEL, Hyperparams

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DAY_KINDS = ("weekday", "weekend")


class CalibrationError(ValueError):
    pass


def hours_of(horizon: tuple[int, int]) -> list[int]:
    return list(range(horizon[0], horizon[1]))


# ---------------------------------------------------------------- arrivals


@dataclass
class ArrivalRateTable:
    """rates[class_key][day_kind] -> hourly rates over the horizon hours."""

    hours: list[int]
    rates: dict[str, dict[str, list[float]]]
    n_days: dict[str, int]

    def rate(self, class_key: str, kind: str, hour: int) -> float:
        return self.rates[class_key][kind][self.hours.index(hour)]

    @property
    def kinds(self) -> list[str]:
        return [k for k in DAY_KINDS if self.n_days.get(k, 0) > 0]

    def curves(self, kind: str) -> dict[str, list[float]]:
        return {c: v[kind] for c, v in self.rates.items() if kind in v}

    def to_dict(self):
        return {"hours": self.hours, "n_days": self.n_days, "rates": self.rates}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["hours"]), {c: dict(v) for c, v in d["rates"].items()}, dict(d["n_days"]))


def estimate_arrival_rates(records: Sequence[PatientRecord], classes: Sequence[PatientClass],
                           groups: ItemGroupModel, horizon=(7, 17)) -> ArrivalRateTable:
    """Arrivals per (class, day kind, hour) divided by the number of days of that kind."""
    hours = hours_of(horizon)
    days = {k: set() for k in DAY_KINDS}
    for r in records:
        days[r.day_kind].add(r.day_id)
    n_days = {k: len(v) for k, v in days.items()}
    for k, n in n_days.items():
        if n == 0:
            log.warning("no %s days in the log; %s rates absent", k, k)
    kinds = [k for k in DAY_KINDS if n_days[k]]
    counts = {c.key: {k: [0] * len(hours) for k in kinds} for c in classes}
    for r in records:
        h = r.arrival_ts // 3600
        if horizon[0] <= h < horizon[1]:
            counts[class_of(r, groups).key][r.day_kind][h - horizon[0]] += 1
    rates = {c: {k: [n / n_days[k] for n in v] for k, v in kv.items()} for c, kv in counts.items()}
    return ArrivalRateTable(hours, rates, n_days)


# ---------------------------------------------------------------- open patterns


@dataclass(frozen=True)
class DayPattern:
    day_id: str
    weekday: int
    day_kind: str
    open_hours: dict[int, tuple[int, ...]]

    def is_open(self, room: int, hour: int) -> bool:
        return hour in self.open_hours.get(room, ())


@dataclass
class OpenPatternLibrary:
    days: list[DayPattern]

    def by_kind(self, kind: str) -> list[DayPattern]:
        return [d for d in self.days if d.day_kind == kind]

    def get(self, day_id: str) -> DayPattern:
        for d in self.days:
            if d.day_id == day_id:
                return d
        raise KeyError(day_id)

    def to_dict(self):
        return [{"day_id": d.day_id, "open_hours": {str(r): list(h) for r, h in d.open_hours.items()}}
                for d in self.days]

    @classmethod
    def from_dict(cls, items):
        return cls([_pattern(x["day_id"], {int(r): tuple(h) for r, h in x["open_hours"].items()}) for x in items])


def _pattern(day_id, open_hours):
    return DayPattern(day_id, weekday_of(day_id), day_kind_of(day_id), open_hours)


def overlapped_hours(start: int, end: int) -> range:
    """Clock hours whose interval [h, h+1) meets the service interval."""
    first = start // 3600
    last = (end - 1) // 3600 if end > start else first
    return range(first, last + 1)


def estimate_open_patterns(records: Iterable[PatientRecord], rooms: Sequence[int], horizon=(7, 17)) -> OpenPatternLibrary:
    hours = set(hours_of(horizon))
    days = []
    for day_id, recs in sorted(group_by_day(records).items()):
        open_hours = {room: set() for room in rooms}
        for r in recs:
            open_hours.setdefault(r.room_id, set()).update(overlapped_hours(r.service_start_ts, r.service_end_ts))
        days.append(_pattern(day_id, {room: tuple(sorted(h & hours)) for room, h in sorted(open_hours.items())}))
    return OpenPatternLibrary(days)


# ---------------------------------------------------------------- services


@dataclass
class ServiceTable:
    cells: dict[tuple[int, int, str], tuple[int, ...]]
    room_type: dict[int, str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _levels: tuple | None = field(default=None, repr=False, compare=False)

    def _build_levels(self):
        l2, l3, l4 = defaultdict(list), defaultdict(list), defaultdict(list)
        for (room, hour, c), xs in sorted(self.cells.items()):
            t = self.room_type[room]
            l2[(t, hour, c)].extend(xs)
            l3[(t, c)].extend(xs)
            l4[c].extend(xs)
        srt = lambda d: {k: tuple(sorted(v)) for k, v in d.items()}
        self._levels = (srt(l2), srt(l3), srt(l4))

    def lookup(self, room: int, hour: int, class_key: str) -> tuple[int, tuple[int, ...]]:
        """(fallback level 1..4, effective sample) for a queried cell."""
        key = (room, hour, class_key)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self._levels is None:
            self._build_levels()
        l2, l3, l4 = self._levels
        t = self.room_type.get(room)
        for level, sample in ((1, self.cells.get(key)), (2, l2.get((t, hour, class_key))),
                              (3, l3.get((t, class_key))), (4, l4.get(class_key))):
            if sample:
                self._cache[key] = (level, sample)
                return level, sample
        raise LookupError(f"no service observations for class {class_key}")

    def sample(self, room: int, hour: int, class_key: str) -> tuple[int, ...]:
        return self.lookup(room, hour, class_key)[1]

    def to_dict(self):
        return [[room, hour, c, list(xs)] for (room, hour, c), xs in sorted(self.cells.items())]

    @classmethod
    def from_dict(cls, rows, room_type):
        return cls({(int(r), int(h), c): tuple(xs) for r, h, c, xs in rows}, dict(room_type))


def estimate_service_table(records: Iterable[PatientRecord], classes: Sequence[PatientClass],
                           groups: ItemGroupModel, room_type: dict[int, str]) -> ServiceTable:
    cells = defaultdict(list)
    for r in records:
        if r.service <= 0:
            continue
        cells[(r.room_id, r.service_start_ts // 3600, class_of(r, groups).key)].append(r.service)
    seen = {c for (_, _, c) in cells}
    missing = [c.key for c in classes if c.key not in seen]
    if missing:
        raise CalibrationError(f"no positive service observations for class(es): {', '.join(missing)}")
    return ServiceTable({k: tuple(sorted(v)) for k, v in sorted(cells.items())}, dict(room_type))


# ---------------------------------------------------------------- breaks and walks


@dataclass
class GapModel:
    threshold: int
    breaks: dict[tuple[str, int], tuple[int, ...]]
    handoffs: dict[tuple[str, int], int]
    walks: dict[tuple[str, int], tuple[int, ...]]
    idle_starts: dict[tuple[str, int], int]
    _pooled: dict = field(default_factory=dict, repr=False, compare=False)

    def _pool(self, name, rtype):
        key = (name, rtype)
        if key not in self._pooled:
            table = getattr(self, name)
            if rtype is None:
                xs = [x for v in table.values() for x in v]
            else:
                xs = [x for (t, _), v in table.items() if t == rtype for x in v]
            self._pooled[key] = tuple(sorted(xs))
        return self._pooled[key]

    def break_prob(self, rtype: str, hour: int) -> float:
        n = self.handoffs.get((rtype, hour), 0)
        if n:
            return len(self.breaks.get((rtype, hour), ())) / n
        n = sum(v for (t, _), v in self.handoffs.items() if t == rtype)
        if n:
            return len(self._pool("breaks", rtype)) / n
        return 0.0

    def walk_prob(self, rtype: str, hour: int) -> float:
        n = self.idle_starts.get((rtype, hour), 0)
        if n:
            return len(self.walks.get((rtype, hour), ())) / n
        n = sum(v for (t, _), v in self.idle_starts.items() if t == rtype)
        if n:
            return len(self._pool("walks", rtype)) / n
        return 0.0

    def break_sample(self, rtype: str, hour: int) -> tuple[int, ...]:
        return self.breaks.get((rtype, hour)) or self._pool("breaks", rtype) or self._pool("breaks", None)

    def walk_sample(self, rtype: str, hour: int) -> tuple[int, ...]:
        return self.walks.get((rtype, hour)) or self._pool("walks", rtype) or self._pool("walks", None)

    def to_dict(self):
        enc = lambda d: [[t, h, list(v) if isinstance(v, tuple) else v] for (t, h), v in sorted(d.items())]
        return {"threshold": self.threshold, "breaks": enc(self.breaks), "handoffs": enc(self.handoffs),
                "walks": enc(self.walks), "idle_starts": enc(self.idle_starts)}

    @classmethod
    def from_dict(cls, d):
        dec = lambda rows, f: {(t, int(h)): f(v) for t, h, v in rows}
        return cls(d["threshold"], dec(d["breaks"], tuple), dec(d["handoffs"], int),
                   dec(d["walks"], tuple), dec(d["idle_starts"], int))


def estimate_gaps(records: Iterable[PatientRecord], room_type: dict[int, str], threshold: int = 10) -> GapModel:
    """Break and walk samples from consecutive services in each room and day.

    A pair (n, n+1) is a busy handoff when n+1 arrived no later than n ended;
    it records a break if the gap end(n) -> start(n+1) exceeds ``threshold``.
    Otherwise it is an idle start, recording a walk if start(n+1) - arrival(n+1)
    exceeds ``threshold``.
    """
    breaks, walks = defaultdict(list), defaultdict(list)
    handoffs, idle = defaultdict(int), defaultdict(int)
    by_room_day = defaultdict(list)
    for r in records:
        by_room_day[(r.room_id, r.day_id)].append(r)
    for (room, _), recs in sorted(by_room_day.items()):
        t = room_type[room]
        recs.sort(key=lambda r: (r.service_start_ts, r.service_end_ts))
        for prev, nxt in zip(recs, recs[1:]):
            if nxt.arrival_ts <= prev.service_end_ts:
                cell = (t, prev.service_end_ts // 3600)
                handoffs[cell] += 1
                gap = nxt.service_start_ts - prev.service_end_ts
                if gap > threshold:
                    breaks[cell].append(gap)
            else:
                cell = (t, nxt.arrival_ts // 3600)
                idle[cell] += 1
                gap = nxt.service_start_ts - nxt.arrival_ts
                if gap > threshold:
                    walks[cell].append(gap)
    srt = lambda d: {k: tuple(sorted(v)) for k, v in sorted(d.items())}
    return GapModel(threshold, srt(breaks), dict(sorted(handoffs.items())), srt(walks), dict(sorted(idle.items())))


# ---------------------------------------------------------------- class profiles


@dataclass
class ClassProfiles:
    """Observed (age, department, items) of each class, resampled for simulated patients."""

    rows: dict[str, list[tuple[float, str, tuple[str, ...]]]]

    def to_dict(self):
        return {c: [[a, d, list(i)] for a, d, i in v] for c, v in self.rows.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({c: [(float(a), dep, tuple(i)) for a, dep, i in v] for c, v in d.items()})


def estimate_profiles(records: Iterable[PatientRecord], groups: ItemGroupModel) -> ClassProfiles:
    rows = defaultdict(list)
    for r in records:
        rows[class_of(r, groups).key].append((r.age, r.department, r.exam_items))
    return ClassProfiles({c: sorted(v) for c, v in sorted(rows.items())})


# ---------------------------------------------------------------- model bundle


@dataclass(frozen=True)
class CalibrationConfig:
    horizon: tuple[int, int] = (7, 17)
    rooms: tuple[int, ...] | None = None
    n_item_clusters: int = 5
    n_room_types: int = 4
    gap_threshold: int = 10
    seed: int = 0
    gmm_max_iter: int = 300
    gmm_tol: float = 1e-8
    gmm_n_init: int = 10
    train_fraction: float = 0.8
    eligibility: dict[str, tuple[str, ...]] | None = None
    first_level: Hyperparams = FIRST_LEVEL
    second_level: dict[str, Hyperparams] = field(default_factory=lambda: dict(SECOND_LEVEL))
    train_routing: bool = True

    def to_dict(self):
        d = asdict(self)
        d["horizon"] = list(self.horizon)
        d["rooms"] = None if self.rooms is None else list(self.rooms)
        if self.eligibility is not None:
            d["eligibility"] = {g: list(v) for g, v in sorted(self.eligibility.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        d = dict(d)
        if "horizon" in d:
            d["horizon"] = tuple(d["horizon"])
        if d.get("rooms") is not None:
            d["rooms"] = tuple(d["rooms"])
        if d.get("eligibility") is not None:
            d["eligibility"] = {g: tuple(v) for g, v in d["eligibility"].items()}
        if isinstance(d.get("first_level"), dict):
            d["first_level"] = Hyperparams(**d["first_level"])
        if isinstance(d.get("second_level"), dict):
            d["second_level"] = {t: hp if isinstance(hp, Hyperparams) else Hyperparams(**hp)
                                 for t, hp in d["second_level"].items()}
        return cls(**d)


@dataclass
class CalibratedModel:
    horizon: tuple[int, int]
    rooms: list[int]
    item_groups: ItemGroupModel
    room_types: RoomTypeModel
    classes: list[PatientClass]
    arrivals: ArrivalRateTable
    patterns: OpenPatternLibrary
    services: ServiceTable
    gaps: GapModel
    profiles: ClassProfiles
    eligibility: dict[str, tuple[str, ...]]
    routing: object | None = None  # routing.RoutingPolicy
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        keys = {c.key for c in self.classes}
        if set(self.arrivals.rates) != keys:
            raise CalibrationError("arrival table classes differ from the class list")
        if set(self.profiles.rows) != keys:
            raise CalibrationError("class profiles differ from the class list")
        if set(self.room_types.room_type) != set(self.rooms):
            raise CalibrationError("room types do not cover the room universe")
        for d in self.patterns.days:
            stray = set(d.open_hours) - set(self.rooms)
            if stray:
                raise CalibrationError(f"day {d.day_id} references unknown rooms {sorted(stray)}")
        types = set(self.room_types.members)
        for g, ts in self.eligibility.items():
            if g not in self.item_groups.labels or not set(ts) <= types:
                raise CalibrationError(f"eligibility entry {g}: {ts} does not resolve")
        for c in self.classes:
            self.services.lookup(self.rooms[0], self.horizon[0], c.key)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "horizon": list(self.horizon),
            "rooms": list(self.rooms),
            "item_groups": self.item_groups.to_dict(),
            "room_types": self.room_types.to_dict(),
            "classes": [c.key for c in self.classes],
            "arrival_rates": self.arrivals.to_dict(),
            "open_patterns": self.patterns.to_dict(),
            "service_table": self.services.to_dict(),
            "gaps": self.gaps.to_dict(),
            "profiles": self.profiles.to_dict(),
            "eligibility": {g: list(v) for g, v in sorted(self.eligibility.items())},
            "routing": None if self.routing is None else self.routing.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedModel":
        from .routing import RoutingPolicy

        if d.get("schema_version") != SCHEMA_VERSION:
            raise CalibrationError(f"unsupported model schema_version {d.get('schema_version')!r}")
        room_types = RoomTypeModel.from_dict(d["room_types"])
        return cls(
            horizon=tuple(d["horizon"]),
            rooms=list(d["rooms"]),
            item_groups=ItemGroupModel.from_dict(d["item_groups"]),
            room_types=room_types,
            classes=[PatientClass.from_key(k) for k in d["classes"]],
            arrivals=ArrivalRateTable.from_dict(d["arrival_rates"]),
            patterns=OpenPatternLibrary.from_dict(d["open_patterns"]),
            services=ServiceTable.from_dict(d["service_table"], room_types.room_type),
            gaps=GapModel.from_dict(d["gaps"]),
            profiles=ClassProfiles.from_dict(d["profiles"]),
            eligibility={g: tuple(v) for g, v in d["eligibility"].items()},
            routing=None if d["routing"] is None else RoutingPolicy.from_dict(d["routing"]),
            provenance=d.get("provenance", {}),
        )


def dumps_model(model: CalibratedModel) -> str:
    return json.dumps(model.to_dict(), separators=(",", ":"))


def loads_model(text: str) -> CalibratedModel:
    return CalibratedModel.from_dict(json.loads(text))


def log_digest(records: Iterable[PatientRecord]) -> str:
    return hashlib.sha256(dumps_log(records).encode()).hexdigest()


def observed_eligibility(records: Iterable[PatientRecord], groups: ItemGroupModel, room_type: dict[int, str]):
    seen = defaultdict(set)
    for r in records:
        seen[groups.group_of(r.exam_items)].add(room_type[r.room_id])
    return {g: tuple(sorted(v, key=lambda s: int(s[1:]))) for g, v in sorted(seen.items())}


def build_model(records: Sequence[PatientRecord], config: CalibrationConfig = CalibrationConfig()) -> CalibratedModel:
    """Classify, estimate every component, train routing and cross-check the bundle."""
    records = list(records)
    if not records:
        raise CalibrationError("cannot calibrate from an empty log")
    rooms = list(config.rooms) if config.rooms is not None else sorted({r.room_id for r in records})
    try:
        feats = classify.item_features(records, rooms)
        k = config.n_item_clusters
        if len(feats.items) < k:
            log.warning("only %d items with >= 2 observations; using k=%d", len(feats.items), len(feats.items))
            k = len(feats.items)
        mixture = classify.fit_gmm(feats.matrix, k, seed=config.seed, max_iter=config.gmm_max_iter,
                                   tol=config.gmm_tol, n_init=config.gmm_n_init)
        groups = classify.assign_item_groups(mixture, feats, records)
        room_types = classify.cluster_rooms(records, config.n_room_types, rooms)
        classes = classify.build_patient_classes(groups, records)
    except (ValueError, RuntimeError) as e:
        raise CalibrationError(f"classification failed: {e}") from e
    rt = room_types.room_type
    eligibility = dict(config.eligibility) if config.eligibility else observed_eligibility(records, groups, rt)
    model = CalibratedModel(
        horizon=tuple(config.horizon),
        rooms=rooms,
        item_groups=groups,
        room_types=room_types,
        classes=classes,
        arrivals=estimate_arrival_rates(records, classes, groups, config.horizon),
        patterns=estimate_open_patterns(records, rooms, config.horizon),
        services=estimate_service_table(records, classes, groups, rt),
        gaps=estimate_gaps(records, rt, config.gap_threshold),
        profiles=estimate_profiles(records, groups),
        eligibility=eligibility,
        provenance={"log_sha256": log_digest(records), "n_records": len(records), "seed": config.seed,
                    "config": config.to_dict()},
    )
    if config.train_routing:
        from .routing import train_policy

        model.routing = train_policy(records, model, config.first_level, config.second_level,
                                     seed=config.seed, train_fraction=config.train_fraction)
    model.validate()
    return model


def with_routing(model: CalibratedModel, policy) -> CalibratedModel:
    return replace(model, routing=policy)
