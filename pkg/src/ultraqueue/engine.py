"""Discrete-event simulation of one ultrasound day and replications of it.

A *world* supplies everything stochastic or learned: which rooms open when,
who arrives, where they are routed, and how long services, breaks and walks
take. :class:`ModelWorld` wraps a calibrated model; the synthetic generator
and the analytic test fixtures provide their own worlds.
"""

from __future__ import annotations

import datetime as dt
import heapq
import logging
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from .eventlog import PatientRecord, day_kind_of, weekday_of

log = logging.getLogger(__name__)

# event kinds double as same-second priorities
END_SERVICE, END_BREAK, ROOM_OPEN, ARRIVAL, BEGIN_SERVICE, ROOM_CLOSE, END_OF_DAY = range(7)
EVENT_NAMES = ("end_service", "end_break", "room_open", "arrival", "begin_service", "room_close", "end_of_day")

IDLE, PENDING, BREAK, BUSY = range(4)


class Patient:
    __slots__ = ("pid", "arrival", "klass", "group", "age", "gender", "department", "exam_items",
                 "start", "end", "room", "walk")

    def __init__(self, pid, arrival, klass="", group="", age=0.0, gender="female", department="",
                 exam_items=("item",)):
        self.pid = pid
        self.arrival = int(arrival)
        self.klass = klass
        self.group = group
        self.age = age
        self.gender = gender
        self.department = department
        self.exam_items = tuple(exam_items)
        self.start = self.end = self.room = None
        self.walk = 0

    def __repr__(self):
        return f"Patient({self.pid!r}, arrival={self.arrival}, room={self.room})"


class RoomState:
    """One exam room. ``current`` is the patient walking in, waiting out a break, or in service."""

    __slots__ = ("room_id", "open", "phase", "current", "queue")

    def __init__(self, room_id):
        self.room_id = room_id
        self.open = False
        self.phase = IDLE
        self.current = None
        self.queue = deque()

    @property
    def waiting(self) -> int:
        return len(self.queue) + (self.current is not None and self.phase != BUSY)

    @property
    def status(self) -> str:
        if self.phase == BUSY:
            return "busy"
        if self.phase == BREAK:
            return "on_break"
        return "idle" if self.open else "closed"


class SimState:
    def __init__(self, rooms: Sequence[int], weekday: int):
        self.clock = 0
        self.weekday = weekday
        self.rooms = {r: RoomState(r) for r in rooms}
        self.holding: list[Patient] = []
        self.completed: list[Patient] = []
        self.n_arrived = 0

    @property
    def hour(self) -> int:
        return self.clock // 3600

    def waiting(self, room: int) -> int:
        return self.rooms[room].waiting

    def occupancy(self, room: int) -> int:
        rs = self.rooms[room]
        return len(rs.queue) + (rs.current is not None)

    def is_open(self, room: int) -> bool:
        return self.rooms[room].open

    def census(self) -> tuple[int, int, int, int]:
        """(completed, queued, with a room, holding) for conservation checks."""
        queued = sum(len(rs.queue) for rs in self.rooms.values())
        current = sum(rs.current is not None for rs in self.rooms.values())
        return len(self.completed), queued, current, len(self.holding)


class World(Protocol):
    rooms: Sequence[int]
    horizon: tuple[int, int]

    def plan_day(self, day_id: str, rng) -> dict[int, tuple[int, ...]]: ...
    def arrivals(self, day_id: str, rng) -> list[Patient]: ...
    def route(self, state: SimState, patient: Patient, rng) -> int | None: ...
    def service_time(self, room: int, t: int, patient: Patient, rng) -> int: ...
    def break_time(self, room: int, t: int, rng) -> int: ...
    def walk_time(self, room: int, t: int, rng) -> int: ...


class Streams(NamedTuple):
    day: np.random.Generator
    arrival: np.random.Generator
    routing: np.random.Generator
    service: np.random.Generator
    gap: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "Streams":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(5)))


@dataclass
class DayResult:
    day_id: str
    records: list[PatientRecord]
    unserved: list[Patient] = field(default_factory=list)
    n_arrivals: int = 0
    seed: list[int] | None = None


def open_close_events(open_hours: dict[int, Sequence[int]]) -> list[tuple[int, int, int]]:
    """(time, kind, room) transitions for runs of consecutive open hours."""
    out = []
    for room in sorted(open_hours):
        hours = sorted(set(open_hours[room]))
        i = 0
        while i < len(hours):
            j = i
            while j + 1 < len(hours) and hours[j + 1] == hours[j] + 1:
                j += 1
            out.append((hours[i] * 3600, ROOM_OPEN, room))
            out.append(((hours[j] + 1) * 3600, ROOM_CLOSE, room))
            i = j + 1
    return out


def run_day(world: World, day_id: str, streams: Streams, breaks: bool = True, walks: bool = True,
            observer: Callable[[int, SimState], None] | None = None) -> DayResult:
    """Simulate one day; the calendar runs until every routed patient has departed."""
    state = SimState(world.rooms, weekday_of(day_id))
    calendar: list = []
    seq = 0

    def schedule(t, kind, payload):
        nonlocal seq
        heapq.heappush(calendar, (t, kind, seq, payload))
        seq += 1

    for t, kind, room in open_close_events(world.plan_day(day_id, streams.day)):
        schedule(t, kind, room)
    schedule(world.horizon[1] * 3600, END_OF_DAY, None)
    arrivals = world.arrivals(day_id, streams.arrival)
    n_arr, ai = len(arrivals), 0

    def dispatch(p: Patient, room: int):
        rs = state.rooms[room]
        p.room = room
        if rs.current is None:
            rs.current, rs.phase = p, PENDING
            delay = world.walk_time(room, state.clock, streams.gap) if walks else 0
            p.walk = delay
            schedule(state.clock + delay, BEGIN_SERVICE, room)
        else:
            rs.queue.append(p)

    def try_route(p: Patient) -> bool:
        room = world.route(state, p, streams.routing)
        if room is None:
            return False
        if not state.rooms[room].open:
            raise RuntimeError(f"router picked closed room {room}")
        dispatch(p, room)
        return True

    while calendar or ai < n_arr:
        if ai < n_arr and (not calendar or (arrivals[ai].arrival, ARRIVAL) < calendar[0][:2]):
            p = arrivals[ai]
            ai += 1
            state.clock = p.arrival
            state.n_arrived += 1
            if not try_route(p):
                state.holding.append(p)
            if observer:
                observer(ARRIVAL, state)
            continue
        t, kind, _, payload = heapq.heappop(calendar)
        state.clock = t
        if kind == END_SERVICE:
            rs = state.rooms[payload]
            p = rs.current
            p.end = t
            state.completed.append(p)
            if rs.queue:
                rs.current = rs.queue.popleft()
                gap = world.break_time(payload, t, streams.gap) if breaks else 0
                if gap > 0:
                    rs.phase = BREAK
                    schedule(t + gap, END_BREAK, payload)
                else:
                    rs.phase = PENDING
                    schedule(t, BEGIN_SERVICE, payload)
            else:
                rs.current, rs.phase = None, IDLE
        elif kind == END_BREAK:
            state.rooms[payload].phase = PENDING
            schedule(t, BEGIN_SERVICE, payload)
        elif kind == BEGIN_SERVICE:
            rs = state.rooms[payload]
            rs.phase = BUSY
            p = rs.current
            p.start = t
            schedule(t + int(world.service_time(payload, t, p, streams.service)), END_SERVICE, payload)
        elif kind == ROOM_OPEN:
            state.rooms[payload].open = True
            if state.holding:
                still = []
                for p in state.holding:
                    if not try_route(p):
                        still.append(p)
                state.holding = still
        elif kind == ROOM_CLOSE:
            state.rooms[payload].open = False
        elif kind == END_OF_DAY:
            for rs in state.rooms.values():
                rs.open = False
        if observer:
            observer(kind, state)

    unserved = state.holding
    if unserved:
        log.info("%s: %d patients never found an open room", day_id, len(unserved))
    records = [_to_record(p, day_id) for p in sorted(state.completed, key=lambda p: (p.arrival, p.pid))]
    return DayResult(day_id, records, unserved, n_arr)


def _to_record(p: Patient, day_id: str) -> PatientRecord:
    return PatientRecord(
        patient_id=p.pid, gender=p.gender, age=float(p.age), department=p.department,
        exam_items=p.exam_items, arrival_ts=p.arrival, service_start_ts=p.start, service_end_ts=p.end,
        room_id=p.room, technician_id=None, day_id=day_id,
    )


# ---------------------------------------------------------------- arrivals


def thinning(rate: Sequence[float], hours: Sequence[int], rng) -> np.ndarray:
    """Integer arrival seconds of a piecewise-constant hourly-rate Poisson process."""
    rate = np.asarray(rate, dtype=float)
    lam_max = rate.max(initial=0.0)
    if lam_max <= 0:
        return np.zeros(0, dtype=np.int64)
    h0, n_hours = hours[0], len(hours)
    n = rng.poisson(lam_max * n_hours)
    t = np.sort(rng.uniform(0.0, n_hours, size=n))
    keep = rng.random(n) * lam_max < rate[np.minimum(t.astype(np.int64), n_hours - 1)]
    return (np.floor(t[keep] * 3600.0) + h0 * 3600).astype(np.int64)


def generate_arrivals(curves: dict[str, Sequence[float]], hours: Sequence[int], rng) -> list[tuple[int, str]]:
    """Merged (time, class) arrivals; class k uses the k-th stream spawned from ``rng``."""
    keys = sorted(curves)
    streams = rng.spawn(len(keys))
    times, labels = [], []
    for k, (key, sub) in enumerate(zip(keys, streams)):
        t = thinning(curves[key], hours, sub)
        times.append(t)
        labels.append(np.full(len(t), k))
    if not keys:
        return []
    t = np.concatenate(times)
    lab = np.concatenate(labels)
    order = np.lexsort((lab, t))
    return [(int(t[i]), keys[lab[i]]) for i in order]


# ---------------------------------------------------------------- calibrated world


class ModelWorld:
    """Simulation world driven by a calibrated model and a routing mode.

    ``mode`` is ``sample`` or ``argmax`` for the learned two-level policy, or
    ``jsq`` for join-shortest-queue over admissible room types.
    """

    def __init__(self, model, policy=None, mode: str = "sample"):
        from .routing import jsq_route, route

        self.model = model
        self.rooms = list(model.rooms)
        self.horizon = tuple(model.horizon)
        self.hours = list(range(*self.horizon))
        self.mode = mode
        self.room_type = dict(model.room_types.room_type)
        self.members = {t: model.room_types.members[t] for t in model.room_types.types}
        if mode == "jsq":
            elig = dict(model.eligibility)
            self._route = lambda s, p, rng: jsq_route(s, p, self.members, elig)
        else:
            policy = policy if policy is not None else model.routing
            if policy is None:
                raise ValueError("two-level routing needs a trained policy")
            policy = policy.with_mode(mode)
            self._route = lambda s, p, rng: route(policy, s, p, rng)
        self._profiles = model.profiles.rows

    def plan_day(self, day_id, rng):
        kind = day_kind_of(day_id)
        pool = self.model.patterns.by_kind(kind)
        if not pool:
            log.warning("no historical %s patterns; sampling from all days", kind)
            pool = self.model.patterns.days
        return pool[int(rng.integers(len(pool)))].open_hours

    def arrivals(self, day_id, rng):
        kind = day_kind_of(day_id)
        curves = self.model.arrivals.curves(kind)
        if not curves:
            curves = self.model.arrivals.curves(self.model.arrivals.kinds[0])
        out = []
        stem = day_id.replace("-", "")
        for n, (t, key) in enumerate(generate_arrivals(curves, self.hours, rng)):
            group, _, gender = key.split("|")
            rows = self._profiles[key]
            age, dept, items = rows[int(rng.integers(len(rows)))]
            out.append(Patient(f"{stem}-{n:05d}", t, key, group, age, gender, dept, items))
        return out

    def route(self, state, patient, rng):
        return self._route(state, patient, rng)

    def service_time(self, room, t, patient, rng):
        xs = self.model.services.sample(room, t // 3600, patient.klass)
        return xs[int(rng.integers(len(xs)))]

    def break_time(self, room, t, rng):
        rtype, hour = self.room_type[room], t // 3600
        if rng.random() >= self.model.gaps.break_prob(rtype, hour):
            return 0
        xs = self.model.gaps.break_sample(rtype, hour)
        return xs[int(rng.integers(len(xs)))] if xs else 0

    def walk_time(self, room, t, rng):
        rtype, hour = self.room_type[room], t // 3600
        if rng.random() >= self.model.gaps.walk_prob(rtype, hour):
            return 0
        xs = self.model.gaps.walk_sample(rtype, hour)
        return xs[int(rng.integers(len(xs)))] if xs else 0


class QueueWorld:
    """A bank of always-open rooms fed by a homogeneous Poisson stream or a fixed arrival list.

    Routing is lowest-occupancy-lowest-id. Used for analytic checks.
    """

    def __init__(self, rate_per_hour: float = 0.0, service: Callable | int = 60, n_rooms: int = 1,
                 horizon=(0, 24), arrival_times: Sequence[int] | None = None):
        self.rooms = list(range(1, n_rooms + 1))
        self.horizon = tuple(horizon)
        self.rate = rate_per_hour
        self.service = service
        self.arrival_times = arrival_times

    def plan_day(self, day_id, rng):
        return {r: tuple(range(*self.horizon)) for r in self.rooms}

    def arrivals(self, day_id, rng):
        if self.arrival_times is not None:
            times = self.arrival_times
        else:
            times = thinning([self.rate] * (self.horizon[1] - self.horizon[0]), list(range(*self.horizon)), rng)
        return [Patient(f"q{n:07d}", t) for n, t in enumerate(times)]

    def route(self, state, patient, rng):
        return min((state.occupancy(r), r) for r in self.rooms if state.is_open(r))[1]

    def service_time(self, room, t, patient, rng):
        return self.service(rng) if callable(self.service) else self.service

    def break_time(self, room, t, rng):
        return 0

    def walk_time(self, room, t, rng):
        return 0


# ---------------------------------------------------------------- replications


@dataclass(frozen=True)
class SimConfig:
    n_replications: int = 1
    seed: int = 0
    mode: str = "sample"
    breaks: bool = True
    walks: bool = True
    start_date: str = "2030-01-07"
    day_ids: tuple[str, ...] | None = None
    threads: int = 1

    def __post_init__(self):
        if self.n_replications < 1:
            raise ValueError("n_replications must be >= 1")
        if self.mode not in ("sample", "argmax", "jsq"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def day_id(self, i: int) -> str:
        """Replication i simulates this calendar date (and hence weekday / weekend)."""
        if self.day_ids:
            return self.day_ids[i % len(self.day_ids)]
        return (dt.date.fromisoformat(self.start_date) + dt.timedelta(days=i)).isoformat()


def replication_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(i)])


def run_replication(world: World, config: SimConfig, i: int) -> DayResult:
    res = run_day(world, config.day_id(i), Streams.from_seed(replication_seed(config.seed, i)),
                  config.breaks, config.walks)
    res.seed = [int(config.seed), int(i)]
    return res


_WORKER_WORLD = None


def _init_worker(world):
    global _WORKER_WORLD
    _WORKER_WORLD = world


def _worker(args):
    config, i = args
    return run_replication(_WORKER_WORLD, config, i)


def run_world_replications(world: World, config: SimConfig) -> list[DayResult]:
    """Replication i depends only on (seed, i), so any thread count gives the same list."""
    idx = range(config.n_replications)
    threads = config.threads or os.cpu_count() or 1
    if threads <= 1 or config.n_replications == 1:
        return [run_replication(world, config, i) for i in idx]
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(world,)) as ex:
        return list(ex.map(_worker, [(config, i) for i in idx], chunksize=max(1, config.n_replications // (4 * threads))))


def run_replications(model, policy=None, config: SimConfig = SimConfig()) -> list[DayResult]:
    """Simulate ``config.n_replications`` independent days of a calibrated model."""
    return run_world_replications(ModelWorld(model, policy, config.mode), config)
