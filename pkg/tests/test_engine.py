import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ultraqueue import engine
from ultraqueue.calibrate import with_routing
from ultraqueue.engine import Patient, QueueWorld, SimConfig, Streams, run_day, run_world_replications

H = 3600


class ScriptWorld:
    """Fixed plan, arrival list and service times; routes to the lowest open room."""

    def __init__(self, arrivals, service=600, plan=None, rooms=(1,), horizon=(8, 10), brk=0, walk=0, route=None):
        self.rooms = list(rooms)
        self.horizon = horizon
        self.plan = plan or {r: tuple(range(*horizon)) for r in rooms}
        self.times = arrivals
        self.service = service
        self.brk, self.walk = brk, walk
        self._route = route

    def plan_day(self, day_id, rng):
        return self.plan

    def arrivals(self, day_id, rng):
        return [Patient(f"p{i:03d}", t) for i, t in enumerate(self.times)]

    def route(self, state, p, rng):
        if self._route:
            return self._route(state, p)
        return next((r for r in self.rooms if state.is_open(r)), None)

    def service_time(self, room, t, p, rng):
        return self.service(p) if callable(self.service) else self.service

    def break_time(self, room, t, rng):
        return self.brk

    def walk_time(self, room, t, rng):
        return self.walk


def day(world, observer=None, **kw):
    return run_day(world, "2018-03-12", Streams.from_seed(0), observer=observer, **kw)


def test_no_arrivals():
    res = day(ScriptWorld([]))
    assert res.records == [] and res.unserved == [] and res.n_arrivals == 0


def test_single_arrival():
    (r,) = day(ScriptWorld([8 * H + 5])).records
    assert (r.arrival_ts, r.service_start_ts, r.service_end_ts, r.room_id) == (8 * H + 5, 8 * H + 5, 8 * H + 605, 1)


def test_fcfs_single_room():
    times = [8 * H, 8 * H + 10, 8 * H + 20]
    recs = day(ScriptWorld(times)).records
    assert [r.service_start_ts for r in recs] == [8 * H, 8 * H + 600, 8 * H + 1200]


def test_walk_and_break_delays():
    times = [8 * H, 8 * H + 10]
    recs = day(ScriptWorld(times, brk=30, walk=20)).records
    assert recs[0].service_start_ts == 8 * H + 20  # idle room: walk
    assert recs[1].service_start_ts == recs[0].service_end_ts + 30  # queue behind: break
    recs = day(ScriptWorld(times, brk=30, walk=20), breaks=False, walks=False).records
    assert [r.service_start_ts for r in recs] == [8 * H, 8 * H + 600]


def test_holding_until_room_opens():
    plan = {1: (9,)}
    recs = day(ScriptWorld([8 * H + 100, 8 * H + 200], plan=plan)).records
    assert [r.service_start_ts for r in recs] == [9 * H, 9 * H + 600]


def test_close_drains_queue_and_unserved_are_reported():
    plan = {1: (8,)}
    res = day(ScriptWorld([8 * H + 3000, 8 * H + 3100, 9 * H + 10], plan=plan))
    assert [r.service_end_ts for r in res.records] == [8 * H + 3600, 8 * H + 4200]
    assert [p.pid for p in res.unserved] == ["p002"]


def test_router_picking_closed_room_is_an_error():
    w = ScriptWorld([8 * H], plan={1: (8,), 2: (9,)}, rooms=(1, 2), route=lambda s, p: 2)
    with pytest.raises(RuntimeError):
        day(w)


def test_open_close_events():
    ev = engine.open_close_events({1: (8, 9, 11), 2: ()})
    assert ev == [(8 * H, engine.ROOM_OPEN, 1), (10 * H, engine.ROOM_CLOSE, 1),
                  (11 * H, engine.ROOM_OPEN, 1), (12 * H, engine.ROOM_CLOSE, 1)]


@given(st.lists(st.integers(0, 2 * H - 1), max_size=40), st.integers(1, 900), st.integers(0, 60),
       st.integers(0, 60), st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_conservation_and_order(offsets, service, brk, walk, n_rooms):
    times = sorted(8 * H + o for o in offsets)
    rooms = tuple(range(1, n_rooms + 1))
    w = ScriptWorld(times, service, rooms=rooms, brk=brk, walk=walk,
                    route=lambda s, p: min(rooms, key=lambda r: (s.occupancy(r), r)))
    clocks = []

    def obs(kind, state):
        done, queued, current, holding = state.census()
        assert done + queued + current + holding == state.n_arrived
        clocks.append(state.clock)

    res = day(w, observer=obs)
    assert np.all(np.diff(clocks) >= 0)
    assert len(res.records) == len(times)
    for room in rooms:
        mine = sorted((r for r in res.records if r.room_id == room), key=lambda r: r.service_start_ts)
        assert [r.arrival_ts for r in mine] == sorted(r.arrival_ts for r in mine)  # FCFS per room
        for a, b in zip(mine, mine[1:]):
            assert b.service_start_ts >= a.service_end_ts
    for r in res.records:
        assert r.service_end_ts - r.service_start_ts == service
        assert 0 <= r.wait


@given(st.dictionaries(st.sampled_from("abcd"), st.lists(st.floats(0, 30), min_size=3, max_size=3), max_size=4),
       st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_generate_arrivals_merges_sorted(curves, seed):
    out = engine.generate_arrivals(curves, [8, 9, 10], np.random.default_rng(seed))
    assert out == sorted(out, key=lambda x: (x[0], sorted(curves).index(x[1])))
    assert all(8 * H <= t < 11 * H for t, _ in out)
    # each class stream is the same as thinning with its own spawned generator
    subs = np.random.default_rng(seed).spawn(len(curves))
    for key, sub in zip(sorted(curves), subs):
        mine = [t for t, k in out if k == key]
        assert mine == engine.thinning(curves[key], [8, 9, 10], sub).tolist()


def test_thinning_zero_rate():
    assert len(engine.thinning([0, 0], [8, 9], np.random.default_rng(0))) == 0


def test_replications_are_reproducible():
    w = QueueWorld(20.0, lambda rng: int(rng.exponential(120)) + 1, 2, (8, 12))
    cfg = SimConfig(n_replications=4, seed=9)
    a = run_world_replications(w, cfg)
    b = run_world_replications(w, cfg)
    assert [x.records for x in a] == [x.records for x in b]
    assert [x.day_id for x in a] == ["2030-01-07", "2030-01-08", "2030-01-09", "2030-01-10"]
    assert a[0].records != a[1].records
    one = engine.run_replication(w, cfg, 2)
    assert one.records == a[2].records and one.seed == [9, 2]


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_replications=0)
    with pytest.raises(ValueError):
        SimConfig(mode="fifo")
    assert SimConfig(day_ids=("2018-01-01", "2018-01-06")).day_id(3) == "2018-01-06"


def test_model_world_modes(small_model):
    cfg = SimConfig(n_replications=2, seed=1, mode="jsq")
    days = engine.run_replications(small_model, config=cfg)
    assert sum(len(d.records) for d in days) > 100
    assert all(r.service_start_ts >= r.arrival_ts for d in days for r in d.records)
    with pytest.raises(ValueError):
        engine.ModelWorld(with_routing(small_model, None), mode="sample")
