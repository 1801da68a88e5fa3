import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ultraqueue import calibrate, forest as rf, routing, synth
from ultraqueue.engine import Patient, SimConfig, SimState, run_world_replications
from ultraqueue.routing import RoutingPolicy, extract_l1, jsq_route, route

from conftest import FAST_L1, FAST_L2

MEMBERS = {"R1": [1, 2], "R2": [3, 4]}
ROOM_TYPE = {1: "R1", 2: "R1", 3: "R2", 4: "R2"}


class Stub:
    """A forest stand-in returning fixed probabilities."""

    def __init__(self, classes, probs):
        self.classes = tuple(classes)
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, x):
        return self.probs.copy()


def state_with(open_rooms, queues=None, clock=9 * 3600, weekday=2, rooms=(1, 2, 3, 4)):
    s = SimState(list(rooms), weekday)
    s.clock = clock
    for r in open_rooms:
        s.rooms[r].open = True
    for r, n in (queues or {}).items():
        s.rooms[r].queue.extend(Patient(f"x{r}{i}", 0) for i in range(n))
    return s


def patient(group="P6", age=40.0):
    p = Patient("p", 9 * 3600)
    p.group, p.age = group, age
    return p


def policy(l1, l2=None, mode="sample", eligibility=None):
    return RoutingPolicy(l1, l2 or {}, dict(ROOM_TYPE), eligibility or {}, ("P1", "P6"), mode)


def test_extract_l1_sums_by_type():
    s = state_with([1, 3, 4], {1: 2, 2: 1, 4: 3})
    f = extract_l1(s, patient(), MEMBERS)
    assert f.queue_length_by_type == (3, 3)
    assert f.num_open_by_type == (1, 2)
    assert (f.arrival_hour, f.weekday) == (9, 2)
    pol = policy(None)
    v = pol.l1_vector(f)
    assert len(v) == len(routing.l1_schema(pol.groups, pol.types))
    assert v.tolist() == [40.0, 0, 1, 9, 0, 0, 1, 0, 0, 0, 0, 3, 3, 1, 2]


def test_single_open_room_skips_forests():
    boom = Stub(("R1", "R2"), [np.nan, np.nan])
    pol = policy(boom, {"R2": boom})
    assert route(pol, state_with([4]), patient(), np.random.default_rng(0)) == 4


def test_no_open_admissible_room():
    pol = policy(Stub(("R1", "R2"), [0.5, 0.5]), eligibility={"P1": ("R2",)})
    assert route(pol, state_with([1, 2]), patient("P1"), np.random.default_rng(0)) is None


def test_argmax_tie_goes_to_first_label():
    pol = policy(Stub(("R1", "R2"), [0.5, 0.5]), {"R1": Stub((1, 2), [0.5, 0.5])}, mode="argmax")
    assert route(pol, state_with([1, 2, 3, 4]), patient(), None) == 1


def test_closed_type_mass_is_renormalized():
    pol = policy(Stub(("R1", "R2"), [0.9, 0.1]), {"R2": Stub((3, 4), [0.0, 1.0])}, mode="argmax")
    assert route(pol, state_with([3, 4]), patient(), None) == 4
    pol = policy(Stub(("R1", "R2"), [1.0, 0.0]), {"R2": Stub((3, 4), [1.0, 0.0])}, mode="sample")
    rng = np.random.default_rng(0)
    # all level-2 mass on closed room 3: uniform over what is open
    assert {route(pol, state_with([1, 4]), patient("P6"), rng) for _ in range(50)} == {1}
    assert route(pol, state_with([4]), patient(), rng) == 4


def test_sample_frequencies():
    n = 100_000
    pol = policy(Stub(("R1", "R2"), [0.3, 0.7]), {"R1": Stub((1, 2), [1, 0]), "R2": Stub((3, 4), [1, 0])})
    rng = np.random.default_rng(1)
    s = state_with([1, 2, 3, 4])
    hits = sum(route(pol, s, patient(), rng) == 1 for _ in range(n))
    se = np.sqrt(0.3 * 0.7 / n)
    assert abs(hits / n - 0.3) < 3 * se


def test_masked():
    assert routing.masked([0.2, 0.8], [True, False]).tolist() == [1.0, 0.0]
    assert routing.masked([0.0, 1.0], [True, False]).tolist() == [1.0, 0.0]
    assert routing.masked([0.0, 1.0, 0.0], [True, False, True]).tolist() == [0.5, 0.0, 0.5]


def test_jsq_examples():
    s = state_with([1, 2, 3, 4], {1: 2, 2: 1, 3: 1, 4: 0})
    s.rooms[4].current = Patient("busy", 0)
    assert jsq_route(s, patient(), MEMBERS, {}) == 2  # 2, 3 and 4 all hold one; lowest id
    assert jsq_route(s, patient("P1"), MEMBERS, {"P1": ("R2",)}) == 3
    assert jsq_route(state_with([]), patient(), MEMBERS, {}) is None


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5), st.booleans()), min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_jsq_matches_brute_force(rooms):
    ids = list(range(1, len(rooms) + 1))
    s = state_with([r for r, (o, _, _) in zip(ids, rooms) if o], rooms=ids)
    for r, (_, q, busy) in zip(ids, rooms):
        s.rooms[r].queue.extend(Patient("q", 0) for _ in range(q))
        if busy:
            s.rooms[r].current = Patient("c", 0)
    open_ = [r for r in ids if s.is_open(r)]
    expect = min(open_, key=lambda r: (s.occupancy(r), r)) if open_ else None
    assert jsq_route(s, patient(), {"R1": ids}, {}) == expect


def open_scenario(beta=0.6):
    sc = synth.compact_scenario()
    for spec in sc.room_types.values():
        spec.open_prob = {"weekday": 1.0, "weekend": 1.0}
    sc.queue_sensitivity = beta
    return sc


def test_replay_matches_live_waiting_counts():
    sc = open_scenario()
    world = synth.ScenarioWorld(sc)
    seen = {}
    inner = world.route

    def spy(state, p, rng):
        seen[p.pid] = [state.waiting(r) for r in world.rooms]
        return inner(state, p, rng)

    world.route = spy
    days = run_world_replications(world, SimConfig(n_replications=3, seed=4, start_date=sc.start_date))
    for day in days:
        recs = sorted(day.records, key=lambda r: r.arrival_ts)
        q = routing.queues_at_arrival(recs, world.rooms)
        assert q.tolist() == [seen[r.patient_id] for r in recs]


def test_routing_never_picks_closed_or_inadmissible(small_model):
    pol = small_model.routing
    rng = np.random.default_rng(2)
    for k in range(300):
        opened = [r for r in small_model.rooms if rng.random() < 0.5]
        s = state_with(opened, {r: int(rng.integers(0, 4)) for r in opened}, rooms=small_model.rooms)
        g = pol.groups[k % len(pol.groups)]
        room = route(pol, s, patient(g), rng)
        ok = [r for r in opened if pol.room_type[r] in pol.admissible_types(g)]
        assert (room is None) == (not ok)
        if room is not None:
            assert room in ok


def test_report_and_round_trip(small_model):
    pol = small_model.routing
    models = {e["model"] for e in pol.report}
    assert models == {"room_type", "R1", "R2", "R3", "R4"}
    assert routing.evaluation_csv(pol).startswith("level,model,split,n,auc,accuracy\n")
    again = RoutingPolicy.from_dict(pol.to_dict())
    assert again.to_dict() == pol.to_dict()
    assert again.with_mode("argmax").mode == "argmax"
    with pytest.raises(ValueError):
        pol.with_mode("greedy")


def test_training_is_deterministic(small_log, small_model):
    a = routing.train_policy(small_log, small_model, FAST_L1, FAST_L2, seed=3)
    b = routing.train_policy(small_log, small_model, FAST_L1, FAST_L2, seed=3)
    assert a.to_dict() == b.to_dict()


def test_queue_blind_truth_gives_queue_blind_forest():
    sc = open_scenario(beta=0.0)
    sc.room_weights = {}
    log = synth.synthesize_log(sc, 40, seed=21)
    model = calibrate.build_model(log, calibrate.CalibrationConfig(seed=1, gmm_n_init=2, train_routing=False))
    pol = routing.train_policy(log, model, FAST_L1, FAST_L2, seed=1)
    rows = routing.replay_features(log, model)
    X, y = routing.level1_data(rows, pol)
    test = ~routing.split_mask(len(rows), 1, 0.8)
    imp = rf.permutation_importance(pol.level1, X[test], y[test], n_repeats=3, seed=0)
    assert max(imp, key=imp.get) == "item_group"
    assert abs(imp["queue_length"]) < 0.02
