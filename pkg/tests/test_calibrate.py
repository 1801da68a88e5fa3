import dataclasses

import numpy as np
import pytest

from ultraqueue import calibrate, classify, engine
from ultraqueue.calibrate import (CalibrationConfig, CalibrationError, ServiceTable, estimate_gaps,
                                  estimate_open_patterns, overlapped_hours)
from ultraqueue.eventlog import PatientRecord

SINGLE = classify.ItemGroupModel(None, {"item": "P6"}, ("P2", "P6"), fallback_group="P6")


def queue_log(rate, n_days, service=60, seed=0, n_rooms=1, horizon=(7, 17)):
    world = engine.QueueWorld(rate, service, n_rooms, horizon)
    days = engine.run_world_replications(world, engine.SimConfig(n_replications=n_days, seed=seed))
    return [r for d in days for r in d.records]


def rec(room, arrival, start, end, day="2018-03-12", items=("item",), pid=None):
    return PatientRecord(pid or f"p{room}-{arrival}", "female", 30.0, "d", items, arrival, start, end, room, None, day)


def test_arrival_rate_recovered():
    log = queue_log(6.0, 200)
    classes = classify.build_patient_classes(SINGLE, log)
    table = calibrate.estimate_arrival_rates(log, classes, SINGLE)
    key = classes[0].key
    for kind in table.kinds:
        n = table.n_days[kind]
        rates = np.array(table.curves(kind)[key])
        # each hourly rate is a mean of n Poisson(6) counts
        assert np.all(np.abs(rates - 6.0) <= 3 * np.sqrt(6.0 / n))
        assert abs(rates.mean() - 6.0) <= 3 * np.sqrt(6.0 / (n * len(rates)))


def test_overlapped_hours():
    h = 3600
    assert list(overlapped_hours(8 * h, 8 * h + 60)) == [8]
    assert list(overlapped_hours(8 * h + 3000, 10 * h)) == [8, 9]
    assert list(overlapped_hours(8 * h + 3000, 10 * h + 1)) == [8, 9, 10]
    assert list(overlapped_hours(9 * h, 9 * h)) == [9]


def test_open_patterns_from_services():
    h = 3600
    log = [rec(1, 8 * h, 8 * h + 100, 9 * h + 10), rec(2, 15 * h, 15 * h, 15 * h + 60),
           rec(1, 16 * h, 16 * h + 3000, 17 * h + 500, day="2018-03-17")]
    lib = estimate_open_patterns(log, rooms=[1, 2, 3])
    mon, sat = lib.get("2018-03-12"), lib.get("2018-03-17")
    assert mon.open_hours == {1: (8, 9), 2: (15,), 3: ()}
    assert sat.day_kind == "weekend" and sat.open_hours[1] == (16,)  # hour 17 is past the horizon
    assert mon.is_open(1, 9) and not mon.is_open(3, 9)
    again = calibrate.OpenPatternLibrary.from_dict(lib.to_dict())
    assert again == lib


def test_service_fallback_levels():
    room_type = {1: "R1", 2: "R1", 3: "R2"}
    table = ServiceTable({(1, 8, "c"): (100,), (2, 9, "c"): (200, 300), (3, 10, "d"): (50,)}, room_type)
    assert table.lookup(1, 8, "c") == (1, (100,))
    assert table.lookup(2, 8, "c") == (2, (100,))
    assert table.lookup(1, 12, "c") == (3, (100, 200, 300))
    assert table.lookup(3, 8, "c") == (4, (100, 200, 300))
    with pytest.raises(LookupError):
        table.lookup(1, 8, "missing")


def test_exponential_service_mean():
    log = queue_log(4.0, 60, service=lambda rng: int(round(rng.exponential(600))), n_rooms=5)
    classes = classify.build_patient_classes(SINGLE, log)
    table = calibrate.estimate_service_table(log, classes, SINGLE, {r: "R1" for r in range(1, 6)})
    pooled = table.sample(1, 99, classes[0].key)  # an unseen hour falls back to the type pool
    assert abs(np.mean(pooled) / 600 - 1) < 0.10


def test_gap_extraction_by_hand():
    b = 8 * 3600
    log = [
        rec(1, b + 100, b + 100, b + 200),
        rec(1, b + 150, b + 230, b + 300),  # busy handoff, 30 s break
        rec(1, b + 280, b + 305, b + 350),  # busy handoff, 5 s is below threshold
        rec(1, b + 400, b + 420, b + 500),  # idle start, 20 s walk
        rec(1, b + 600, b + 605, b + 700),  # idle start, 5 s is not a walk
        rec(2, b + 100, b + 100, b + 200),  # another room, single visit
    ]
    gaps = estimate_gaps(log, {1: "R1", 2: "R1"}, threshold=10)
    assert gaps.breaks == {("R1", 8): (30,)}
    assert gaps.handoffs == {("R1", 8): 2}
    assert gaps.walks == {("R1", 8): (20,)}
    assert gaps.idle_starts == {("R1", 8): 2}
    assert gaps.break_prob("R1", 8) == 0.5 and gaps.walk_prob("R1", 8) == 0.5
    assert gaps.break_prob("R1", 12) == 0.5  # pooled over the type
    assert gaps.break_prob("R2", 8) == 0.0
    assert gaps.break_sample("R2", 8) == (30,)
    assert calibrate.GapModel.from_dict(gaps.to_dict()) == gaps


def test_model_shapes(small_model):
    m = small_model
    assert len(m.arrivals.hours) == 10
    for kind in m.arrivals.kinds:
        curves = m.arrivals.curves(kind)
        assert set(curves) == {c.key for c in m.classes}
        assert all(len(v) == 10 for v in curves.values())
    assert set(m.room_types.room_type) == set(m.rooms)
    assert m.routing is not None and len(m.routing.report) == 10


def test_model_round_trip(small_model):
    text = calibrate.dumps_model(small_model)
    assert calibrate.dumps_model(calibrate.loads_model(text)) == text


def test_calibration_is_deterministic(small_log):
    config = CalibrationConfig(seed=5, gmm_n_init=2, train_routing=False)
    a = calibrate.dumps_model(calibrate.build_model(small_log, config))
    b = calibrate.dumps_model(calibrate.build_model(small_log, config))
    assert a == b


def test_config_round_trip():
    config = CalibrationConfig(seed=9, horizon=(8, 16), rooms=(1, 2, 3))
    assert CalibrationConfig.from_dict(config.to_dict()) == config


def test_calibration_errors(small_log):
    with pytest.raises(CalibrationError):
        calibrate.build_model([], CalibrationConfig(train_routing=False))
    zero = [dataclasses.replace(r, service_end_ts=r.service_start_ts) for r in small_log]
    with pytest.raises(CalibrationError):
        calibrate.build_model(zero, CalibrationConfig(train_routing=False, gmm_n_init=1))
