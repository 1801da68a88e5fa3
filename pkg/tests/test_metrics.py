import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ultraqueue import metrics
from ultraqueue.eventlog import PatientRecord

H = 3600


def rec(arrival, start, end=None, room=1, day="2018-03-12", pid=None):
    end = start + 60 if end is None else end
    return PatientRecord(pid or f"p{arrival}-{room}", "female", 30.0, "d", ("A",), arrival, start, end, room, None, day)


def test_half_hour_wait_is_half_a_patient():
    curve = metrics.queue_length_curve([rec(9 * H, 9 * H + 1800)])
    assert curve.values[2] == 0.5
    assert sum(curve.values) == 0.5 and curve.n_days == 1


def test_no_waiting_gives_zero_curve():
    curve = metrics.queue_length_curve([rec(8 * H, 8 * H), rec(10 * H, 10 * H)])
    assert curve.values == [0.0] * 10


def test_curve_averages_over_days():
    log = [rec(9 * H, 10 * H), rec(9 * H, 9 * H, day="2018-03-13")]
    assert metrics.queue_length_curve(log).values[2] == 0.5


@given(st.lists(st.tuples(st.integers(6 * H, 18 * H), st.integers(0, 3 * H)), max_size=30))
@settings(max_examples=200, deadline=None)
def test_step_integral_equals_overlap_sum(spans):
    iv = np.array([(a, a + d) for a, d in spans], dtype=np.int64).reshape(-1, 2)
    hours = list(range(7, 17))
    got = metrics._interval_seconds(iv, hours)
    want = [sum(max(0, min(b, (h + 1) * H) - max(a, h * H)) for a, b in iv) for h in hours]
    assert got.tolist() == want


def test_ks_examples():
    assert metrics.ks_two_sample([1, 2], [1, 3]) == 0.5
    assert metrics.ks_two_sample([1, 2], [5, 6]) == 1.0
    assert metrics.ks_two_sample([4, 1, 1], [4, 1, 1]) == 0.0
    with pytest.raises(ValueError):
        metrics.ks_two_sample([], [1])


@given(st.lists(st.integers(0, 50), min_size=1, max_size=60), st.lists(st.integers(0, 50), min_size=1, max_size=60))
@settings(max_examples=100, deadline=None)
def test_ks_symmetric_and_bounded(x, y):
    d = metrics.ks_two_sample(x, y)
    assert d == metrics.ks_two_sample(y, x)
    assert 0.0 <= d <= 1.0


ROOM_TYPE = {1: "R1", 2: "R1", 3: "R2", 4: "R2"}


def sample_log(seed, n_days=3):
    rng = np.random.default_rng(seed)
    out = []
    for d in range(n_days):
        for i in range(40):
            a = int(rng.integers(7 * H, 17 * H))
            s = a + int(rng.integers(0, 1800))
            out.append(rec(a, s, s + 300, room=int(rng.integers(1, 5)), day=f"2018-03-{12 + d}", pid=f"{d}-{i}"))
    return out


def test_self_comparison_is_zero():
    log = sample_log(0)
    rep = metrics.compare(log, log, ROOM_TYPE)
    assert rep.ks_wait == 0.0
    assert rep.diff_mean_queue_length == 0.0 and rep.diff_mean_wait == 0.0
    assert all(d.abs_diff == 0 for d in rep.routing_by_type + rep.routing_by_room)


def test_relative_and_absolute_agree():
    rep = metrics.compare(sample_log(1), sample_log(2), ROOM_TYPE)
    for d in rep.routing_by_room:
        if d.rel_diff is not None:
            assert d.abs_diff == pytest.approx(d.rel_diff * d.ref)
    assert rep.rel_diff_mean_wait * rep.mean_wait_ref == pytest.approx(rep.diff_mean_wait)
    assert len(rep.routing_by_type) == 20 and len(rep.routing_by_room) == 40


def test_routed_counts_are_per_day_means():
    sim = [rec(9 * H, 9 * H, room=1), rec(9 * H + 5, 9 * H + 5, room=1, pid="b")]
    ref = [rec(9 * H, 9 * H, room=1), rec(9 * H, 9 * H, room=3, day="2018-03-13")]
    rep = metrics.compare(sim, ref, ROOM_TYPE)
    cell = next(d for d in rep.routing_by_room if d.key == (1, 9))
    assert (cell.sim, cell.ref, cell.rel_diff) == (2.0, 0.5, 3.0)
    empty = next(d for d in rep.routing_by_room if d.key == (2, 9))
    assert empty.rel_diff is None
    assert any("undefined" in n for n in rep.notes)


def test_render_report_files_and_determinism():
    rep = metrics.compare(sample_log(3), sample_log(4), ROOM_TYPE)
    files = metrics.render_report(rep)
    assert files == metrics.render_report(metrics.compare(sample_log(3), sample_log(4), ROOM_TYPE))
    assert set(files) == {"summary.csv", "routing_by_type.csv", "routing_by_room.csv",
                          "queue_length.csv", "wait_histogram.csv"}
    assert len(files["routing_by_room.csv"].splitlines()) == 41
    rows = [line.split(",") for line in files["wait_histogram.csv"].splitlines()[1:]]
    assert sum(int(r[2]) for r in rows) == len(rep.wait_sim)
    assert sum(int(r[3]) for r in rows) == len(rep.wait_ref)
    blank = [line for line in files["routing_by_room.csv"].splitlines() if line.endswith(",")]
    assert all(line.split(",")[3] == "0.0" for line in blank)  # undefined relative diff only where ref is 0


def test_wait_histogram_bins():
    edges, counts = metrics.wait_histogram([0, 299, 300, 900], bin_width=5)
    assert edges.tolist() == [0, 5, 10, 15, 20] and counts.tolist() == [2, 1, 0, 1]


def test_compare_needs_data():
    with pytest.raises(ValueError):
        metrics.compare([], sample_log(0), ROOM_TYPE)
