import string

import pytest
from hypothesis import given, settings, strategies as st

from ultraqueue.eventlog import (
    CSV_HEADER, LogFormatError, PatientRecord, RawRecordA, RawRecordB, dumps_log, format_hms,
    loads_log, merge_sources, parse_log, parse_hms, split_record,
)

HEADER = ",".join(CSV_HEADER) + "\n"


def row(arrival="08:00:00", start="08:12:30", end="08:19:00", room="3", pid="p1", items="A", age="30.0"):
    return f"{pid},female,{age},gyn,{items},{arrival},{start},{end},{room},t1,2018-03-14\n"


def test_accepted_record_arithmetic(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text(HEADER + row())
    parsed = parse_log(path)
    assert parsed.rejected == []
    (rec,) = parsed.records
    assert (rec.wait, rec.service, rec.room_id) == (750, 390, 3)
    assert rec.weekday == 2 and rec.day_kind == "weekday"


def test_start_before_arrival_rejected():
    parsed = loads_log(HEADER + row(start="07:59:00"))
    assert parsed.records == []
    assert parsed.rejected[0].row == 2
    assert "before arrival" in parsed.rejected[0].reason


def test_empty_file():
    assert loads_log("") == ([], [])
    assert loads_log(HEADER) == ([], [])


def test_malformed_row_names_row_and_field():
    with pytest.raises(LogFormatError) as e:
        loads_log(HEADER + row() + row(age="old"))
    assert e.value.row == 3 and e.value.field == "age"
    with pytest.raises(LogFormatError, match="row 2"):
        loads_log(HEADER + row(arrival="8h"))


def test_missing_timestamp_is_rejection():
    parsed = loads_log(HEADER + row(end="") + row(pid="p2"))
    assert [r.row for r in parsed.rejected] == [2]
    assert len(parsed.records) == 1


def test_room_outside_universe_rejected():
    parsed = loads_log(HEADER + row(room="40"))
    assert parsed.records == [] and "universe" in parsed.rejected[0].reason


def test_hms_beyond_midnight_round_trip():
    assert parse_hms("25:00:01") == 90001
    assert format_hms(90001) == "25:00:01"


def _a(pid="7", reg=8 * 3600, call=8 * 3600 + 720, report=8 * 3600 + 1140):
    return RawRecordA(pid, "gyn", ("A",), reg, call, report, day_id="2018-03-14")


def _b(pid="7", qs=8 * 3600, qe=8 * 3600 + 720, room=3):
    return RawRecordB(pid, "female", 30.0, "t1", room, qs, qe, day_id="2018-03-14")


def test_merge_exact_match():
    out = merge_sources([_a()], [_b()])
    (rec,) = out.records
    assert rec.service_end_ts == 8 * 3600 + 1140 and rec.room_id == 3


def test_merge_unmatched_and_ambiguous():
    out = merge_sources([_a(), _a(pid="8")], [_b(), _b(room=4)])
    assert out.records == []
    assert len(out.ambiguous_b) == 2 and len(out.ambiguous_a) == 1
    assert [a.patient_id for a in out.unmatched_a] == ["8"]


def test_merge_missing_report_rejected():
    out = merge_sources([_a(report=None)], [_b()])
    assert out.records == [] and out.rejected[0][1] == "missing report_generation_ts"


records_st = st.lists(
    st.builds(
        lambda pid, g, age, items, arr, w, s, room, day: PatientRecord(
            pid, g, age, "dept", tuple(sorted(set(items))), arr, arr + w, arr + w + s, room, None,
            f"2018-03-{day:02d}"),
        st.text(string.ascii_letters + string.digits, min_size=1, max_size=6),
        st.sampled_from(["female", "male"]),
        st.floats(0, 100, allow_nan=False),
        st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=3),
        st.integers(0, 80000), st.integers(0, 5000), st.integers(0, 5000),
        st.integers(1, 32), st.integers(1, 28),
    ),
    max_size=20,
)


@given(records_st)
@settings(max_examples=60, deadline=None)
def test_csv_round_trip(records):
    parsed = loads_log(dumps_log(records))
    assert parsed.rejected == []
    assert parsed.records == records


@given(records_st)
@settings(max_examples=60, deadline=None)
def test_merge_then_project_recovers_sources(records):
    keys = {(r.patient_id, r.day_id, r.arrival_ts, r.service_start_ts) for r in records}
    if len(keys) < len(records):
        records = list({(r.patient_id, r.day_id, r.arrival_ts, r.service_start_ts): r for r in records}.values())
    pairs = [split_record(r) for r in records]
    out = merge_sources([a for a, _ in pairs], [b for _, b in pairs])
    assert sorted(out.records, key=repr) == sorted(records, key=repr)
    back = [split_record(r) for r in out.records]
    assert sorted(back, key=repr) == sorted(pairs, key=repr)
