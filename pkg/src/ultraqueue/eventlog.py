"""Patient event-log records, canonical CSV I/O and two-source merging.

Timestamps are integer seconds from local midnight of ``day_id`` (an ISO
calendar date such as ``2018-03-14``).
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

DEFAULT_ROOMS = tuple(range(1, 33))

CSV_HEADER = (
    "patient_id",
    "gender",
    "age",
    "department",
    "exam_items",
    "arrival_ts",
    "service_start_ts",
    "service_end_ts",
    "room_id",
    "technician_id",
    "day_id",
)

GENDERS = ("female", "male")


class LogFormatError(ValueError):
    """A log row could not be parsed at all."""

    def __init__(self, row: int, field_name: str, detail: str):
        super().__init__(f"row {row}: field {field_name!r}: {detail}")
        self.row = row
        self.field = field_name


def format_hms(t: int) -> str:
    h, rem = divmod(int(t), 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def parse_hms(text: str) -> int:
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ValueError(f"expected HH:MM:SS, got {text!r}")
    h, m, s = (int(p) for p in parts)
    if h < 0 or not (0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"out-of-range time {text!r}")
    return h * 3600 + m * 60 + s


def weekday_of(day_id: str) -> int:
    """Monday=0 ... Sunday=6."""
    return dt.date.fromisoformat(day_id[:10]).weekday()


def day_kind_of(day_id: str) -> str:
    return "weekend" if weekday_of(day_id) >= 5 else "weekday"


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    gender: str
    age: float
    department: str
    exam_items: tuple[str, ...]
    arrival_ts: int
    service_start_ts: int
    service_end_ts: int
    room_id: int
    technician_id: str | None
    day_id: str

    @property
    def wait(self) -> int:
        return self.service_start_ts - self.arrival_ts

    @property
    def service(self) -> int:
        return self.service_end_ts - self.service_start_ts

    @property
    def sojourn(self) -> int:
        return self.service_end_ts - self.arrival_ts

    @property
    def weekday(self) -> int:
        return weekday_of(self.day_id)

    @property
    def day_kind(self) -> str:
        return day_kind_of(self.day_id)

    def violations(self, rooms: Iterable[int] | None = DEFAULT_ROOMS) -> list[str]:
        """Names of violated invariants (empty when the record is valid)."""
        bad = []
        if not self.arrival_ts <= self.service_start_ts:
            bad.append("service_start_ts before arrival_ts")
        if not self.service_start_ts <= self.service_end_ts:
            bad.append("service_end_ts before service_start_ts")
        if rooms is not None and self.room_id not in set(rooms):
            bad.append(f"room_id {self.room_id} outside room universe")
        if not self.exam_items:
            bad.append("exam_items empty")
        if self.age < 0:
            bad.append("negative age")
        return bad


@dataclass(frozen=True)
class Rejection:
    row: int
    reason: str


@dataclass(frozen=True)
class RawRecordA:
    """Registration-system row: items, department and report timestamps."""

    patient_id: str
    department: str
    exam_items: tuple[str, ...]
    registration_ts: int
    service_calling_ts: int
    report_generation_ts: int | None
    report_verification_ts: int | None = None
    day_id: str = ""


@dataclass(frozen=True)
class RawRecordB:
    """Queue-system row: demographics, technician and room."""

    patient_id: str
    gender: str
    age: float
    technician_id: str | None
    room_id: int
    queue_start_ts: int
    queue_end_ts: int
    day_id: str = ""


@dataclass
class MergeResult:
    records: list[PatientRecord] = field(default_factory=list)
    unmatched_a: list[RawRecordA] = field(default_factory=list)
    unmatched_b: list[RawRecordB] = field(default_factory=list)
    ambiguous_a: list[RawRecordA] = field(default_factory=list)
    ambiguous_b: list[RawRecordB] = field(default_factory=list)
    rejected: list[tuple[RawRecordA, str]] = field(default_factory=list)


class ParsedLog(NamedTuple):
    records: list[PatientRecord]
    rejected: list[Rejection]


def _format_age(age: float) -> str:
    return repr(float(age))


def record_to_row(r: PatientRecord) -> list[str]:
    return [
        r.patient_id,
        r.gender,
        _format_age(r.age),
        r.department,
        ";".join(r.exam_items),
        format_hms(r.arrival_ts),
        format_hms(r.service_start_ts),
        format_hms(r.service_end_ts),
        str(r.room_id),
        r.technician_id or "",
        r.day_id,
    ]


def dumps_log(records: Iterable[PatientRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(record_to_row(r))
    return buf.getvalue()


def write_log(records: Iterable[PatientRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_log(records), encoding="utf-8", newline="\n")


def _row_to_record(rownum: int, row: dict[str, str]) -> PatientRecord | Rejection:
    def need(name):
        v = row.get(name)
        if v is None:
            raise LogFormatError(rownum, name, "missing column")
        return v.strip()

    def ts(name):
        v = need(name)
        try:
            return parse_hms(v)
        except ValueError as e:
            raise LogFormatError(rownum, name, str(e)) from None

    pid = need("patient_id")
    if not pid:
        raise LogFormatError(rownum, "patient_id", "empty")
    gender = need("gender").lower()
    if gender not in GENDERS:
        raise LogFormatError(rownum, "gender", f"unknown gender {gender!r}")
    try:
        age = float(need("age"))
    except ValueError:
        raise LogFormatError(rownum, "age", "not a number") from None
    if not age >= 0:
        raise LogFormatError(rownum, "age", "negative or NaN")
    items = tuple(i for i in need("exam_items").split(";") if i)
    if not items:
        raise LogFormatError(rownum, "exam_items", "empty item list")
    try:
        room = int(need("room_id"))
    except ValueError:
        raise LogFormatError(rownum, "room_id", "not an integer") from None
    day_id = need("day_id")
    try:
        weekday_of(day_id)
    except ValueError:
        raise LogFormatError(rownum, "day_id", f"not an ISO date: {day_id!r}") from None

    # a missing end timestamp is a data-quality rejection, not a format error
    missing = [n for n in ("arrival_ts", "service_start_ts", "service_end_ts") if not need(n)]
    if missing:
        return Rejection(rownum, "missing timestamp: " + ", ".join(missing))
    rec = PatientRecord(
        patient_id=pid,
        gender=gender,
        age=age,
        department=need("department"),
        exam_items=items,
        arrival_ts=ts("arrival_ts"),
        service_start_ts=ts("service_start_ts"),
        service_end_ts=ts("service_end_ts"),
        room_id=room,
        technician_id=need("technician_id") or None,
        day_id=day_id,
    )
    return rec


def loads_log(text: str, rooms: Iterable[int] | None = DEFAULT_ROOMS) -> ParsedLog:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return ParsedLog([], [])
    missing = [c for c in CSV_HEADER if c not in reader.fieldnames]
    if missing:
        raise LogFormatError(1, missing[0], "missing column in header")
    room_set = None if rooms is None else set(rooms)
    records, rejected = [], []
    # row numbers count the header as row 1
    for rownum, row in enumerate(reader, start=2):
        got = _row_to_record(rownum, row)
        if isinstance(got, Rejection):
            rejected.append(got)
            continue
        bad = got.violations(room_set)
        if bad:
            rejected.append(Rejection(rownum, "; ".join(bad)))
        else:
            records.append(got)
    return ParsedLog(records, rejected)


def parse_log(
    path: str | Path,
    format: str = "canonical_csv",
    rooms: Iterable[int] | None = DEFAULT_ROOMS,
) -> ParsedLog:
    """Read a canonical CSV log.

    Malformed rows raise :class:`LogFormatError`; rows that parse but break an
    ordering or universe invariant are returned in ``rejected``.
    """
    if format != "canonical_csv":
        raise ValueError(f"unsupported log format {format!r}")
    return loads_log(Path(path).read_text(encoding="utf-8"), rooms)


def merge_sources(a: Sequence[RawRecordA], b: Sequence[RawRecordB]) -> MergeResult:
    """Join registration rows with queue rows on id, day and the two shared times."""
    key_a = lambda r: (r.patient_id, r.day_id, r.registration_ts, r.service_calling_ts)
    key_b = lambda r: (r.patient_id, r.day_id, r.queue_start_ts, r.queue_end_ts)
    count_a = Counter(map(key_a, a))
    count_b = Counter(map(key_b, b))
    out = MergeResult()
    b_by_key = {}
    for rb in b:
        k = key_b(rb)
        if count_b[k] > 1 or count_a.get(k, 0) > 1:
            out.ambiguous_b.append(rb)
        elif k not in count_a:
            out.unmatched_b.append(rb)
        else:
            b_by_key[k] = rb
    for ra in a:
        k = key_a(ra)
        if count_a[k] > 1 or count_b.get(k, 0) > 1:
            out.ambiguous_a.append(ra)
            continue
        rb = b_by_key.get(k)
        if rb is None:
            out.unmatched_a.append(ra)
            continue
        if ra.report_generation_ts is None:
            out.rejected.append((ra, "missing report_generation_ts"))
            continue
        rec = PatientRecord(
            patient_id=ra.patient_id,
            gender=rb.gender,
            age=rb.age,
            department=ra.department,
            exam_items=tuple(ra.exam_items),
            arrival_ts=ra.registration_ts,
            service_start_ts=ra.service_calling_ts,
            service_end_ts=ra.report_generation_ts,
            room_id=rb.room_id,
            technician_id=rb.technician_id,
            day_id=ra.day_id,
        )
        bad = rec.violations(rooms=None)
        if bad:
            out.rejected.append((ra, "; ".join(bad)))
        else:
            out.records.append(rec)
    return out


def split_record(rec: PatientRecord) -> tuple[RawRecordA, RawRecordB]:
    """Project a merged record back onto the two source schemas."""
    ra = RawRecordA(
        patient_id=rec.patient_id,
        department=rec.department,
        exam_items=rec.exam_items,
        registration_ts=rec.arrival_ts,
        service_calling_ts=rec.service_start_ts,
        report_generation_ts=rec.service_end_ts,
        day_id=rec.day_id,
    )
    rb = RawRecordB(
        patient_id=rec.patient_id,
        gender=rec.gender,
        age=rec.age,
        technician_id=rec.technician_id,
        room_id=rec.room_id,
        queue_start_ts=rec.arrival_ts,
        queue_end_ts=rec.service_start_ts,
        day_id=rec.day_id,
    )
    return ra, rb


def group_by_day(records: Iterable[PatientRecord]) -> dict[str, list[PatientRecord]]:
    days: dict[str, list[PatientRecord]] = {}
    for r in records:
        days.setdefault(r.day_id, []).append(r)
    return days
