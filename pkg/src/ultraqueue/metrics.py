"""Validation quantities: hourly queue length, waiting-time KS distance, routed counts."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .eventlog import PatientRecord, group_by_day

Log = Sequence[PatientRecord]


def _days(logs: Log | Sequence[Log]) -> list[list[PatientRecord]]:
    """Split one log or a list of logs into per-day record lists."""
    logs = list(logs)
    if logs and isinstance(logs[0], PatientRecord):
        logs = [logs]
    out = []
    for lg in logs:
        lg = getattr(lg, "records", lg)
        out.extend(v for _, v in sorted(group_by_day(lg).items()))
    return out


@dataclass
class QueueLengthCurve:
    hours: list[int]
    values: list[float]
    n_days: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0


def _interval_seconds(intervals: np.ndarray, hours: Sequence[int]) -> np.ndarray:
    """Integral of the count of open intervals [a, b) over each clock hour, in seconds.

    Built from the step function: +1 at every start, -1 at every end.
    """
    h = np.asarray(hours, dtype=np.int64)
    out = np.zeros(len(h), dtype=np.int64)
    if len(intervals) == 0:
        return out
    t = np.concatenate([intervals[:, 0], intervals[:, 1]])
    d = np.concatenate([np.ones(len(intervals), np.int64), -np.ones(len(intervals), np.int64)])
    bounds = np.concatenate([h * 3600, h * 3600 + 3600])
    pts = np.unique(np.concatenate([t, bounds]))
    level = np.cumsum(np.bincount(np.searchsorted(pts, t), weights=d, minlength=len(pts))).astype(np.int64)
    area = level[:-1] * np.diff(pts)  # level on [pts[i], pts[i+1])
    which = np.searchsorted(h * 3600, pts[:-1], side="right") - 1
    inside = (which >= 0) & (pts[:-1] < h[np.clip(which, 0, None)] * 3600 + 3600)
    np.add.at(out, which[inside], area[inside])
    return out


def queue_length_curve(logs, hours: Sequence[int] = range(7, 17), include_in_service: bool = False) -> QueueLengthCurve:
    """Time-averaged number waiting in each hour, averaged over days."""
    hours = list(hours)
    days = _days(logs)
    total = np.zeros(len(hours), dtype=np.int64)
    for recs in days:
        iv = np.array([(r.arrival_ts, r.service_end_ts if include_in_service else r.service_start_ts) for r in recs],
                      dtype=np.int64).reshape(-1, 2)
        total += _interval_seconds(iv, hours)
    n = max(len(days), 1)
    return QueueLengthCurve(hours, [float(x) / (3600 * n) for x in total], len(days))


def ks_two_sample(x, y) -> float:
    """sup |F_x - F_y| evaluated at every point of the merged support."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    if len(x) == 0 or len(y) == 0:
        raise ValueError("KS distance needs two non-empty samples")
    support = np.union1d(x, y)
    cx = np.searchsorted(x, support, side="right")
    cy = np.searchsorted(y, support, side="right")
    return float(np.max(np.abs(cx / len(x) - cy / len(y))))


def _rel(sim: float, ref: float) -> float | None:
    return abs(sim - ref) / ref if ref > 0 else None


@dataclass
class CountDiff:
    key: tuple
    sim: float
    ref: float

    @property
    def abs_diff(self) -> float:
        return abs(self.sim - self.ref)

    @property
    def rel_diff(self) -> float | None:
        return _rel(self.sim, self.ref)


def routed_counts(days: list[list[PatientRecord]], key) -> Counter:
    c = Counter()
    for recs in days:
        for r in recs:
            c[key(r)] += 1
    return c


@dataclass
class ValidationReport:
    hours: list[int]
    queue_sim: QueueLengthCurve
    queue_ref: QueueLengthCurve
    wait_sim: np.ndarray  # seconds, pooled
    wait_ref: np.ndarray
    ks_wait: float
    routing_by_type: list[CountDiff]
    routing_by_room: list[CountDiff]
    n_days_sim: int
    n_days_ref: int
    truncated_wait_sim: float = 0.0  # minutes, services starting inside the horizon only
    truncated_wait_ref: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def mean_queue_sim(self) -> float:
        return self.queue_sim.mean

    @property
    def mean_queue_ref(self) -> float:
        return self.queue_ref.mean

    @property
    def diff_mean_queue_length(self) -> float:
        return abs(self.mean_queue_sim - self.mean_queue_ref)

    @property
    def rel_diff_mean_queue_length(self) -> float | None:
        return _rel(self.mean_queue_sim, self.mean_queue_ref)

    @property
    def mean_wait_sim(self) -> float:
        return float(self.wait_sim.mean()) / 60 if len(self.wait_sim) else 0.0

    @property
    def mean_wait_ref(self) -> float:
        return float(self.wait_ref.mean()) / 60 if len(self.wait_ref) else 0.0

    @property
    def diff_mean_wait(self) -> float:
        return abs(self.mean_wait_sim - self.mean_wait_ref)

    @property
    def rel_diff_mean_wait(self) -> float | None:
        return _rel(self.mean_wait_sim, self.mean_wait_ref)

    def summary(self) -> dict[str, float | None]:
        return {
            "mean_queue_length_sim": self.mean_queue_sim,
            "mean_queue_length_ref": self.mean_queue_ref,
            "diff_mean_queue_length": self.diff_mean_queue_length,
            "rel_diff_mean_queue_length": self.rel_diff_mean_queue_length,
            "mean_wait_min_sim": self.mean_wait_sim,
            "mean_wait_min_ref": self.mean_wait_ref,
            "diff_mean_wait_min": self.diff_mean_wait,
            "rel_diff_mean_wait": self.rel_diff_mean_wait,
            "ks_wait": self.ks_wait,
        }


def _mean_truncated(days, horizon_end):
    w = [r.wait for recs in days for r in recs if r.service_start_ts < horizon_end * 3600]
    return float(np.mean(w)) / 60 if w else 0.0


def compare(sim_logs, ref_logs, room_type: Mapping[int, str], hours: Sequence[int] = range(7, 17)) -> ValidationReport:
    """Simulated days against reference days; routed counts are per-day means keyed by arrival hour."""
    hours = list(hours)
    sim, ref = _days(sim_logs), _days(ref_logs)
    if not sim or not ref:
        raise ValueError("both sides of a comparison need at least one day")
    wait = lambda days: np.array([r.wait for recs in days for r in recs], dtype=float)
    wait_sim, wait_ref = wait(sim), wait(ref)
    if len(wait_sim) == 0 or len(wait_ref) == 0:
        raise ValueError("both sides of a comparison need at least one patient")
    hset = set(hours)

    def diffs(key, keys):
        cs = routed_counts(sim, key)
        cr = routed_counts(ref, key)
        return [CountDiff(k, cs[k] / len(sim), cr[k] / len(ref)) for k in keys]

    types = sorted(set(room_type.values()), key=lambda s: (len(s), s))
    by_type = diffs(lambda r: (room_type[r.room_id], r.arrival_ts // 3600), [(t, h) for t in types for h in hours])
    by_room = diffs(lambda r: (r.room_id, r.arrival_ts // 3600), [(m, h) for m in sorted(room_type) for h in hours])
    notes = []
    undefined = sum(d.rel_diff is None for d in by_type + by_room)
    if undefined:
        notes.append(f"{undefined} routing cells have zero reference count; relative diff undefined")
    stray = sum(1 for recs in ref for r in recs if r.arrival_ts // 3600 not in hset)
    if stray:
        notes.append(f"{stray} reference arrivals fall outside the reporting hours")
    return ValidationReport(
        hours=hours,
        queue_sim=queue_length_curve(sim, hours),
        queue_ref=queue_length_curve(ref, hours),
        wait_sim=wait_sim,
        wait_ref=wait_ref,
        ks_wait=ks_two_sample(wait_sim, wait_ref),
        routing_by_type=by_type,
        routing_by_room=by_room,
        n_days_sim=len(sim),
        n_days_ref=len(ref),
        truncated_wait_sim=_mean_truncated(sim, hours[-1] + 1),
        truncated_wait_ref=_mean_truncated(ref, hours[-1] + 1),
        notes=notes,
    )


def wait_histogram(wait_seconds, bin_width: float = 5.0, upper: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Counts over [0, w), [w, 2w), ... minutes; the last bin reaches the maximum."""
    w = np.asarray(wait_seconds, dtype=float) / 60
    top = upper if upper is not None else (w.max() if len(w) else 0.0)
    n_bins = int(np.floor(top / bin_width)) + 1
    edges = np.arange(n_bins + 1) * bin_width
    idx = np.minimum((w // bin_width).astype(np.int64), n_bins - 1)
    return edges, np.bincount(idx, minlength=n_bins)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) if not isinstance(x, str) else x for x in row])
    return buf.getvalue()


def render_report(report: ValidationReport, bin_width: float = 5.0) -> dict[str, str]:
    """CSV documents keyed by file name; identical reports render to identical bytes."""
    s = report
    summary = [
        ("mean_queue_length", s.mean_queue_sim, s.mean_queue_ref, s.diff_mean_queue_length, s.rel_diff_mean_queue_length),
        ("mean_wait_min", s.mean_wait_sim, s.mean_wait_ref, s.diff_mean_wait, s.rel_diff_mean_wait),
        ("mean_wait_min_truncated", s.truncated_wait_sim, s.truncated_wait_ref,
         abs(s.truncated_wait_sim - s.truncated_wait_ref), _rel(s.truncated_wait_sim, s.truncated_wait_ref)),
        ("ks_wait", s.ks_wait, None, None, None),
        ("n_days", s.n_days_sim, s.n_days_ref, None, None),
    ]
    top = max(s.wait_sim.max(), s.wait_ref.max()) / 60
    edges, h_sim = wait_histogram(s.wait_sim, bin_width, top)
    _, h_ref = wait_histogram(s.wait_ref, bin_width, top)
    count_rows = lambda diffs: [(*d.key, d.sim, d.ref, d.abs_diff, d.rel_diff) for d in diffs]
    return {
        "summary.csv": _csv(("metric", "sim", "reference", "abs_diff", "rel_diff"), summary),
        "routing_by_type.csv": _csv(("room_type", "hour", "sim", "reference", "abs_diff", "rel_diff"),
                                    count_rows(s.routing_by_type)),
        "routing_by_room.csv": _csv(("room_id", "hour", "sim", "reference", "abs_diff", "rel_diff"),
                                    count_rows(s.routing_by_room)),
        "queue_length.csv": _csv(("hour", "sim", "reference"),
                                 zip(s.hours, s.queue_sim.values, s.queue_ref.values)),
        "wait_histogram.csv": _csv(("bin_start_min", "bin_end_min", "sim_count", "reference_count"),
                                   zip(edges[:-1], edges[1:], h_sim, h_ref)),
    }


def write_report(files: Mapping[str, str], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8", newline="\n")


def flatten(logs: Iterable) -> list[PatientRecord]:
    return [r for lg in logs for r in getattr(lg, "records", lg)]
