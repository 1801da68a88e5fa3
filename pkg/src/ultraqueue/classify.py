"""Exam-item groups (Gaussian mixture EM), room types (Ward clustering), patient classes."""

from __future__ import annotations

import bisect
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .eventlog import PatientRecord

log = logging.getLogger(__name__)

AGE_BOUNDS = (0.0, 0.5, 5.5, 10.5, 20.5, 30.5, 40.5, 50.5, 60.5, 70.5)
MULTI_GROUP = "P2"
_GROUP_LABELS_5 = ("P6", "P1", "P3", "P5", "P4")  # by descending census
VAR_FLOOR = 1e-6
MIN_WEIGHT = 1e-6


class DegenerateMixtureError(RuntimeError):
    pass


def age_bucket(age: float) -> int:
    """Index into half-open buckets [lo, hi); the last is unbounded."""
    if age < 0:
        raise ValueError("negative age")
    return bisect.bisect_right(AGE_BOUNDS, age) - 1


# ---------------------------------------------------------------- item features


@dataclass
class ItemFeatures:
    items: list[str]
    rooms: list[int]
    matrix: np.ndarray  # rows: [mean, std, freq(room_1), ..., freq(room_m)]
    counts: dict[str, int]
    insufficient: list[str] = field(default_factory=list)


def item_features(log_records: Iterable[PatientRecord], rooms: Sequence[int] | None = None) -> ItemFeatures:
    """Service mean, sample std and room-routing frequencies of single-item visits.

    Items seen fewer than twice have no std and are listed in ``insufficient``.
    """
    by_item: dict[str, list[PatientRecord]] = defaultdict(list)
    recs = list(log_records)
    for r in recs:
        if len(r.exam_items) == 1:
            by_item[r.exam_items[0]].append(r)
    if rooms is None:
        rooms = sorted({r.room_id for r in recs})
    rooms = list(rooms)
    col = {room: j for j, room in enumerate(rooms)}
    items, rows, insufficient = [], [], []
    counts = {k: len(v) for k, v in by_item.items()}
    for item in sorted(by_item):
        obs = by_item[item]
        if len(obs) < 2:
            insufficient.append(item)
            continue
        svc = np.array([r.service for r in obs], dtype=float)
        freq = np.zeros(len(rooms))
        for r in obs:
            freq[col[r.room_id]] += 1
        rows.append(np.r_[svc.mean(), svc.std(ddof=1), freq / len(obs)])
        items.append(item)
    matrix = np.array(rows) if rows else np.zeros((0, 2 + len(rooms)))
    if insufficient:
        log.info("items with fewer than two observations: %s", insufficient)
    return ItemFeatures(items, rooms, matrix, counts, insufficient)


# ---------------------------------------------------------------- gaussian mixture


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # in standardized coordinates
    variances: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    loglik_history: list[float]
    n_iter: int
    reseeded: int = 0

    @property
    def k(self) -> int:
        return len(self.weights)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.center) / self.scale

    def log_resp(self, X) -> tuple[np.ndarray, np.ndarray]:
        return _e_step(self.standardize(X), self.weights, self.means, self.variances)

    def predict(self, X) -> np.ndarray:
        lr, _ = self.log_resp(X)
        return np.argmax(lr, axis=1)

    def mahalanobis_nearest(self, x, available=None) -> int:
        z = self.standardize(np.atleast_2d(x))[0]
        mask = np.ones_like(z, dtype=bool) if available is None else np.asarray(available, dtype=bool)
        d = (((z - self.means) ** 2) / self.variances)[:, mask].sum(axis=1)
        return int(np.argmin(d))


def _standardize_columns(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return center, scale


def _log_gauss(Z, means, variances):
    # (n, k) diagonal gaussian log densities
    d = Z.shape[1]
    quad = (((Z[:, None, :] - means[None, :, :]) ** 2) / variances[None, :, :]).sum(axis=2)
    return -0.5 * (d * np.log(2 * np.pi) + np.log(variances).sum(axis=1)[None, :] + quad)


def _e_step(Z, weights, means, variances):
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    lp = _log_gauss(Z, means, variances) + lw[None, :]
    top = lp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(lp - top).sum(axis=1))
    return lp - lse[:, None], lse


def _m_step(Z, resp):
    nk = resp.sum(axis=0)
    weights = nk / len(Z)
    safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ Z) / safe[:, None]
    var = (resp.T @ (Z * Z)) / safe[:, None] - means**2
    variances = np.maximum(var, VAR_FLOOR)
    return weights, means, variances


def _kmeanspp_centers(Z, k, rng):
    n = len(Z)
    centers = [int(rng.integers(n))]
    d2 = ((Z - Z[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((Z - Z[nxt]) ** 2).sum(axis=1))
    return Z[centers]


def fit_gmm(features, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6, n_init: int = 1) -> GaussianMixture:
    """Diagonal-covariance EM on standardized columns.

    Initial responsibilities are hard assignments to k-means++ centres. Each
    iteration is one E step plus one M step; fitting stops when the
    log-likelihood gain drops below ``tol``. With ``n_init > 1`` the run with
    the highest final log-likelihood wins (first one on ties).
    """
    X = np.asarray(features, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if X.ndim != 2 or len(X) < k:
        raise ValueError(f"need at least k={k} feature rows, got {len(X)}")
    center, scale = _standardize_columns(X)
    Z = (X - center) / scale
    best = None
    for ss in np.random.SeedSequence(seed).spawn(n_init):
        fit = _fit_once(Z, k, np.random.default_rng(ss), max_iter, tol)
        if best is None or fit[3][-1] > best[3][-1]:
            best = fit
    weights, means, variances, hist, n_iter, reseeded = best
    return GaussianMixture(weights, means, variances, center, scale, hist, n_iter, reseeded)


def _fit_once(Z, k, rng, max_iter, tol):
    centers = _kmeanspp_centers(Z, k, rng)
    nearest = np.argmin(((Z[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((len(Z), k))
    resp[np.arange(len(Z)), nearest] = 1.0
    weights, means, variances = _m_step(Z, resp)
    lr, lse = _e_step(Z, weights, means, variances)
    hist = [float(lse.sum())]
    reseeded = 0
    n_iter = 0
    while n_iter < max_iter:
        weights, means, variances = _m_step(Z, np.exp(lr))
        bad = np.flatnonzero(weights < MIN_WEIGHT)
        if len(bad):
            if reseeded:
                raise DegenerateMixtureError("mixture component collapsed twice")
            reseeded = 1
            worst = int(np.argmin(lse))
            means[bad] = Z[worst]
            variances[bad] = np.maximum(Z.var(axis=0), VAR_FLOOR)
            weights[bad] = 1.0 / k
            weights = weights / weights.sum()
        lr, lse = _e_step(Z, weights, means, variances)
        n_iter += 1
        hist.append(float(lse.sum()))
        if hist[-1] - hist[-2] < tol:
            break
    return weights, means, variances, hist, n_iter, reseeded


# ---------------------------------------------------------------- item groups


@dataclass
class ItemGroupModel:
    mixture: GaussianMixture | None
    item_group: dict[str, str]  # single items -> group label
    labels: tuple[str, ...]  # all groups, multi-item group included
    multi_group: str = MULTI_GROUP
    fallback_group: str = ""
    component_labels: dict[int, str] = field(default_factory=dict)

    def group_of(self, items: Sequence[str], features=None) -> str:
        if len(items) > 1:
            return self.multi_group
        g = self.item_group.get(items[0])
        if g is not None:
            return g
        if features is not None and self.mixture is not None:
            comp = self.mixture.mahalanobis_nearest(features, available=~np.isnan(features))
            g = self.component_labels[comp]
        else:
            g = self.fallback_group
        log.info("unseen item %r assigned to group %s", items[0], g)
        return g

    def to_dict(self) -> dict:
        return {"item_group": dict(sorted(self.item_group.items())), "labels": list(self.labels),
                "multi_group": self.multi_group, "fallback_group": self.fallback_group}

    @classmethod
    def from_dict(cls, d) -> "ItemGroupModel":
        return cls(None, dict(d["item_group"]), tuple(d["labels"]), d["multi_group"], d["fallback_group"])


def _cluster_labels(k: int) -> tuple[str, ...]:
    if k == 5:
        return _GROUP_LABELS_5
    return tuple(f"P{i}" for i in range(1, k + 2) if i != 2)


def assign_item_groups(mixture: GaussianMixture, feats: ItemFeatures, log_records: Iterable[PatientRecord]) -> ItemGroupModel:
    """Map items to labelled groups; multi-item visits get their own group.

    Clusters are labelled by descending single-item visit census, so the
    largest cluster is ``P6`` when five clusters are fitted.
    """
    comp = mixture.predict(feats.matrix) if len(feats.items) else np.zeros(0, dtype=int)
    census = Counter()
    for item, c in zip(feats.items, comp):
        census[int(c)] += feats.counts[item]
    order = sorted(range(mixture.k), key=lambda c: (-census[c], c))
    names = _cluster_labels(mixture.k)
    label_of = {c: names[i] for i, c in enumerate(order)}
    item_group = {item: label_of[int(c)] for item, c in zip(feats.items, comp)}
    largest = label_of[order[0]]
    for item in feats.insufficient:
        item_group[item] = largest
    labels = tuple(sorted(set(names) | {MULTI_GROUP}, key=lambda s: int(s[1:])))
    return ItemGroupModel(mixture, item_group, labels, MULTI_GROUP, largest, label_of)


def group_census(model: ItemGroupModel, log_records: Iterable[PatientRecord]) -> dict[str, float]:
    c = Counter(model.group_of(r.exam_items) for r in log_records)
    total = sum(c.values())
    return {g: c[g] / total for g in model.labels} if total else {}


# ---------------------------------------------------------------- room types


@dataclass
class RoomTypeModel:
    room_type: dict[int, str]
    members: dict[str, list[int]]
    merges: list[tuple[int, int, float, int]] = field(default_factory=list)  # scipy-style linkage rows
    features: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)

    @property
    def types(self) -> list[str]:
        return sorted(self.members, key=lambda s: int(s[1:]))

    @property
    def rooms(self) -> list[int]:
        return sorted(self.room_type)

    def to_dict(self) -> dict:
        return {"room_type": {str(r): t for r, t in sorted(self.room_type.items())},
                "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, d) -> "RoomTypeModel":
        room_type = {int(r): t for r, t in d["room_type"].items()}
        return cls(room_type, _members(room_type), [tuple(m) for m in d.get("merges", [])])


def _members(room_type):
    members: dict[str, list[int]] = defaultdict(list)
    for r in sorted(room_type):
        members[room_type[r]].append(r)
    return dict(members)


def room_features(log_records: Iterable[PatientRecord], rooms: Sequence[int] | None = None):
    recs = list(log_records)
    if rooms is None:
        rooms = sorted({r.room_id for r in recs})
    items = sorted({i for r in recs for i in r.exam_items})
    icol = {it: j for j, it in enumerate(items)}
    rows = []
    for room in rooms:
        mine = [r for r in recs if r.room_id == room]
        if not mine:
            raise ValueError(f"room {room} has no records")
        days = len({r.day_id for r in mine})
        mean_svc = float(np.mean([r.service for r in mine]))
        mix = np.zeros(len(items))
        for r in mine:
            for it in r.exam_items:
                mix[icol[it]] += 1
        rows.append(np.r_[days, mean_svc, mix / mix.sum()])
    names = ["open_days", "mean_service"] + [f"item:{it}" for it in items]
    return list(rooms), np.array(rows), names


def ward_linkage(X) -> list[tuple[int, int, float, int]]:
    """Ward agglomeration with Lance-Williams updates.

    Returns rows (a, b, height, size) using scipy's numbering (new clusters
    get ids n, n+1, ...). Equal distances resolve to the pair whose smallest
    member indices are lexicographically smallest.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    D = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)  # squared distances
    active = {i: (i, 1, i) for i in range(n)}  # slot -> (cluster id, size, min member)
    merges = []
    next_id = n
    while len(active) > 1:
        slots = sorted(active, key=lambda s: active[s][2])
        best = None
        for ai, a in enumerate(slots):
            for b in slots[ai + 1:]:
                d = D[a, b]
                if best is None or d < best[0]:
                    best = (d, a, b)
        d, a, b = best
        ida, na, ma = active.pop(a)
        idb, nb, mb = active.pop(b)
        for s in active:
            nk = active[s][1]
            D[a, s] = D[s, a] = ((na + nk) * D[a, s] + (nb + nk) * D[b, s] - nk * d) / (na + nb + nk)
        merges.append((min(ida, idb), max(ida, idb), float(np.sqrt(max(d, 0.0))), na + nb))
        active[a] = (next_id, na + nb, min(ma, mb))
        next_id += 1
    return merges


def cut_linkage(merges, n: int, n_clusters: int) -> list[int]:
    """Cluster index per leaf after applying the first n - n_clusters merges."""
    parent = list(range(n + len(merges)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for step, (a, b, _, _) in enumerate(merges[: n - n_clusters]):
        new = n + step
        parent[find(a)] = new
        parent[find(b)] = new
    roots = [find(i) for i in range(n)]
    order = {}
    for r in roots:
        order.setdefault(r, len(order))
    return [order[r] for r in roots]


def cluster_rooms(log_records: Iterable[PatientRecord], n_types: int = 4, rooms: Sequence[int] | None = None) -> RoomTypeModel:
    """Ward clustering of rooms on standardized (open days, mean service, item mix)."""
    rooms, F, names = room_features(log_records, rooms)
    if n_types > len(rooms):
        raise ValueError(f"n_types={n_types} exceeds the {len(rooms)} rooms available")
    center, scale = _standardize_columns(F)
    merges = ward_linkage((F - center) / scale)
    cluster = cut_linkage(merges, len(rooms), n_types)
    # clusters come out ordered by their smallest room, so R1 holds the lowest id
    room_type = {room: f"R{c + 1}" for room, c in zip(rooms, cluster)}
    return RoomTypeModel(room_type, _members(room_type), merges, F, names)


# ---------------------------------------------------------------- patient classes


@dataclass(frozen=True, order=True)
class PatientClass:
    item_group: str
    age_bucket: int
    gender: str

    @property
    def key(self) -> str:
        return f"{self.item_group}|{self.age_bucket}|{self.gender}"

    @classmethod
    def from_key(cls, key: str) -> "PatientClass":
        g, a, s = key.split("|")
        return cls(g, int(a), s)


def class_of(record: PatientRecord, groups: ItemGroupModel) -> PatientClass:
    return PatientClass(groups.group_of(record.exam_items), age_bucket(record.age), record.gender)


def build_patient_classes(groups: ItemGroupModel, log_records: Iterable[PatientRecord]) -> list[PatientClass]:
    """Observed (group, age bucket, gender) combinations, sorted."""
    return sorted({class_of(r, groups) for r in log_records}, key=lambda c: (int(c.item_group[1:]), c.age_bucket, c.gender))
