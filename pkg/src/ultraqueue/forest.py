"""Random-forest classifier with probability output, plus its evaluation suite.

Trees split on ``x[f] <= threshold``; thresholds are midpoints between
consecutive distinct values present at the node. Categorical inputs are
expected one-hot expanded by the caller (see :class:`FeatureSchema`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

log = logging.getLogger(__name__)

FOREST_VERSION = 1
_MIN_DECREASE = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 100
    bootstrap: bool = False
    criterion: str = "gini"
    max_features: str = "sqrt_p"
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    max_depth: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.criterion not in ("gini", "entropy"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.max_features not in ("sqrt_p", "log2_p", "all"):
            raise ValueError(f"unknown max_features {self.max_features!r}")

    def n_features_per_split(self, p: int) -> int:
        if self.max_features == "all" or p <= 1:
            return p
        if self.max_features == "sqrt_p":
            return max(1, min(p, math.ceil(math.sqrt(p))))
        return max(1, min(p, math.ceil(math.log2(p))))


# Hyperparameters of the routing forests: first level, then second level by room type.
FIRST_LEVEL = Hyperparams(100, False, "gini", "sqrt_p", 20, 20, 9)
SECOND_LEVEL = {
    "R1": Hyperparams(250, False, "entropy", "log2_p", 10, 5, 9),
    "R2": Hyperparams(150, False, "gini", "sqrt_p", 1, 2, 9),
    "R3": Hyperparams(250, False, "gini", "sqrt_p", 1, 15, 10),
    "R4": Hyperparams(300, False, "gini", "sqrt_p", 1, 11, 10),
}


@dataclass(frozen=True)
class FeatureSchema:
    """Column names, plus the base feature each column was expanded from."""

    names: tuple[str, ...]
    groups: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.groups:
            object.__setattr__(self, "groups", tuple(self.names))
        if len(self.groups) != len(self.names):
            raise ValueError("groups and names differ in length")

    def __len__(self):
        return len(self.names)

    def group_columns(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, g in enumerate(self.groups):
            out.setdefault(g, []).append(i)
        return out


def impurity(counts, criterion: str = "gini") -> float:
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("negative class count")
    total = counts.sum()
    if total <= 0:
        raise ValueError("impurity of an empty node")
    p = counts / total
    if criterion == "gini":
        return float(1.0 - np.sum(p * p))
    if criterion == "entropy":
        p = p[p > 0]
        return float(-np.sum(p * np.log2(p)) + 0.0)
    raise ValueError(f"unknown criterion {criterion!r}")


@numba.njit(cache=True)
def _node_impurity(c, n, entropy):
    acc = 0.0
    if entropy:
        for k in range(c.shape[0]):
            if c[k] > 0:
                p = c[k] / n
                acc -= p * np.log2(p)
        return acc
    for k in range(c.shape[0]):
        p = c[k] / n
        acc += p * p
    return 1.0 - acc


@numba.njit(cache=True)
def _split_kernel(codes, y, idx, feats, uniq_flat, uniq_off, K, min_leaf, entropy, counts):
    """Best (gain, feature, threshold) over ``feats``; ties keep the earlier candidate."""
    n = idx.shape[0]
    parent = _node_impurity(counts, float(n), entropy)
    best_gain = _MIN_DECREASE
    best_f = -1
    best_thr = 0.0
    left = np.empty(K)
    right = np.empty(K)
    for f in feats:
        lo = uniq_off[f]
        nv = uniq_off[f + 1] - lo
        hist = np.zeros((nv, K))
        for i in idx:
            hist[codes[i, f], y[i]] += 1.0
        left[:] = 0.0
        nl = 0.0
        prev = -1
        for v in range(nv):
            row_n = 0.0
            for k in range(K):
                row_n += hist[v, k]
            if row_n == 0.0:
                continue
            if prev >= 0 and nl >= min_leaf and n - nl >= min_leaf:
                for k in range(K):
                    right[k] = counts[k] - left[k]
                nr = n - nl
                gain = parent - (nl * _node_impurity(left, nl, entropy)
                                 + nr * _node_impurity(right, nr, entropy)) / n
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (uniq_flat[lo + prev] + uniq_flat[lo + v])
            for k in range(K):
                left[k] += hist[v, k]
            nl += row_n
            prev = v
    return best_gain, best_f, best_thr


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature[i] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) training counts

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.feature[i] >= 0:
                stack.append((self.left[i], d + 1))
                stack.append((self.right[i], d + 1))
        return best

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            fi = np.where(inner, f, 0)
            go_left = X[rows, fi] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def to_dict(self) -> dict:
        leaves = self.feature < 0
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) if not lf else None for t, lf in zip(self.threshold, leaves)],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_counts": [self.value[i].astype(int).tolist() if lf else None for i, lf in enumerate(leaves)],
        }

    @classmethod
    def from_dict(cls, d: dict, n_classes: int) -> "DecisionTree":
        feature = np.asarray(d["feature"], dtype=np.int64)
        n = len(feature)
        value = np.zeros((n, n_classes))
        for i, c in enumerate(d["leaf_counts"]):
            if c is not None:
                value[i] = c
        thr = np.array([np.nan if t is None else t for t in d["threshold"]], dtype=float)
        tree = cls(feature, thr, np.asarray(d["left"], np.int64), np.asarray(d["right"], np.int64), value)
        tree._fill_internal_counts()
        return tree

    def _fill_internal_counts(self):
        # children always have larger indices than their parent (preorder build)
        for i in range(self.n_nodes - 1, -1, -1):
            if self.feature[i] >= 0:
                self.value[i] = self.value[self.left[i]] + self.value[self.right[i]]


class _Builder:
    def __init__(self, codes, uniq, y, n_classes, hp: Hyperparams, rng):
        self.codes = codes
        self.uniq = uniq
        self.y = y
        self.K = n_classes
        self.hp = hp
        self.rng = rng
        self.p = codes.shape[1]
        self.mtry = hp.n_features_per_split(self.p)
        self.uniq_flat = np.concatenate(uniq)
        self.uniq_off = np.cumsum([0] + [len(u) for u in uniq]).astype(np.int64)
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _new_node(self, counts):
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(counts)
        return len(self.feature) - 1

    def _best_split(self, idx, counts):
        if self.mtry >= self.p:
            feats = np.arange(self.p)
        else:
            feats = np.sort(self.rng.choice(self.p, size=self.mtry, replace=False))
        return _split_kernel(self.codes, self.y, idx, feats, self.uniq_flat, self.uniq_off, self.K,
                             self.hp.min_samples_leaf, self.hp.criterion == "entropy", counts)

    def build(self, idx):
        hp, K = self.hp, self.K
        root_counts = np.bincount(self.y[idx], minlength=K).astype(float)
        root = self._new_node(root_counts)
        stack = [(root, idx, 0)]
        while stack:
            node, idx, depth = stack.pop()
            counts = self.value[node]
            n = len(idx)
            if depth >= hp.max_depth or n < hp.min_samples_split or np.count_nonzero(counts) <= 1:
                continue
            _, f, thr = self._best_split(idx, counts)
            if f < 0:
                continue
            mask = self.uniq[f][self.codes[idx, f]] <= thr
            li, ri = idx[mask], idx[~mask]
            self.feature[node] = f
            self.threshold[node] = thr
            lc = np.bincount(self.y[li], minlength=K).astype(float)
            rc = counts - lc
            ln = self._new_node(lc)
            rn = self._new_node(rc)
            self.left[node], self.right[node] = ln, rn
            # right pushed first so the left subtree is numbered first (preorder)
            stack.append((rn, ri, depth + 1))
            stack.append((ln, li, depth + 1))
        # renumber into preorder so children follow parents
        return self._to_tree()

    def _to_tree(self):
        order, stack = [], [0]
        while stack:
            i = stack.pop()
            order.append(i)
            if self.feature[i] >= 0:
                stack.append(self.right[i])
                stack.append(self.left[i])
        new_id = {old: new for new, old in enumerate(order)}
        feature = np.array([self.feature[i] for i in order], dtype=np.int64)
        threshold = np.array([self.threshold[i] for i in order], dtype=float)
        left = np.array([new_id[self.left[i]] if self.feature[i] >= 0 else -1 for i in order], dtype=np.int64)
        right = np.array([new_id[self.right[i]] if self.feature[i] >= 0 else -1 for i in order], dtype=np.int64)
        value = np.array([self.value[i] for i in order], dtype=float).reshape(len(order), self.K)
        return DecisionTree(feature, threshold, left, right, value)


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    classes: tuple
    hyperparams: Hyperparams
    schema: FeatureSchema
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def _flatten(self):
        if self._flat is None:
            offs = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
            feat = np.concatenate([t.feature for t in self.trees])
            thr = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offs)])
            right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offs)])
            val = np.concatenate([t.value for t in self.trees])
            tot = val.sum(axis=1, keepdims=True)
            prob = val / np.where(tot > 0, tot, 1.0)
            self._flat = (offs.astype(np.int64), feat, np.nan_to_num(thr), left, right, prob)
        return self._flat

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Mean of the trees' leaf class frequencies; rows sum to one."""
        single = np.ndim(X) == 1
        X = self._check(X)
        roots, feat, thr, left, right, prob = self._flatten()
        out = np.empty((len(X), len(self.classes)))
        step = max(1, 200_000 // len(roots))
        for s in range(0, len(X), step):
            Xc = X[s:s + step]
            node = np.broadcast_to(roots, (len(Xc), len(roots))).copy()
            rows = np.arange(len(Xc))[:, None]
            while True:
                f = feat[node]
                inner = f >= 0
                if not inner.any():
                    break
                go_left = Xc[rows, np.where(inner, f, 0)] <= thr[node]
                node = np.where(inner, np.where(go_left, left[node], right[node]), node)
            out[s:s + step] = prob[node].mean(axis=1)
        return out[0] if single else out

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.classes, dtype=object)[np.argmax(self.predict_proba(self._check(X)), axis=1)]

    def to_dict(self) -> dict:
        return {
            "version": FOREST_VERSION,
            "classes": list(self.classes),
            "hyperparams": asdict(self.hyperparams),
            "features": list(self.schema.names),
            "feature_groups": list(self.schema.groups),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        if d.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest version {d.get('version')!r}")
        classes = tuple(d["classes"])
        return cls(
            trees=[DecisionTree.from_dict(t, len(classes)) for t in d["trees"]],
            classes=classes,
            hyperparams=Hyperparams(**d["hyperparams"]),
            schema=FeatureSchema(tuple(d["features"]), tuple(d["feature_groups"])),
        )


def _encode_columns(X: np.ndarray):
    uniq, codes = [], np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        u, inv = np.unique(X[:, j], return_inverse=True)
        uniq.append(u)
        codes[:, j] = inv
    return codes, uniq


def train(X, y, hp: Hyperparams, schema: FeatureSchema | None = None, classes: Sequence | None = None) -> RandomForest:
    """Fit a forest; each tree draws from its own stream spawned off ``hp.seed``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training data is empty")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    if np.isnan(X).any():
        raise ValueError("missing feature values")
    if classes is None:
        classes = tuple(sorted(set(y.tolist())))
    classes = tuple(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        yi = np.array([lookup[v] for v in y.tolist()], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]!r} not in class catalog") from None
    if len(set(yi.tolist())) < 2:
        log.warning("single-label training data; trees degenerate to one leaf")
    if schema is None:
        schema = FeatureSchema(tuple(f"x{i}" for i in range(X.shape[1])))
    if len(schema) != X.shape[1]:
        raise ValueError("schema does not match feature matrix")

    codes, uniq = _encode_columns(X)
    streams = np.random.SeedSequence(hp.seed).spawn(hp.n_estimators)
    trees = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        if hp.bootstrap:
            idx = np.sort(rng.integers(0, len(X), size=len(X)))
        else:
            idx = np.arange(len(X))
        trees.append(_Builder(codes, uniq, yi, len(classes), hp, rng).build(idx))
    return RandomForest(trees, classes, hp, schema)


def _labels_to_index(forest: RandomForest, y) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(forest.classes)}
    return np.array([lookup.get(v, -1) for v in np.asarray(y).tolist()], dtype=np.int64)


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # average ranks over runs of equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovr_auc(forest: RandomForest, X, y, proba=None) -> float:
    """Macro-averaged one-vs-rest AUC over the classes present in ``y``."""
    yi = _labels_to_index(forest, y)
    if len(set(yi.tolist())) < 2:
        raise ValueError("need at least two labels")
    P = forest.predict_proba(X) if proba is None else proba
    aucs = []
    for k, c in enumerate(forest.classes):
        pos = yi == k
        if not pos.any() or pos.all():
            log.warning("class %r absent from evaluation data; skipped", c)
            continue
        aucs.append(binary_auc(P[:, k], pos))
    return float(np.mean(aucs))


def accuracy(forest: RandomForest, X, y, proba=None) -> float:
    P = forest.predict_proba(X) if proba is None else proba
    return float(np.mean(np.argmax(P, axis=1) == _labels_to_index(forest, y)))


METRICS: dict[str, Callable] = {"accuracy": accuracy, "auc": ovr_auc}


def permutation_importance(forest: RandomForest, X, y, metric="accuracy", n_repeats: int = 5, seed: int = 0,
                           by_group: bool = True) -> dict[str, float]:
    """Mean drop in ``metric`` after shuffling each feature (or one-hot block)."""
    score = METRICS[metric] if isinstance(metric, str) else metric
    X = np.asarray(X, dtype=float)
    base = score(forest, X, y)
    if by_group:
        blocks = forest.schema.group_columns()
    else:
        blocks = {n: [i] for i, n in enumerate(forest.schema.names)}
    rng = np.random.default_rng(seed)
    out = {}
    for name, cols in blocks.items():
        drops = []
        for _ in range(n_repeats):
            perm = rng.permutation(len(X))
            Xp = X.copy()
            Xp[:, cols] = X[perm][:, cols]
            drops.append(base - score(forest, Xp, y))
        out[name] = float(np.mean(drops))
    return out
