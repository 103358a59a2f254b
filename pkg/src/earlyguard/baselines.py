"""Comparison classifiers over flattened trace prefixes.

A prefix up to time t becomes one vector of length 10 * (t + 1): the
standardized snapshots laid end to end in time order. Labels are 0 (benign)
and 1 (malicious); every tie resolves to malicious.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .traces import BehaviorTrace, Normalizer, TraceError, fit_normalizer, standardized_batch


class BaselineError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlatSample:
    x: np.ndarray
    label: int


def flatten(trace: BehaviorTrace, normalizer: Normalizer, t_seconds: int) -> FlatSample:
    if len(trace.snapshots) < t_seconds + 1:
        raise BaselineError(f"{trace.sample_id}: too short for t={t_seconds}")
    return FlatSample(normalizer.transform(trace.snapshots[: t_seconds + 1]).reshape(-1), trace.y)


def flatten_many(traces: Sequence[BehaviorTrace], normalizer: Normalizer, t_seconds: int, off_features=()) -> np.ndarray:
    try:
        X = standardized_batch(traces, normalizer, t_seconds)
    except TraceError as exc:
        raise BaselineError(str(exc)) from None
    if off_features:
        X[..., sorted(off_features)] = 0.0
    return X.reshape(len(traces), -1)


# k-nearest neighbours


@dataclass
class KNN:
    X: np.ndarray
    y: np.ndarray
    k: int = 5


def knn_train(X, y, k: int = 5) -> KNN:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise BaselineError("empty training set")
    if k > len(X):
        raise BaselineError(f"k={k} exceeds training size {len(X)}")
    return KNN(X, np.asarray(y, dtype=int), k)


def knn_predict(model: KNN, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X), dtype=int)
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion, which
    # can reorder near-equal distances
    for lo in range(0, len(X), 64):
        chunk = X[lo : lo + 64]
        d2 = ((chunk[:, None, :] - model.X[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, : model.k]
        votes = model.y[nearest].sum(axis=1)
        out[lo : lo + 64] = 2 * votes >= model.k
    return out


# Gaussian naive Bayes

VAR_SMOOTHING = 1e-9


@dataclass
class GaussianNB:
    log_prior: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def gaussian_nb_train(X, y) -> GaussianNB:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if set(np.unique(y)) != {0, 1}:
        raise BaselineError("naive Bayes needs both classes in the training set")
    means, vars_, priors = [], [], []
    for c in (0, 1):
        Xc = X[y == c]
        means.append(Xc.mean(axis=0))
        vars_.append(Xc.var(axis=0) + VAR_SMOOTHING)
        priors.append(len(Xc) / len(X))
    return GaussianNB(np.log(priors), np.array(means), np.array(vars_))


def gaussian_nb_log_posteriors(model: GaussianNB, X) -> np.ndarray:
    """Unnormalized log posterior per class, shape (n, 2)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty((len(X), 2))
    for c in (0, 1):
        ll = -0.5 * np.log(2.0 * np.pi * model.var[c]) - (X - model.mean[c]) ** 2 / (2.0 * model.var[c])
        out[:, c] = model.log_prior[c] + ll.sum(axis=1)
    return out


def gaussian_nb_predict(model: GaussianNB, X) -> np.ndarray:
    lp = gaussian_nb_log_posteriors(model, X)
    return (lp[:, 1] >= lp[:, 0]).astype(int)


# CART


@dataclass
class Tree:
    """Flat array tree; ``feature[i] == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[int] = field(default_factory=list)

    def add(self, feature=-1, threshold=0.0, value=1) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(f == -1 for f in self.feature)


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    return 0.0 if n == 0 else 1.0 - float(((counts / n) ** 2).sum())


def best_split(X, y, features):
    """(feature, threshold, gain) maximizing the Gini decrease, or None.

    Thresholds are midpoints between consecutive distinct values; ties go
    to the lowest feature index, then the lowest threshold.
    """
    n = len(y)
    total_pos = int(y.sum())
    parent = gini([n - total_pos, total_pos])
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        pos_left = np.cumsum(ys)[:-1].astype(np.float64)
        n_left = np.arange(1, n, dtype=np.float64)
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        n_right = n - n_left
        pos_right = total_pos - pos_left
        # size-weighted impurity 2*pos*neg/size: symmetric in the two classes
        # and the two sides, so mirror-image splits score bit-identically and
        # the tie-break is decided by order alone
        w_left = 2.0 * pos_left * (n_left - pos_left) / n_left
        w_right = 2.0 * pos_right * (n_right - pos_right) / n_right
        gain = parent - (w_left + w_right) / n
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[2]:
            best = (f, 0.5 * (xs[i] + xs[i + 1]), float(gain[i]))
    if best is None or best[2] <= 0.0:
        return None
    return best


def _majority(y) -> int:
    return int(2 * y.sum() >= len(y))


def _grow(X, y, max_depth=None, min_leaf=1, n_sub=None, rng=None) -> Tree:
    tree = Tree()
    n_features = X.shape[1]
    stack = [(np.arange(len(y)), tree.add(value=_majority(y)), 0)]
    while stack:
        idx, node, depth = stack.pop()
        ys = y[idx]
        if ys.min() == ys.max() or len(idx) < 2 * min_leaf or (max_depth is not None and depth >= max_depth):
            continue
        if n_sub is not None and n_sub < n_features:
            features = rng.choice(n_features, size=n_sub, replace=False)
        else:
            features = range(n_features)
        split = best_split(X[idx], ys, features)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        if len(li) < min_leaf or len(ri) < min_leaf:
            continue
        tree.feature[node] = int(f)
        tree.threshold[node] = float(thr)
        tree.left[node] = tree.add(value=_majority(y[li]))
        tree.right[node] = tree.add(value=_majority(y[ri]))
        stack.append((ri, tree.right[node], depth + 1))
        stack.append((li, tree.left[node], depth + 1))
    return tree


def cart_train(X, y, max_depth: int | None = None, min_leaf: int = 1) -> Tree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise BaselineError("empty training set")
    return _grow(X, y, max_depth, min_leaf)


def cart_predict(tree: Tree, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X), dtype=int)
    for i, row in enumerate(X):
        node = 0
        while tree.feature[node] != -1:
            node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        out[i] = tree.value[node]
    return out


# random forest


@dataclass
class Forest:
    trees: list[Tree]


def _n_sub(feature_subsample, n_features):
    if feature_subsample in (None, "all"):
        return None
    if feature_subsample == "sqrt":
        return max(1, int(np.sqrt(n_features)))
    return int(feature_subsample)


def random_forest_train(X, y, trees: int = 100, bootstrap: bool = True, feature_subsample="sqrt", seed: int = 0) -> Forest:
    """Bagged CART trees; each tree draws from its own seeded stream."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise BaselineError("empty training set")
    n_sub = _n_sub(feature_subsample, X.shape[1])
    grown = []
    for child in np.random.SeedSequence(seed).spawn(trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        grown.append(_grow(X[idx], y[idx], n_sub=n_sub, rng=rng))
    return Forest(grown)


def random_forest_votes(forest: Forest, X) -> np.ndarray:
    """(trees, samples) matrix of individual tree predictions."""
    return np.stack([cart_predict(t, X) for t in forest.trees])


def random_forest_predict(forest: Forest, X) -> np.ndarray:
    votes = random_forest_votes(forest, X).sum(axis=0)
    return (2 * votes >= len(forest.trees)).astype(int)


# time-sliced adapter

KINDS = ("knn", "naive_bayes", "cart", "random_forest")


def fit_flat(kind: str, X, y, seed: int = 0, **options):
    if kind == "knn":
        return knn_train(X, y, options.get("k", 5))
    if kind == "naive_bayes":
        return gaussian_nb_train(X, y)
    if kind == "cart":
        return cart_train(X, y)
    if kind == "random_forest":
        return random_forest_train(X, y, options.get("trees", 100), seed=seed)
    raise BaselineError(f"unknown baseline {kind!r}; choose from {KINDS}")


def predict_flat(kind: str, model, X) -> np.ndarray:
    return {
        "knn": knn_predict,
        "naive_bayes": gaussian_nb_predict,
        "cart": cart_predict,
        "random_forest": random_forest_predict,
    }[kind](model, X)


class PerTimeBaseline:
    """A baseline retrained on the training prefixes for each requested t.

    Plugs into the shared time-sliced harness as a scorer whose scores are
    the hard 0/1 predictions.
    """

    def __init__(self, kind: str, train_set, seed: int = 0, normalizer: Normalizer | None = None, **options):
        if kind not in KINDS:
            raise BaselineError(f"unknown baseline {kind!r}; choose from {KINDS}")
        self.kind = kind
        self.train_traces = list(train_set)
        self.normalizer = normalizer or fit_normalizer(self.train_traces)
        self.seed = seed
        self.options = options
        self._models: dict[int, object] = {}

    def model_at(self, t: int):
        if t not in self._models:
            X = flatten_many(self.train_traces, self.normalizer, t)
            y = np.array([tr.y for tr in self.train_traces])
            self._models[t] = fit_flat(self.kind, X, y, self.seed, **self.options)
        return self._models[t]

    def scores(self, traces, t: int, off_features=()) -> np.ndarray:
        X = flatten_many(traces, self.normalizer, t, off_features)
        return predict_flat(self.kind, self.model_at(t), X).astype(np.float64)


# model files
#
# layout: MAGIC (8 bytes) | version (uint32 LE) | JSON length (uint32 LE) | JSON body
# The body holds the kind, normalizer, training time and the fitted arrays as
# nested lists; floats are written with round-trip precision.

MAGIC = b"EGBASE\x00\x00"
FORMAT_VERSION = 1


def _model_payload(kind, model):
    if kind == "knn":
        return {"X": model.X.tolist(), "y": model.y.tolist(), "k": model.k}
    if kind == "naive_bayes":
        return {"log_prior": model.log_prior.tolist(), "mean": model.mean.tolist(), "var": model.var.tolist()}
    trees = model.trees if kind == "random_forest" else [model]
    return {"trees": [t.__dict__ for t in trees]}


def _model_from_payload(kind, p):
    if kind == "knn":
        return KNN(np.array(p["X"], dtype=np.float64), np.array(p["y"], dtype=int), p["k"])
    if kind == "naive_bayes":
        return GaussianNB(np.array(p["log_prior"]), np.array(p["mean"]), np.array(p["var"]))
    trees = [Tree(**t) for t in p["trees"]]
    return Forest(trees) if kind == "random_forest" else trees[0]


def save_baseline(path, kind: str, model, normalizer: Normalizer, t_seconds: int) -> None:
    body = json.dumps(
        {"kind": kind, "t_seconds": t_seconds, "normalizer": normalizer.to_dict(), "model": _model_payload(kind, model)},
        sort_keys=True,
    ).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(body)) + body)


def load_baseline(path):
    """Returns (kind, model, normalizer, t_seconds)."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise BaselineError(f"{path}: not a baseline model file")
    version, length = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise BaselineError(f"{path}: unsupported baseline format version {version}")
    body = data[len(MAGIC) + 8 :]
    if len(body) != length:
        raise BaselineError(f"{path}: truncated baseline file")
    d = json.loads(body.decode("utf-8"))
    return d["kind"], _model_from_payload(d["kind"], d["model"]), Normalizer.from_dict(d["normalizer"]), d["t_seconds"]


UNAVAILABLE = ("svm", "mlp", "adaboost", "gradient_boosting")
