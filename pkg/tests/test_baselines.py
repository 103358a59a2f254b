import math

import numpy as np
import pytest

from earlyguard.baselines import (
    KINDS,
    BaselineError,
    PerTimeBaseline,
    best_split,
    cart_predict,
    cart_train,
    fit_flat,
    flatten,
    flatten_many,
    gaussian_nb_log_posteriors,
    gaussian_nb_predict,
    gaussian_nb_train,
    knn_predict,
    knn_train,
    load_baseline,
    predict_flat,
    random_forest_predict,
    random_forest_train,
    random_forest_votes,
    save_baseline,
)
from earlyguard.evaluation import time_sliced_eval
from earlyguard.traces import Normalizer, fit_normalizer

from conftest import make_trace


def blobs(n=100, dim=5, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-gap / 2, 1.0, (n, dim)), rng.normal(gap / 2, 1.0, (n, dim))])
    y = np.repeat([0, 1], n)
    return X, y


def noisy(n=200, dim=3, seed=0):
    """Overlapping classes so trees grow deep and neighbours disagree."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    y = (X[:, 0] + 0.8 * rng.normal(size=n) > 0).astype(int)
    return X, y


# -- flattening --------------------------------------------------------------------


def test_flatten_layout():
    snaps = np.arange(60, dtype=float).reshape(6, 10) % 100
    norm = Normalizer(np.full(10, 2.0), np.full(10, 4.0))
    tr = make_trace("a", "malicious", snaps)
    assert len(flatten(tr, norm, 0).x) == 10
    sample = flatten(tr, norm, 4)
    assert len(sample.x) == 50 and sample.label == 1
    for t in range(5):
        for i in range(10):
            assert sample.x[10 * t + i] == (snaps[t, i] - 2.0) / 4.0
    assert np.array_equal(flatten_many([tr, tr], norm, 4)[1], sample.x)


def test_flatten_short_trace():
    with pytest.raises(BaselineError):
        flatten(make_trace("a", "benign", np.ones((2, 10))), Normalizer.identity(), 2)


# -- kNN -------------------------------------------------------------------------------


def knn_oracle(Xtr, ytr, q, k):
    dists = sorted((sum((a - b) ** 2 for a, b in zip(row, q)), i) for i, row in enumerate(Xtr.tolist()))
    votes = sum(ytr[i] for _, i in dists[:k])
    return int(2 * votes >= k)


@pytest.mark.parametrize("k", [1, 4, 5])
def test_knn_matches_oracle(k):
    X, y = noisy()
    Q = np.random.default_rng(9).normal(size=(200, 3))
    model = knn_train(X, y, k)
    assert knn_predict(model, Q).tolist() == [knn_oracle(X, y, q, k) for q in Q.tolist()]


def test_knn_exact_match_and_duplicates():
    X = np.array([[0.0], [0.0], [0.0], [0.5], [0.5]])
    y = np.array([0, 0, 0, 1, 1])
    assert knn_predict(knn_train(X, y, 1), [[0.5]]).tolist() == [1]
    assert knn_predict(knn_train(X, y, 5), [[0.4]]).tolist() == [0]


def test_knn_tie_is_malicious():
    X, y = np.array([[0.0], [1.0]]), np.array([0, 1])
    assert knn_predict(knn_train(X, y, 2), [[0.0]]).tolist() == [1]


def test_knn_k_too_large():
    with pytest.raises(BaselineError):
        knn_train(np.zeros((3, 2)), [0, 1, 0], k=5)


# -- naive Bayes -----------------------------------------------------------------------


def test_nb_midpoint_tie():
    model = gaussian_nb_train([[-2.0], [0.0], [0.0], [2.0]], [0, 0, 1, 1])
    assert gaussian_nb_predict(model, [[0.0]]).tolist() == [1]
    assert gaussian_nb_predict(model, [[-1.0], [1.0]]).tolist() == [0, 1]


def test_nb_density_oracle():
    X, y = noisy(100, 4, seed=2)
    model = gaussian_nb_train(X, y)
    Q = np.random.default_rng(3).normal(size=(50, 4))
    got = gaussian_nb_log_posteriors(model, Q)
    for c in (0, 1):
        rows = X[y == c].tolist()
        prior = len(rows) / len(X)
        means = [sum(r[j] for r in rows) / len(rows) for j in range(4)]
        vars_ = [sum((r[j] - means[j]) ** 2 for r in rows) / len(rows) + 1e-9 for j in range(4)]
        for qi, q in enumerate(Q.tolist()):
            logp = math.log(prior)
            for j in range(4):
                dens = math.exp(-((q[j] - means[j]) ** 2) / (2 * vars_[j])) / math.sqrt(2 * math.pi * vars_[j])
                logp += math.log(dens)
            assert abs(got[qi, c] - logp) < 1e-10


def test_nb_needs_two_classes():
    with pytest.raises(BaselineError):
        gaussian_nb_train([[1.0], [2.0]], [1, 1])


# -- CART --------------------------------------------------------------------------------


def _gini(ys):
    n = len(ys)
    if n == 0:
        return 0.0
    p = sum(ys) / n
    return 1.0 - p * p - (1 - p) * (1 - p)


def split_oracle(X, y):
    """Exhaustive scan: every feature, every midpoint, first strict best wins."""
    rows, ys = X.tolist(), y.tolist()
    n = len(ys)
    parent = _gini(ys)
    best = None
    for f in range(len(rows[0])):
        values = sorted(set(r[f] for r in rows))
        for a, b in zip(values, values[1:]):
            thr = 0.5 * (a + b)
            left = [ys[i] for i in range(n) if rows[i][f] <= thr]
            right = [ys[i] for i in range(n) if rows[i][f] > thr]
            gain = parent - (len(left) * _gini(left) + len(right) * _gini(right)) / n
            if best is None or gain > best[2] + 1e-12:
                best = (f, thr, gain)
    return best if best and best[2] > 1e-12 else None


def cart_oracle_predict(X, y, q):
    """Re-grow the tree recursively along the query's path only."""
    idx = list(range(len(y)))
    while True:
        ys = y[idx]
        if ys.min() == ys.max():
            return int(ys[0])
        split = split_oracle(X[idx], ys)
        if split is None:
            return int(2 * ys.sum() >= len(ys))
        f, thr, _ = split
        idx = [i for i in idx if (X[i, f] <= thr) == (q[f] <= thr)]


def test_best_split_matches_exhaustive_scan():
    for seed in range(5):
        X, y = noisy(50, 3, seed)
        f, thr, gain = best_split(X, y, range(3))
        of, othr, ogain = split_oracle(X, y)
        assert (f, thr) == (of, othr)
        assert gain == pytest.approx(ogain, abs=1e-12)


def test_cart_matches_oracle():
    X, y = noisy()
    Q = np.random.default_rng(11).normal(size=(200, 3))
    tree = cart_train(X, y)
    assert cart_predict(tree, Q).tolist() == [cart_oracle_predict(X, y, q) for q in Q]


def test_cart_single_split_on_separable_line():
    X = np.array([[0.0], [1.0], [2.0], [5.0], [6.0]])
    y = np.array([0, 0, 0, 1, 1])
    tree = cart_train(X, y)
    assert tree.n_leaves == 2 and tree.threshold[0] == 3.5
    assert cart_predict(tree, X).tolist() == y.tolist()


def test_cart_pure_node_is_leaf():
    tree = cart_train(np.random.default_rng(0).normal(size=(10, 2)), np.ones(10, dtype=int))
    assert tree.feature == [-1] and tree.value == [1]


def test_split_tie_prefers_lowest_feature_and_threshold():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    y = np.array([0, 1, 0, 1])
    f, thr, _ = best_split(X, y, [1, 0])
    assert f == 0
    assert thr == 0.5


# -- random forest ------------------------------------------------------------------------


def test_degenerate_forest_equals_cart():
    X, y = noisy()
    Q = np.random.default_rng(4).normal(size=(200, 3))
    forest = random_forest_train(X, y, trees=1, bootstrap=False, feature_subsample="all", seed=3)
    assert random_forest_predict(forest, Q).tolist() == cart_predict(cart_train(X, y), Q).tolist()


def test_forest_deterministic_and_votes():
    X, y = noisy()
    Q = np.random.default_rng(5).normal(size=(200, 3))
    a = random_forest_train(X, y, trees=15, seed=7)
    b = random_forest_train(X, y, trees=15, seed=7)
    assert random_forest_predict(a, Q).tolist() == random_forest_predict(b, Q).tolist()
    votes = random_forest_votes(a, Q)
    for i, q in enumerate(Q):
        recount = sum(cart_predict(t, q[None, :])[0] for t in a.trees)
        assert votes[:, i].sum() == recount
        assert random_forest_predict(a, q[None, :])[0] == int(2 * recount >= 15)
    c = random_forest_train(X, y, trees=15, seed=8)
    assert any(ta.threshold != tc.threshold for ta, tc in zip(a.trees, c.trees))


# -- shared adapter --------------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_blob_training_accuracy(kind):
    X, y = blobs()
    model = fit_flat(kind, X, y, seed=0, trees=25)
    acc = np.mean(predict_flat(kind, model, X) == y)
    assert acc > 0.99 if kind == "naive_bayes" else acc == 1.0


@pytest.mark.parametrize("kind", KINDS)
def test_baseline_file_round_trip(tmp_path, kind, small_data):
    norm = fit_normalizer(small_data)
    X = flatten_many(list(small_data), norm, 3)
    model = fit_flat(kind, X, small_data.labels, seed=1, trees=5)
    save_baseline(tmp_path / "b.bin", kind, model, norm, 3)
    k2, m2, n2, t2 = load_baseline(tmp_path / "b.bin")
    assert (k2, t2, n2) == (kind, 3, norm)
    assert np.array_equal(predict_flat(kind, m2, X), predict_flat(kind, model, X))


def test_baseline_file_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nonsense" * 4)
    with pytest.raises(BaselineError):
        load_baseline(tmp_path / "x.bin")


def test_per_time_baseline_in_shared_harness(small_data):
    base = PerTimeBaseline("cart", small_data)
    m = time_sliced_eval(base, small_data, range(1, 6))
    assert [r.t for r in m.rows] == [1, 2, 3, 4, 5]
    assert all(r.accuracy == 1.0 for r in m.rows)  # training-set fit


def test_unknown_kind():
    with pytest.raises(BaselineError):
        PerTimeBaseline("svm", [])
