"""Experiment protocols: time-sliced metrics, group holdouts and feature ablation.

Any model is reduced to a scorer, a callable ``(traces, t, off_features)``
returning one score in [0, 1] per trace. Scores at or above 0.5 are
malicious. ``off_features`` are standardized-input columns forced to 0,
which is the training mean of that feature.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gru
from .ensemble import Ensemble
from .gru import GruNetwork, HyperConfig
from .traces import FEATURES, N_FEATURES, LabeledDataset, fit_normalizer, holdout_group

Scorer = Callable[..., np.ndarray]

THRESHOLD = 0.5


class EvaluationError(RuntimeError):
    pass


def as_scorer(model) -> Scorer:
    if isinstance(model, GruNetwork):
        return partial(gru.predict_many, model)
    if isinstance(model, Ensemble) or hasattr(model, "scores"):
        return model.scores
    if callable(model):
        return model
    raise TypeError(f"cannot score with {type(model).__name__}")


def _check_coverage(traces, t):
    short = [tr.sample_id for tr in traces if len(tr.snapshots) < t + 1]
    if short:
        raise EvaluationError(f"traces missing snapshots for t={t}: {', '.join(short)}")


def _accuracy(scorer, traces, t, off=()) -> float:
    y = np.array([tr.y for tr in traces])
    pred = np.asarray(scorer(traces, t, off)) >= THRESHOLD
    return float(np.mean(pred == y))


@dataclass(frozen=True)
class TimeRow:
    t: int
    n: int
    n_benign: int
    n_malicious: int
    fp: int
    fn: int
    accuracy: float
    fp_rate: float | None
    fn_rate: float | None

    @property
    def correct(self) -> int:
        return self.n - self.fp - self.fn


TIME_METRICS = ("accuracy", "fp_rate", "fn_rate", "n", "n_benign", "n_malicious", "fp", "fn")


@dataclass
class TimeSlicedMetrics:
    rows: list[TimeRow]
    sample_ids: list[str] = field(default_factory=list, compare=False)
    labels: np.ndarray | None = field(default=None, compare=False)
    scores: dict[int, np.ndarray] = field(default_factory=dict, compare=False)

    kind = "time_sliced"

    def row(self, t: int) -> TimeRow:
        for r in self.rows:
            if r.t == t:
                return r
        raise KeyError(t)

    def accuracy(self, t: int) -> float:
        return self.row(t).accuracy

    def to_rows(self):
        return [(r.t, "", m, getattr(r, m)) for r in self.rows for m in TIME_METRICS]

    @classmethod
    def from_rows(cls, rows):
        by_t: dict[int, dict] = {}
        for t, _key, metric, value in rows:
            by_t.setdefault(t, {})[metric] = value
        return cls([TimeRow(t=t, **{m: by_t[t][m] for m in TIME_METRICS}) for t in sorted(by_t)])


def tally(t: int, y: np.ndarray, pred: np.ndarray) -> TimeRow:
    y = np.asarray(y).astype(int)
    pred = np.asarray(pred).astype(int)
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    n_benign = int(np.sum(y == 0))
    n_mal = int(np.sum(y == 1))
    n = len(y)
    return TimeRow(
        t,
        n,
        n_benign,
        n_mal,
        fp,
        fn,
        1.0 - (fp + fn) / n,
        fp / n_benign if n_benign else None,
        fn / n_mal if n_mal else None,
    )


def time_sliced_eval(model, test: LabeledDataset | Sequence, t_range=range(1, 21)) -> TimeSlicedMetrics:
    """Accuracy and per-class error rates with every trace truncated to each t.

    The FP rate is over benign traces and the FN rate over malicious ones;
    a rate whose class is absent is None.
    """
    traces = list(test)
    if not traces:
        raise EvaluationError("empty test set")
    t_range = list(t_range)
    _check_coverage(traces, max(t_range))
    scorer = as_scorer(model)
    y = np.array([tr.y for tr in traces])
    rows, scores = [], {}
    for t in t_range:
        s = np.asarray(scorer(traces, t, ()), dtype=np.float64)
        scores[t] = s
        rows.append(tally(t, y, s >= THRESHOLD))
    return TimeSlicedMetrics(rows, [tr.sample_id for tr in traces], y, scores)


# group holdouts


@dataclass
class HoldoutReport:
    key: str
    value: str
    held_out_size: int
    accuracy: dict[int, float]
    per_seed: dict[int, dict[int, float]]
    held_out_ids: list[str] = field(default_factory=list, compare=False)
    train_ids: list[str] = field(default_factory=list, compare=False)

    kind = "holdout"

    def to_rows(self):
        rows = [("", "", "held_out_size", self.held_out_size), ("", "", "group", f"{self.key}={self.value}")]
        rows += [(t, "mean", "accuracy", a) for t, a in sorted(self.accuracy.items())]
        for seed, accs in self.per_seed.items():
            rows += [(t, f"seed={seed}", "accuracy", a) for t, a in sorted(accs.items())]
        return rows

    @classmethod
    def from_rows(cls, rows):
        size, group, acc, per_seed = 0, "=", {}, {}
        for t, key, metric, value in rows:
            if metric == "held_out_size":
                size = value
            elif metric == "group":
                group = value
            elif key == "mean":
                acc[t] = value
            else:
                per_seed.setdefault(int(key.split("=", 1)[1]), {})[t] = value
        k, v = group.split("=", 1)
        return cls(k, v, size, acc, per_seed)


def family_holdout_experiment(
    dataset: LabeledDataset,
    key: str,
    value: str,
    config: HyperConfig,
    seeds: Sequence[int] = (0,),
    t_range=range(1, 11),
    exclude_disputed: bool = True,
) -> HoldoutReport:
    """Train without a family (or variant) and measure detection on it alone."""
    train_set, held = holdout_group(dataset, key, value, exclude_disputed)
    if len({tr.y for tr in train_set}) < 2:
        raise EvaluationError(f"training set without {key}={value} has a single class")
    held_ids = set(held.ids)
    leaked = held_ids.intersection(train_set.ids)
    if leaked:
        raise EvaluationError(f"held-out ids leaked into training: {sorted(leaked)}")
    norm = fit_normalizer(train_set)
    t_range = list(t_range)
    per_seed = {}
    for seed in seeds:
        init_seed, train_seed = np.random.SeedSequence([seed, 2]).generate_state(2, dtype=np.uint32)
        net = gru.init_params(config, int(init_seed))
        gru.train(net, train_set, norm, int(train_seed))
        metrics = time_sliced_eval(net, held, t_range)
        per_seed[int(seed)] = {r.t: r.accuracy for r in metrics.rows}
    mean = {t: float(np.mean([per_seed[s][t] for s in per_seed])) for t in t_range}
    return HoldoutReport(key, value, len(held), mean, per_seed, held.ids, train_set.ids)


# feature masking


def mask_features(sequences: np.ndarray, off_features) -> np.ndarray:
    """Copy of standardized sequences with the listed feature columns zeroed."""
    off = sorted(set(off_features))
    if any(not 0 <= i < N_FEATURES for i in off):
        raise EvaluationError(f"feature indices must lie in [0, {N_FEATURES}), got {off}")
    out = np.array(sequences, dtype=np.float64, copy=True)
    if off:
        out[..., off] = 0.0
    return out


def subset_impact(baseline_pp: float, masked_pp: float, k: int) -> float:
    """Accuracy change in percentage points shared equally by k masked features."""
    return -(baseline_pp - masked_pp) / k


@dataclass
class AblationReport:
    t: int
    k: int
    baseline_pp: float
    subsets: list[tuple[tuple[int, ...], float, float]]
    per_feature: dict[int, float]

    kind = "ablation"

    def to_rows(self):
        rows = [(self.t, "", "baseline_accuracy_pp", self.baseline_pp), (self.t, "", "subset_size", self.k)]
        for subset, masked, impact in self.subsets:
            name = "+".join(FEATURES[i] for i in subset)
            rows.append((self.t, name, "masked_accuracy_pp", masked))
            rows.append((self.t, name, "impact", impact))
        rows += [(self.t, FEATURES[f], "mean_impact", v) for f, v in sorted(self.per_feature.items())]
        return rows

    @classmethod
    def from_rows(cls, rows):
        index = {name: i for i, name in enumerate(FEATURES)}
        t = baseline = k = None
        masked, impacts, per_feature, order = {}, {}, {}, []
        for rt, key, metric, value in rows:
            t = rt
            if metric == "baseline_accuracy_pp":
                baseline = value
            elif metric == "subset_size":
                k = value
            elif metric == "masked_accuracy_pp":
                subset = tuple(index[n] for n in key.split("+"))
                order.append(subset)
                masked[subset] = value
            elif metric == "impact":
                impacts[tuple(index[n] for n in key.split("+"))] = value
            elif metric == "mean_impact":
                per_feature[index[key]] = value
        return cls(t, k, baseline, [(s, masked[s], impacts[s]) for s in order], per_feature)


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def impact_factors(model, test, t_seconds: int, k: int, baseline: float | None = None, jobs: int = 1) -> AblationReport:
    """Mask every size-k feature subset and attribute the accuracy change.

    ``baseline`` is the unmasked accuracy in percentage points; it is
    computed when omitted.
    """
    if k not in (1, 2, 3):
        raise EvaluationError("subset size must be 1, 2 or 3")
    traces = list(test)
    _check_coverage(traces, t_seconds)
    scorer = as_scorer(model)
    if baseline is None:
        baseline = 100.0 * _accuracy(scorer, traces, t_seconds)
    subsets = list(itertools.combinations(range(N_FEATURES), k))
    masked = _map(lambda s: 100.0 * _accuracy(scorer, traces, t_seconds, s), subsets, jobs)
    results = [(s, m, subset_impact(baseline, m, k)) for s, m in zip(subsets, masked)]
    per_feature = {}
    for f in range(N_FEATURES):
        vals = [imp for s, _, imp in results if f in s]
        per_feature[f] = float(np.mean(vals))
    return AblationReport(t_seconds, k, baseline, results, per_feature)


@dataclass
class FeaturesOnReport:
    t: int
    best: list[tuple[int, float, tuple[int, ...]]]
    evaluated: dict[int, list[tuple[tuple[int, ...], float]]] = field(default_factory=dict, compare=False)

    kind = "features_on"

    def to_rows(self):
        return [
            (self.t, "+".join(FEATURES[i] for i in subset), f"best_accuracy_size_{size}", acc)
            for size, acc, subset in self.best
        ]

    @classmethod
    def from_rows(cls, rows):
        index = {name: i for i, name in enumerate(FEATURES)}
        best, t = [], None
        for rt, key, metric, value in rows:
            t = rt
            size = int(metric.rsplit("_", 1)[1])
            best.append((size, value, tuple(index[n] for n in key.split("+"))))
        return cls(t, best)


def features_on_search(model, test, t_seconds: int, max_subset_size: int, jobs: int = 1) -> FeaturesOnReport:
    """Best accuracy with only s features switched on, for s = 1..max_subset_size.

    Ties keep the lexicographically first subset.
    """
    if not 1 <= max_subset_size <= N_FEATURES:
        raise EvaluationError(f"max_subset_size must lie in 1..{N_FEATURES}")
    traces = list(test)
    _check_coverage(traces, t_seconds)
    scorer = as_scorer(model)
    everything = set(range(N_FEATURES))
    best, evaluated = [], {}
    for size in range(1, max_subset_size + 1):
        subsets = list(itertools.combinations(range(N_FEATURES), size))
        accs = _map(lambda s: _accuracy(scorer, traces, t_seconds, tuple(sorted(everything - set(s)))), subsets, jobs)
        evaluated[size] = list(zip(subsets, accs))
        i = int(np.argmax(accs))
        best.append((size, accs[i], subsets[i]))
    return FeaturesOnReport(t_seconds, best, evaluated)


# report files

REPORT_COLUMNS = ("report", "t", "key", "metric", "value")
REPORT_TYPES = {c.kind: c for c in (TimeSlicedMetrics, HoldoutReport, AblationReport, FeaturesOnReport)}


def _encode(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _decode(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _jsonable(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def report_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for t, key, metric, value in report.to_rows():
        writer.writerow([report.kind, _encode(t), key, metric, _encode(value)])
    return buf.getvalue()


def report_json(report) -> str:
    rows = [
        {"t": _jsonable(t) if t != "" else None, "key": key, "metric": metric, "value": _jsonable(value)}
        for t, key, metric, value in report.to_rows()
    ]
    return json.dumps({"report": report.kind, "rows": rows}, indent=1, sort_keys=True) + "\n"


def emit_report(report, path, format: str = "csv") -> Path:
    path = Path(path)
    if format == "csv":
        text = report_csv(report)
    elif format == "json":
        text = report_json(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise EvaluationError(f"cannot write report to {path}: {exc}") from None
    return path


def parse_report(text: str, format: str = "csv"):
    if format == "json":
        payload = json.loads(text)
        kind = payload["report"]
        rows = [("" if r["t"] is None else r["t"], r["key"], r["metric"], r["value"]) for r in payload["rows"]]
    else:
        reader = csv.reader(io.StringIO(text, newline=""))
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise EvaluationError(f"unexpected report header {header!r}")
        rows, kinds = [], set()
        for rec in reader:
            kinds.add(rec[0])
            t = _decode(rec[1])
            rows.append(("" if t is None else t, rec[2], rec[3], _decode(rec[4]) if rec[3] != "group" else rec[4]))
        if len(kinds) != 1:
            raise EvaluationError(f"report mixes types {sorted(kinds)}")
        kind = kinds.pop()
    return REPORT_TYPES[kind].from_rows(rows)


def read_report(path):
    path = Path(path)
    fmt = "json" if path.suffix == ".json" else "csv"
    return parse_report(path.read_text(encoding="utf-8"), fmt)


def metrics_table_csv(metrics: TimeSlicedMetrics) -> str:
    """One row per second; convenient for tables, unlike the long format."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("t", "accuracy", "fp_rate", "fn_rate", "n", "n_benign", "n_malicious", "fp", "fn"))
    for r in metrics.rows:
        writer.writerow(
            [r.t] + [_encode(v) for v in (r.accuracy, r.fp_rate, r.fn_rate)] + [r.n, r.n_benign, r.n_malicious, r.fp, r.fn]
        )
    return buf.getvalue()


def scores_csv(metrics: TimeSlicedMetrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sample_id", "label", "t", "score"))
    for t, s in metrics.scores.items():
        for sid, lab, v in zip(metrics.sample_ids, metrics.labels, s):
            writer.writerow([sid, int(lab), t, repr(float(v))])
    return buf.getvalue()
