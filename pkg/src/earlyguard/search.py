"""Random hyperparameter search scored by stratified k-fold cross-validation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import gru
from .gru import HyperConfig
from .traces import LabeledDataset, fit_normalizer

log = logging.getLogger(__name__)

# The published search space has eight dimensions; the training time is an
# extra randomized dimension that is not part of its cardinality.
TABLE_FIELDS = (
    "depth",
    "bidirectional",
    "hidden_neurons",
    "epochs",
    "dropout_rate",
    "weight_reg",
    "bias_reg",
    "batch_size",
)


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    depth: tuple = gru.DEPTHS
    bidirectional: tuple = (True, False)
    hidden_neurons: tuple = tuple(range(1, gru.MAX_HIDDEN + 1))
    epochs: tuple = tuple(range(1, gru.MAX_EPOCHS + 1))
    dropout_rate: tuple = gru.DROPOUT_RATES
    weight_reg: tuple = gru.REG_MODES
    bias_reg: tuple = gru.REG_MODES
    batch_size: tuple = gru.BATCH_SIZES
    train_time_seconds: tuple = tuple(range(1, gru.MAX_TRAIN_TIME + 1))

    def __post_init__(self):
        for f in fields(self):
            values = tuple(getattr(self, f.name))
            if not values:
                raise SearchError(f"search domain {f.name} is empty")
            object.__setattr__(self, f.name, values)

    def cardinality(self, include_time: bool = False) -> int:
        names = TABLE_FIELDS + (("train_time_seconds",) if include_time else ())
        return math.prod(len(getattr(self, name)) for name in names)

    def contains(self, config: HyperConfig) -> bool:
        return all(getattr(config, f.name) in getattr(self, f.name) for f in fields(self))

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        """Domains given as lists, or as {"min": a, "max": b} integer ranges.

        Keys may be snake_case or the hyperparameter table's column names.
        """
        reverse = {v: k for k, v in gru.TABLE_NAMES.items()}
        kwargs = {}
        for key, value in d.items():
            name = reverse.get(key, key)
            if name not in gru.TABLE_NAMES:
                raise SearchError(f"unknown search-space field {key!r}")
            if isinstance(value, dict):
                value = range(int(value["min"]), int(value["max"]) + 1)
            if name in ("weight_reg", "bias_reg"):
                try:
                    value = [gru.REG_ALIASES[str(v).lower()] for v in value]
                except KeyError as exc:
                    raise SearchError(f"unknown regularisation {exc.args[0]!r}") from None
            kwargs[name] = tuple(value)
        return cls(**kwargs)


def sample_config(space: SearchSpace, rng: np.random.Generator) -> HyperConfig:
    """Draw every field independently and uniformly from its domain."""
    values = {}
    for f in fields(space):
        domain = getattr(space, f.name)
        values[f.name] = domain[int(rng.integers(len(domain)))]
    return HyperConfig(**values)


def kfold_split(dataset: LabeledDataset, k: int = 10, seed: int = 0) -> list[LabeledDataset]:
    """Stratified k folds; fold sizes differ by at most one."""
    n = len(dataset)
    if k < 2:
        raise SearchError("k must be at least 2")
    if n < k:
        raise SearchError(f"dataset of {n} traces cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    order = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        order.extend(idx[rng.permutation(len(idx))].tolist())
    buckets = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        buckets[pos % k].append(dataset[i])
    return [dataset.subset(b, role="fold", note=f"fold {j}/{k}") for j, b in enumerate(buckets)]


@dataclass
class FoldMetrics:
    accuracy: float
    fp_rate: float | None
    fn_rate: float | None


def _rates(scores, y):
    pred = (np.asarray(scores) >= 0.5).astype(int)
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    n_benign = int(np.sum(y == 0))
    n_mal = int(np.sum(y == 1))
    return FoldMetrics(
        1.0 - (fp + fn) / len(y),
        fp / n_benign if n_benign else None,
        fn / n_mal if n_mal else None,
    )


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class TrialResult:
    config: HyperConfig
    fold_accuracies: list[float]
    mean_accuracy: float
    mean_fp_rate: float | None
    mean_fn_rate: float | None
    time_accuracies: dict[int, float] = field(default_factory=dict)
    wall_time: float = 0.0
    index: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def evaluate_config(
    config: HyperConfig,
    dataset: LabeledDataset,
    k: int = 10,
    seed: int = 0,
    eval_times: Sequence[int] = (),
) -> TrialResult:
    """Cross-validate one configuration.

    Each fold gets its own normalizer fitted on the other k-1 folds and a
    freshly initialized network. Accuracy is measured at the configuration's
    training time; ``eval_times`` adds per-second accuracies for selection.
    """
    start = time.perf_counter()
    folds = kfold_split(dataset, k, seed)
    seeds = np.random.SeedSequence([seed, 1]).generate_state(2 * k, dtype=np.uint32)
    metrics, per_time = [], {t: [] for t in eval_times}
    for j in range(k):
        held = folds[j]
        train_traces = [tr for i, fold in enumerate(folds) if i != j for tr in fold]
        try:
            norm = fit_normalizer(train_traces)
            net = gru.init_params(config, int(seeds[2 * j]))
            gru.train(net, train_traces, norm, int(seeds[2 * j + 1]))
            y = held.labels
            metrics.append(_rates(gru.predict_many(net, list(held), config.train_time_seconds), y))
            for t in eval_times:
                per_time[t].append(_rates(gru.predict_many(net, list(held), t), y).accuracy)
        except Exception as exc:
            raise SearchError(f"fold {j}: {exc}") from exc
    accs = [m.accuracy for m in metrics]
    return TrialResult(
        config,
        accs,
        float(np.mean(accs)),
        _mean_defined(m.fp_rate for m in metrics),
        _mean_defined(m.fn_rate for m in metrics),
        {t: float(np.mean(v)) for t, v in per_time.items()},
        time.perf_counter() - start,
    )


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0, index]))


def _run_trial(args):
    space, dataset, k, seed, index, eval_times = args
    rng = trial_rng(seed, index)
    config = sample_config(space, rng)
    cv_seed = int(rng.integers(2**31))
    try:
        result = evaluate_config(config, dataset, k, cv_seed, eval_times)
    except Exception as exc:
        log.warning("trial %d failed: %s", index, exc)
        return TrialResult(config, [], float("nan"), None, None, {}, 0.0, index, str(exc))
    result.index = index
    return result


def rank_key(result: TrialResult):
    fn = result.mean_fn_rate if result.mean_fn_rate is not None else math.inf
    return (-result.mean_accuracy, fn, result.index)


def random_search(
    space: SearchSpace,
    dataset: LabeledDataset,
    trials: int,
    k: int = 10,
    seed: int = 0,
    jobs: int = 1,
    eval_times: Sequence[int] = (),
) -> tuple[list[TrialResult], list[TrialResult]]:
    """Evaluate ``trials`` random configurations; returns (ranked, failed).

    Each trial draws from its own rng stream derived from (seed, index), so
    the results do not depend on ``jobs``.
    """
    if trials < 1:
        raise SearchError("trials must be at least 1")
    tasks = [(space, dataset, k, seed, i, tuple(eval_times)) for i in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, tasks))
    else:
        results = [_run_trial(t) for t in tasks]
    failed = [r for r in results if not r.ok]
    ok = [r for r in results if r.ok]
    if not ok:
        raise SearchError(f"all {trials} trials failed; first error: {failed[0].error}")
    return sorted(ok, key=rank_key), failed


def select_best_over_time(results: Sequence[TrialResult], times: Sequence[int] = (1, 2, 3, 4, 5)) -> list[TrialResult]:
    """Best configuration at each listed second, deduplicated in time order."""
    chosen: list[TrialResult] = []
    for t in times:
        candidates = [r for r in results if t in r.time_accuracies]
        if not candidates:
            raise SearchError(f"no trial has an accuracy recorded at t={t}")
        best = min(candidates, key=lambda r: (-r.time_accuracies[t],) + rank_key(r)[1:])
        if all(best is not c for c in chosen):
            chosen.append(best)
    return chosen


# result files

TRIAL_COLUMNS = (
    "rank",
    "index",
    *gru.TABLE_NAMES.keys(),
    "mean_accuracy",
    "mean_fp_rate",
    "mean_fn_rate",
    "fold_accuracies",
)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trial_rows(ranked: Sequence[TrialResult]) -> list[list[str]]:
    rows = []
    for rank, r in enumerate(ranked, start=1):
        cfg = r.config.to_dict()
        rows.append(
            [str(rank), str(r.index)]
            + [_cell(cfg[name]) for name in gru.TABLE_NAMES]
            + [_cell(r.mean_accuracy), _cell(r.mean_fp_rate), _cell(r.mean_fn_rate)]
            + [";".join(repr(a) for a in r.fold_accuracies)]
        )
    return rows


def best_configs_json(best: Sequence[TrialResult]) -> str:
    payload = [
        {
            "trial_index": r.index,
            "mean_accuracy": r.mean_accuracy,
            "time_accuracies": {str(t): a for t, a in sorted(r.time_accuracies.items())},
            "config": r.config.to_table(),
        }
        for r in best
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
