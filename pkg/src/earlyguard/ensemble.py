"""Max-score ensembles of trained networks and prediction-confidence tests."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import gru
from .gru import GruNetwork, ModelError
from .traces import BehaviorTrace

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Ensemble:
    members: tuple[GruNetwork, ...]
    threshold: float = 0.5
    provenance: tuple[dict, ...] = ()

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ModelError("an ensemble needs at least one member")
        dims = {m.input_dim for m in members}
        if len(dims) != 1:
            raise ModelError(f"members disagree on input width: {sorted(dims)}")
        object.__setattr__(self, "members", members)
        if not self.provenance:
            object.__setattr__(self, "provenance", tuple(m.provenance() for m in members))

    def with_member(self, network: GruNetwork) -> "Ensemble":
        return Ensemble(self.members + (network,), self.threshold)

    def member_scores(self, traces: Sequence[BehaviorTrace], t_seconds: int, off_features=()) -> np.ndarray:
        """(members, traces) array of individual scores."""
        return np.stack([gru.predict_many(m, traces, t_seconds, off_features) for m in self.members])

    def scores(self, traces: Sequence[BehaviorTrace], t_seconds: int, off_features=()) -> np.ndarray:
        return self.member_scores(traces, t_seconds, off_features).max(axis=0)


def ensemble_score(e: Ensemble, trace: BehaviorTrace, t_seconds: int) -> float:
    return float(e.scores([trace], t_seconds)[0])


def ensemble_classify(e: Ensemble, trace: BehaviorTrace, t_seconds: int) -> int:
    return gru.classify(ensemble_score(e, trace, t_seconds), e.threshold)


def confidence(b: int, p) -> float | np.ndarray:
    """1 - |b - p|: how close the score came to the true label."""
    return 1.0 - np.abs(b - np.asarray(p, dtype=np.float64)) if np.ndim(p) else 1.0 - abs(b - p)


@dataclass(frozen=True)
class TTestResult:
    statistic: float | None
    p_value: float | None
    significant: bool
    n: int
    mean_difference: float
    degenerate: bool = False
    reason: str = ""


def confidence_ttest(a, b, alpha: float = 0.01) -> TTestResult:
    """Paired one-sided t-test that ``a`` is more confident than ``b``.

    Zero variance in the differences makes the statistic undefined; such
    inputs are reported as degenerate and never significant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two paired samples")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not math.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mean)):
        return TTestResult(None, None, False, n, mean, True, "differences have zero variance")
    t_stat = mean / (sd / math.sqrt(n))
    p = float(stats.t.sf(t_stat, df=n - 1))
    return TTestResult(t_stat, p, p < alpha, n, mean)


# manifests


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, member_paths: Sequence, threshold: float = 0.5) -> dict:
    """Record member model files, as paths relative to the manifest, with digests."""
    path = Path(path)
    base = path.parent
    members = []
    for mp in member_paths:
        mp = Path(mp)
        net = gru.load_model(mp)
        # relative even across directories, so the manifest does not depend
        # on where the run happened
        ref = Path(os.path.relpath(mp.resolve(), base.resolve())).as_posix()
        members.append({"path": ref, "sha256": _sha256(mp), **net.provenance()})
    manifest = {"format_version": MANIFEST_VERSION, "threshold": threshold, "members": members}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> Ensemble:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not a JSON manifest ({exc})") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ModelError(f"{path}: unsupported manifest version {manifest.get('format_version')!r}")
    members = []
    for entry in manifest["members"]:
        mp = Path(entry["path"])
        if not mp.is_absolute():
            mp = path.parent / mp
        if _sha256(mp) != entry["sha256"]:
            raise ModelError(f"{mp}: digest does not match manifest")
        members.append(gru.load_model(mp))
    return Ensemble(tuple(members), float(manifest["threshold"]))
