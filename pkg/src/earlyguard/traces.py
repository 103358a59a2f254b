"""Behaviour traces: data model, labelling, splitting, normalization and I/O.

A trace is one executable's per-second record of ten machine-activity
counters. Row ``i`` of the snapshot matrix was captured ``i`` seconds into
execution, so the prefix available at time ``t`` holds ``t + 1`` rows.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

FEATURES = (
    "cpu_system",
    "cpu_user",
    "packets_sent",
    "packets_received",
    "bytes_sent",
    "bytes_received",
    "memory_mb",
    "swap_mb",
    "total_processes",
    "max_process_id",
)
N_FEATURES = len(FEATURES)
PERCENT_FEATURES = (0, 1)

CSV_HEADER = ("sample_id", "label", "family", "variant", "first_seen", "t") + FEATURES

BENIGN = "benign"
MALICIOUS = "malicious"
EXCLUDED = "excluded"
LABELS = (BENIGN, MALICIOUS)
DISPUTED = "disputed"

MALICIOUS_ENGINE_THRESHOLD = 5


class TraceError(ValueError):
    """Raised for invalid traces, datasets or trace files."""


class Snapshot(NamedTuple):
    cpu_system: float
    cpu_user: float
    packets_sent: float
    packets_received: float
    bytes_sent: float
    bytes_received: float
    memory_mb: float
    swap_mb: float
    total_processes: float
    max_process_id: float


def snapshot_problem(values) -> str | None:
    """Return a description of the first invariant violation, or None."""
    values = np.asarray(values, dtype=float)
    if values.shape != (N_FEATURES,):
        return f"expected {N_FEATURES} features, got {values.size}"
    for i, v in enumerate(values):
        name = FEATURES[i]
        if not math.isfinite(v):
            return f"{name} is not finite ({v})"
        if v < 0:
            return f"{name} is negative ({v})"
        if i in PERCENT_FEATURES and v > 100:
            return f"{name} exceeds 100 percent ({v})"
    return None


def parse_utc(text: str) -> datetime:
    """Parse an ISO-8601 timestamp, treating naive values as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def format_utc(stamp: datetime) -> str:
    stamp = stamp.astimezone(timezone.utc)
    text = stamp.strftime("%Y-%m-%dT%H:%M:%S")
    if stamp.microsecond:
        text += f".{stamp.microsecond:06d}"
    return text + "Z"


@dataclass(frozen=True, eq=False)
class BehaviorTrace:
    sample_id: str
    label: str
    snapshots: np.ndarray
    first_seen: datetime | None = None
    family: str | None = None
    variant: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise TraceError(f"{self.sample_id}: label must be one of {LABELS}, got {self.label!r}")
        snaps = np.array(self.snapshots, dtype=np.float64)
        if snaps.ndim != 2 or snaps.shape[1] != N_FEATURES or snaps.shape[0] < 1:
            raise TraceError(
                f"{self.sample_id}: snapshots must be a non-empty (n, {N_FEATURES}) array, got {snaps.shape}"
            )
        for t, row in enumerate(snaps):
            problem = snapshot_problem(row)
            if problem:
                raise TraceError(f"{self.sample_id} t={t}: {problem}")
        snaps.flags.writeable = False
        object.__setattr__(self, "snapshots", snaps)
        if self.first_seen is not None:
            object.__setattr__(self, "first_seen", self.first_seen.astimezone(timezone.utc))

    @property
    def y(self) -> int:
        return int(self.label == MALICIOUS)

    @property
    def duration(self) -> int:
        """Largest t (seconds) that this trace covers."""
        return len(self.snapshots) - 1

    def snapshot(self, t: int) -> Snapshot:
        return Snapshot(*(float(v) for v in self.snapshots[t]))

    def __eq__(self, other):
        if not isinstance(other, BehaviorTrace):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.label == other.label
            and self.family == other.family
            and self.variant == other.variant
            and self.first_seen == other.first_seen
            and np.array_equal(self.snapshots, other.snapshots)
        )

    __hash__ = None


@dataclass(frozen=True)
class LabeledDataset:
    traces: tuple[BehaviorTrace, ...]
    role: str = "train"
    note: str = ""

    def __post_init__(self):
        traces = tuple(self.traces)
        object.__setattr__(self, "traces", traces)
        seen = set()
        for tr in traces:
            if tr.sample_id in seen:
                raise TraceError(f"duplicate sample_id {tr.sample_id!r}")
            seen.add(tr.sample_id)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]

    @property
    def ids(self) -> list[str]:
        return [tr.sample_id for tr in self.traces]

    @property
    def labels(self) -> np.ndarray:
        return np.array([tr.y for tr in self.traces], dtype=np.int64)

    def subset(self, traces: Iterable[BehaviorTrace], role: str | None = None, note: str | None = None):
        return LabeledDataset(
            tuple(traces),
            role=self.role if role is None else role,
            note=self.note if note is None else note,
        )

    def min_duration(self) -> int:
        return min(tr.duration for tr in self.traces)


def label_from_engine_count(detections: int) -> str:
    """Map an anti-virus engine detection count to a label.

    Five or more engines make a file malicious, zero makes it benign, and
    anything in between is contentious and dropped from the corpus.
    """
    if detections < 0:
        raise ValueError("detection count must be non-negative")
    if detections >= MALICIOUS_ENGINE_THRESHOLD:
        return MALICIOUS
    if detections == 0:
        return BENIGN
    return EXCLUDED


def split_by_date(traces, cutoff: datetime) -> tuple[LabeledDataset, LabeledDataset]:
    """Traces first seen strictly before ``cutoff`` train, the rest test."""
    cutoff = cutoff.astimezone(timezone.utc) if cutoff.tzinfo else cutoff.replace(tzinfo=timezone.utc)
    train, test = [], []
    for tr in traces:
        if tr.first_seen is None:
            raise TraceError(f"{tr.sample_id}: first_seen is required for a date split")
        (train if tr.first_seen < cutoff else test).append(tr)
    if not train:
        raise TraceError(f"no traces first seen before {format_utc(cutoff)}; training side empty")
    if not test:
        raise TraceError(f"no traces first seen at or after {format_utc(cutoff)}; test side empty")
    note = f"date split at {format_utc(cutoff)}"
    return LabeledDataset(tuple(train), "train", note), LabeledDataset(tuple(test), "test", note)


def cutoff_for_fraction(traces, fraction: float) -> datetime:
    """Cutoff placing roughly ``fraction`` of the traces (by first_seen) before it."""
    stamps = sorted(tr.first_seen for tr in traces)
    if len(stamps) < 2:
        raise TraceError("need at least two traces to choose a cutoff")
    idx = min(max(int(round(fraction * len(stamps))), 1), len(stamps) - 1)
    return stamps[idx]


@dataclass(frozen=True, eq=False)
class Normalizer:
    mu: np.ndarray
    sigma: np.ndarray
    fitted_on: int = 0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if mu.shape != (N_FEATURES,) or sigma.shape != (N_FEATURES,):
            raise TraceError("normalizer vectors must have one entry per feature")
        if np.any(sigma <= 0):
            raise TraceError("normalizer sigma must be positive")
        mu.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def __eq__(self, other):
        if not isinstance(other, Normalizer):
            return NotImplemented
        return (
            np.array_equal(self.mu, other.mu)
            and np.array_equal(self.sigma, other.sigma)
            and self.fitted_on == other.fitted_on
        )

    __hash__ = None

    def transform(self, snapshots: np.ndarray) -> np.ndarray:
        return (np.asarray(snapshots, dtype=np.float64) - self.mu) / self.sigma

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mu"]), np.array(d["sigma"]), int(d["fitted_on"]))

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES), 0)


def fit_normalizer(train: LabeledDataset | Sequence[BehaviorTrace]) -> Normalizer:
    """Per-feature mean and population std over every training snapshot.

    A constant feature gets sigma 1 so it standardizes to exactly 0.
    """
    traces = list(train)
    if not traces:
        raise TraceError("cannot fit a normalizer on an empty training set")
    data = np.concatenate([tr.snapshots for tr in traces], axis=0)
    mu = data.mean(axis=0)
    sigma = data.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return Normalizer(mu, sigma, int(data.shape[0]))


def apply_normalizer(n: Normalizer, trace: BehaviorTrace) -> np.ndarray:
    return n.transform(trace.snapshots)


def truncate_to_time(trace: BehaviorTrace, t_seconds: int) -> BehaviorTrace:
    """Prefix of the trace covering seconds 0..t_seconds inclusive."""
    if t_seconds < 0:
        raise TraceError("t_seconds must be non-negative")
    if len(trace.snapshots) < t_seconds + 1:
        raise TraceError(
            f"{trace.sample_id}: has {len(trace.snapshots)} snapshots, needs {t_seconds + 1} for t={t_seconds}"
        )
    return replace(trace, snapshots=trace.snapshots[: t_seconds + 1])


def standardized_batch(traces: Sequence[BehaviorTrace], normalizer: Normalizer, t_seconds: int) -> np.ndarray:
    """Stack standardized prefixes into a (batch, t+1, features) array."""
    short = [tr.sample_id for tr in traces if len(tr.snapshots) < t_seconds + 1]
    if short:
        raise TraceError(f"traces too short for t={t_seconds}: {', '.join(short)}")
    raw = np.stack([tr.snapshots[: t_seconds + 1] for tr in traces])
    return normalizer.transform(raw)


def holdout_group(
    dataset: LabeledDataset,
    key: str,
    value: str,
    exclude_disputed: bool = True,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Split off every trace whose ``key`` (family or variant) equals ``value``."""
    if key not in ("family", "variant"):
        raise TraceError(f"holdout key must be 'family' or 'variant', got {key!r}")
    held = [tr for tr in dataset if getattr(tr, key) == value]
    if not held:
        raise TraceError(f"no traces with {key}={value!r}")
    rest = [
        tr
        for tr in dataset
        if getattr(tr, key) != value and not (exclude_disputed and tr.family == DISPUTED)
    ]
    if not rest:
        raise TraceError(f"holding out {key}={value!r} leaves no training traces")
    note = f"holdout {key}={value}"
    return (
        LabeledDataset(tuple(rest), "train", note),
        LabeledDataset(tuple(held), "test", note),
    )


# CSV ingestion


def _fmt_float(v: float) -> str:
    return repr(float(v))


def dump_traces(dataset: Iterable[BehaviorTrace]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for tr in dataset:
        seen = format_utc(tr.first_seen) if tr.first_seen is not None else ""
        for t, row in enumerate(tr.snapshots):
            writer.writerow(
                [tr.sample_id, tr.label, tr.family or "", tr.variant or "", seen, t]
                + [_fmt_float(v) for v in row]
            )
    return buf.getvalue()


def save_traces(dataset: Iterable[BehaviorTrace], path) -> None:
    Path(path).write_text(dump_traces(dataset), encoding="utf-8", newline="")


def parse_traces(text: str, source: str = "<string>", role: str = "train") -> LabeledDataset:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise TraceError(f"{source}: empty file") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise TraceError(f"{source}:1: unexpected header {header!r}")

    order: list[str] = []
    meta: dict[str, tuple] = {}
    rows: dict[str, list] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise TraceError(f"{source}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        sid, label, family, variant, seen, t_text = rec[:6]
        if not sid:
            raise TraceError(f"{source}:{lineno}: empty sample_id")
        if label not in LABELS:
            raise TraceError(f"{source}:{lineno}: sample {sid}: bad label {label!r}")
        try:
            t = int(t_text)
            values = [float(v) for v in rec[6:]]
            stamp = parse_utc(seen) if seen else None
        except ValueError as exc:
            raise TraceError(f"{source}:{lineno}: sample {sid}: {exc}") from None
        problem = snapshot_problem(values)
        if problem:
            raise TraceError(f"{source}:{lineno}: sample {sid} t={t}: {problem}")
        info = (label, family or None, variant or None, stamp)
        if sid not in meta:
            order.append(sid)
            meta[sid] = info
            rows[sid] = []
        elif meta[sid] != info:
            raise TraceError(f"{source}:{lineno}: sample {sid}: metadata differs from earlier rows")
        expected = len(rows[sid])
        if t < expected:
            raise TraceError(f"{source}:{lineno}: sample {sid}: duplicate t={t}")
        if t != expected:
            raise TraceError(f"{source}:{lineno}: sample {sid}: t jumps from {expected - 1} to {t}")
        rows[sid].append(values)

    traces = []
    for sid in order:
        label, family, variant, stamp = meta[sid]
        traces.append(BehaviorTrace(sid, label, np.array(rows[sid]), stamp, family, variant))
    return LabeledDataset(tuple(traces), role, f"loaded from {source}")


def load_traces(path, role: str = "train") -> LabeledDataset:
    path = Path(path)
    return parse_traces(path.read_text(encoding="utf-8"), str(path), role)


# Synthetic generator


@dataclass(frozen=True)
class FamilyProfile:
    """Shape of one synthetic malicious family.

    Onsets are (low, high) inclusive second ranges. Magnitudes scale the
    process ramp slope, CPU burst height and packet spike height. The burst
    and spike each occur with their own probability; the ramp always does.
    """

    family: str
    variants: tuple[str, ...] = ()
    weight: float = 1.0
    ramp_onset: tuple[int, int] = (1, 2)
    ramp_slope: float = 5.0
    burst_onset: tuple[int, int] = (1, 3)
    burst_height: float = 30.0
    burst_prob: float = 0.6
    spike_onset: tuple[int, int] = (2, 4)
    spike_height: float = 60.0
    spike_prob: float = 0.6


DEFAULT_FAMILIES = (
    FamilyProfile("trojan", ("zusy", "kazy", "razy"), weight=4.0),
    FamilyProfile("virus", ("sality", "virut"), weight=2.0, burst_height=40.0, spike_height=30.0),
    FamilyProfile("worm", ("allaple",), weight=1.0, spike_onset=(1, 3), spike_height=120.0),
    FamilyProfile("ransomware", ("cerber", "locky"), weight=1.0, ramp_slope=4.0, burst_height=45.0),
    FamilyProfile(
        "late-payload",
        ("sleeper",),
        weight=1.0,
        ramp_onset=(1, 3),
        burst_onset=(8, 12),
        burst_prob=1.0,
        spike_onset=(9, 13),
        spike_prob=1.0,
    ),
    FamilyProfile(DISPUTED, (), weight=0.5),
)


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the synthetic trace generator.

    This is NOT real malware data; the shapes only mimic the qualitative
    difference between malicious and benign activity.
    """

    length: int = 21
    start: datetime = datetime(2016, 1, 1, tzinfo=timezone.utc)
    span_days: int = 900
    families: tuple[FamilyProfile, ...] = DEFAULT_FAMILIES
    benign_burst_prob: float = 0.25
    benign_burst_height: float = 20.0
    noise: float = 1.0


def _onset(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _baseline(rng, length, noise):
    """Stationary idle-machine activity; returns an (length, 10) array."""
    x = np.empty((length, N_FEATURES))
    cpu_sys = rng.uniform(2, 8)
    cpu_usr = rng.uniform(3, 12)
    pk_out = rng.uniform(0, 6)
    pk_in = rng.uniform(0, 10)
    mem = rng.uniform(900, 1400)
    swap = rng.uniform(50, 300)
    procs = rng.integers(40, 46)
    pid = rng.uniform(2000, 3000)
    for t in range(length):
        x[t, 0] = cpu_sys + noise * rng.normal(0, 1.5)
        x[t, 1] = cpu_usr + noise * rng.normal(0, 2.0)
        x[t, 2] = pk_out + noise * rng.normal(0, 1.0)
        x[t, 3] = pk_in + noise * rng.normal(0, 2.0)
        x[t, 6] = mem + noise * rng.normal(0, 5.0)
        x[t, 7] = swap + noise * rng.normal(0, 2.0)
        x[t, 8] = procs + (rng.random() < 0.1 * noise)
        pid += rng.uniform(0, 4)
        x[t, 9] = pid
    return x


def _finish(x):
    x[:, 0:2] = np.clip(x[:, 0:2], 0, 100)
    x[:, 2:4] = np.rint(np.clip(x[:, 2:4], 0, None))
    x[:, 4] = x[:, 2] * 512.0
    x[:, 5] = x[:, 3] * 900.0
    x[:, 6:8] = np.round(np.clip(x[:, 6:8], 0, None), 3)
    x[:, 8:10] = np.rint(np.clip(x[:, 8:10], 0, None))
    x[:, 0:2] = np.round(x[:, 0:2], 3)
    return x


def _malicious_activity(rng, x, profile: FamilyProfile):
    length = len(x)
    t = np.arange(length)
    ramp = _onset(rng, profile.ramp_onset)
    slope = profile.ramp_slope * rng.uniform(0.6, 1.4)
    extra = np.where(t >= ramp, np.floor(slope * (t - ramp + 1)), 0.0)
    x[:, 8] += extra
    x[:, 9] += np.cumsum(np.diff(extra, prepend=0.0)) * rng.uniform(1, 3)
    x[:, 6] += extra * rng.uniform(4, 10)

    burst = _onset(rng, profile.burst_onset)
    height = profile.burst_height * rng.uniform(0.6, 1.4) * (rng.random() < profile.burst_prob)
    x[:, 0] += np.where(t >= burst, height * (1 - np.exp(-(t - burst + 1) / 1.5)), 0.0)
    x[:, 1] += np.where(t >= burst, 0.3 * height, 0.0)

    spike = _onset(rng, profile.spike_onset)
    sheight = profile.spike_height * rng.uniform(0.6, 1.4) * (rng.random() < profile.spike_prob)
    decay = np.where(t >= spike, np.exp(-(t - spike) / 4.0), 0.0)
    x[:, 2] += sheight * decay
    x[:, 3] += 0.5 * sheight * decay
    return x


def _benign_activity(rng, x, spec: GeneratorSpec):
    if rng.random() < spec.benign_burst_prob:
        length = len(x)
        t = np.arange(length)
        start = int(rng.integers(0, length))
        width = int(rng.integers(1, 4))
        on = (t >= start) & (t < start + width)
        x[:, 1] += np.where(on, spec.benign_burst_height * rng.uniform(0.5, 1.5), 0.0)
        x[:, 3] += np.where(on, rng.uniform(10, 60), 0.0)
        # quick short-lived helpers: pid advances, process count barely moves
        x[:, 9] += np.cumsum(on * rng.uniform(5, 20))
    return x


def synth_generate(
    spec: GeneratorSpec | None = None,
    count_benign: int = 100,
    count_malicious: int = 100,
    seed: int = 0,
) -> LabeledDataset:
    """Generate a seeded synthetic dataset of benign and malicious traces."""
    if count_benign < 0 or count_malicious < 0:
        raise ValueError("counts must be non-negative")
    spec = spec or GeneratorSpec()
    rng = np.random.default_rng(seed)
    weights = np.array([f.weight for f in spec.families], dtype=float)
    weights = weights / weights.sum()

    labels = [BENIGN] * count_benign + [MALICIOUS] * count_malicious
    order = rng.permutation(len(labels))
    traces = []
    counters = {BENIGN: 0, MALICIOUS: 0}
    span = spec.span_days * 86400
    for idx in order:
        label = labels[idx]
        sid = f"{label[:3]}-{counters[label]:05d}"
        counters[label] += 1
        x = _baseline(rng, spec.length, spec.noise)
        family = variant = None
        if label == MALICIOUS:
            profile = spec.families[int(rng.choice(len(spec.families), p=weights))]
            family = profile.family
            if profile.variants:
                variant = profile.variants[int(rng.integers(len(profile.variants)))]
            x = _malicious_activity(rng, x, profile)
        else:
            x = _benign_activity(rng, x, spec)
        seen = spec.start + timedelta(seconds=int(rng.integers(0, span)))
        traces.append(BehaviorTrace(sid, label, _finish(x), seen, family, variant))
    return LabeledDataset(tuple(traces), "train", f"synthetic seed={seed}")
