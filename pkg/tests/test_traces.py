from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyguard.traces import (
    CSV_HEADER,
    DISPUTED,
    FEATURES,
    LabeledDataset,
    Normalizer,
    TraceError,
    apply_normalizer,
    dump_traces,
    fit_normalizer,
    holdout_group,
    label_from_engine_count,
    load_traces,
    parse_traces,
    save_traces,
    split_by_date,
    synth_generate,
    truncate_to_time,
)

from conftest import make_trace

UTC = timezone.utc


def const_rows(n, value=1.0):
    return np.full((n, 10), value)


@pytest.mark.parametrize("detections,label", [(7, "malicious"), (5, "malicious"), (0, "benign"), (3, "excluded"), (1, "excluded"), (4, "excluded")])
def test_label_from_engine_count(detections, label):
    assert label_from_engine_count(detections) == label


class TestSplitByDate:
    cutoff = datetime(2017, 10, 10, 11, 15, tzinfo=UTC)

    def test_years_either_side(self):
        a = make_trace("a", "benign", const_rows(3), datetime(2016, 5, 1, tzinfo=UTC))
        b = make_trace("b", "malicious", const_rows(3), datetime(2018, 5, 1, tzinfo=UTC))
        train, test = split_by_date([a, b], self.cutoff)
        assert train.ids == ["a"] and test.ids == ["b"]

    def test_empty_side_is_an_error(self):
        a = make_trace("a", "benign", const_rows(3), datetime(2016, 5, 1, tzinfo=UTC))
        with pytest.raises(TraceError, match="test side empty"):
            split_by_date([a], self.cutoff)

    def test_boundary_is_strict(self):
        before = make_trace("a", "benign", const_rows(2), self.cutoff - timedelta(seconds=1))
        after = make_trace("b", "benign", const_rows(2), self.cutoff + timedelta(seconds=1))
        at = make_trace("c", "benign", const_rows(2), self.cutoff)
        train, test = split_by_date([before, after, at], self.cutoff)
        assert train.ids == ["a"]
        assert test.ids == ["b", "c"]

    @given(st.lists(st.integers(0, 1000), min_size=2, max_size=40), st.integers(1, 999))
    def test_partition(self, days, cut):
        start = datetime(2016, 1, 1, tzinfo=UTC)
        traces = [make_trace(f"s{i}", "benign", const_rows(1), start + timedelta(days=d)) for i, d in enumerate(days)]
        cutoff = start + timedelta(days=cut)
        try:
            train, test = split_by_date(traces, cutoff)
        except TraceError:
            assert all(d < cut for d in days) or all(d >= cut for d in days)
            return
        assert len(train) + len(test) == len(traces)
        assert not set(train.ids) & set(test.ids)


class TestNormalizer:
    def test_two_point_stats(self):
        x = np.ones((2, 10))
        x[:, 0] = [1, 3]
        n = fit_normalizer([make_trace("a", "benign", x)])
        assert n.mu[0] == 2 and n.sigma[0] == 1

    def test_constant_feature_gets_unit_sigma(self):
        x = np.full((4, 10), 5.0)
        n = fit_normalizer([make_trace("a", "benign", x)])
        assert n.mu[3] == 5 and n.sigma[3] == 1
        assert np.all(apply_normalizer(n, make_trace("a", "benign", x)) == 0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        traces = [make_trace(f"t{i}", "benign", rng.uniform(0, 100, (10, 10))) for i in range(100)]
        n = fit_normalizer(traces)
        # second-pass oracle over a flat list of every snapshot value
        for f in range(10):
            vals = [float(tr.snapshots[t, f]) for tr in traces for t in range(10)]
            mean = sum(vals) / len(vals)
            std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
            assert abs(n.mu[f] - mean) < 1e-9
            assert abs(n.sigma[f] - std) < 1e-9
        assert n.fitted_on == 1000

    @pytest.mark.parametrize("x,expected", [(5.0, 0.0), (7.0, 1.0)])
    def test_apply(self, x, expected):
        n = Normalizer(np.full(10, 5.0), np.full(10, 2.0))
        out = apply_normalizer(n, make_trace("a", "benign", np.full((1, 10), x)))
        assert np.all(out == expected)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 12))
    def test_fit_then_apply_standardizes(self, seed, n_traces, length):
        rng = np.random.default_rng(seed)
        scale = rng.uniform(0.1, 1e4, size=10)
        scale[:2] = 100.0  # percent features
        traces = [make_trace(f"t{i}", "benign", rng.uniform(0, 1, (length, 10)) * scale) for i in range(n_traces)]
        n = fit_normalizer(traces)
        z = np.concatenate([apply_normalizer(n, tr) for tr in traces])
        assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
        nonconst = np.concatenate([tr.snapshots for tr in traces]).std(axis=0) > 0
        assert np.all(np.abs(z.var(axis=0)[nonconst] - 1) < 1e-6)

    def test_metadata_untouched(self):
        tr = make_trace("a", "malicious", np.ones((3, 10)), datetime(2017, 1, 1, tzinfo=UTC), "worm", "allaple")
        apply_normalizer(fit_normalizer([tr]), tr)
        assert tr.family == "worm" and tr.snapshots[0, 0] == 1.0


class TestTruncate:
    trace = make_trace("a", "benign", np.arange(210, dtype=float).reshape(21, 10) % 100, family="x")

    @pytest.mark.parametrize("t,n", [(0, 1), (1, 2), (20, 21), (7, 8)])
    def test_lengths(self, t, n):
        out = truncate_to_time(self.trace, t)
        assert len(out.snapshots) == n
        assert out.family == "x" and out.sample_id == "a"
        assert np.array_equal(out.snapshots, self.trace.snapshots[:n])

    def test_too_short(self):
        with pytest.raises(TraceError):
            truncate_to_time(self.trace, 21)


class TestHoldout:
    @pytest.fixture
    def dataset(self):
        traces = []
        for i in range(24):
            traces.append(make_trace(f"w{i}", "malicious", np.ones((2, 10)), family="worm", variant="allaple"))
        for i in range(10):
            traces.append(make_trace(f"z{i}", "malicious", np.ones((2, 10)), family="trojan", variant="zusy"))
        for i in range(3):
            traces.append(make_trace(f"d{i}", "malicious", np.ones((2, 10)), family=DISPUTED))
        for i in range(20):
            traces.append(make_trace(f"b{i}", "benign", np.ones((2, 10))))
        return LabeledDataset(tuple(traces))

    def test_family(self, dataset):
        rest, held = holdout_group(dataset, "family", "worm")
        assert len(held) == 24
        assert all(tr.family != "worm" for tr in rest)
        assert set(rest.ids) | set(held.ids) == set(dataset.ids) - {"d0", "d1", "d2"}

    def test_variant(self, dataset):
        rest, held = holdout_group(dataset, "variant", "zusy")
        assert all(tr.variant != "zusy" for tr in rest)
        assert len(held) == 10

    def test_keep_disputed(self, dataset):
        rest, held = holdout_group(dataset, "family", "worm", exclude_disputed=False)
        assert set(rest.ids) | set(held.ids) == set(dataset.ids)

    def test_unknown_value(self, dataset):
        with pytest.raises(TraceError):
            holdout_group(dataset, "family", "nope")

    def test_whole_dataset(self):
        ds = LabeledDataset((make_trace("a", "malicious", np.ones((2, 10)), family="worm"),))
        with pytest.raises(TraceError, match="no training"):
            holdout_group(ds, "family", "worm")


class TestCsv:
    def test_round_trip(self, tmp_path, small_data):
        path = tmp_path / "d.csv"
        save_traces(small_data, path)
        back = load_traces(path)
        assert len(back) == len(small_data)
        assert all(a == b for a, b in zip(small_data, back))

    def test_two_sample_file(self):
        a = make_trace("a", "benign", np.ones((3, 10)), datetime(2017, 1, 1, tzinfo=UTC))
        b = make_trace("b", "malicious", np.ones((2, 10)) * 2, datetime(2018, 1, 1, tzinfo=UTC), "worm", "")
        back = parse_traces(dump_traces([a, b]))
        assert back.ids == ["a", "b"]
        assert back[1].variant is None and back[1].family == "worm"

    def test_header(self):
        text = dump_traces([make_trace("a", "benign", np.ones((1, 10)))])
        assert text.splitlines()[0] == ",".join(CSV_HEADER)
        assert "\r" not in text

    def _rows(self, ts, cpu_user=1.0):
        lines = [",".join(CSV_HEADER)]
        for t in ts:
            vals = ["1.0"] * 10
            vals[1] = str(cpu_user)
            lines.append(",".join(["s1", "benign", "", "", "2017-01-01T00:00:00Z", str(t)] + vals))
        return "\n".join(lines) + "\n"

    def test_gap_in_t(self):
        with pytest.raises(TraceError, match=r"<string>:3: sample s1: t jumps from 0 to 2"):
            parse_traces(self._rows([0, 2]))

    def test_duplicate_t(self):
        with pytest.raises(TraceError, match="duplicate t=0"):
            parse_traces(self._rows([0, 0]))

    def test_percent_range(self):
        with pytest.raises(TraceError, match="cpu_user exceeds 100"):
            parse_traces(self._rows([0, 1], cpu_user=120))

    def test_malformed_row(self):
        text = self._rows([0]) + "s1,benign,,\n"
        with pytest.raises(TraceError, match=":3: expected 16 fields"):
            parse_traces(text)

    def test_non_numeric(self):
        text = self._rows([0]).replace("1.0", "abc", 1)
        with pytest.raises(TraceError, match=":2:"):
            parse_traces(text)


class TestSynth:
    def test_deterministic(self):
        a = dump_traces(synth_generate(None, 20, 20, 5))
        b = dump_traces(synth_generate(None, 20, 20, 5))
        assert a == b
        assert a != dump_traces(synth_generate(None, 20, 20, 6))

    def test_class_means(self):
        ds = synth_generate(None, 100, 100, 1)
        procs = FEATURES.index("total_processes")
        mal = np.mean([tr.snapshots[10, procs] for tr in ds if tr.y == 1])
        ben = np.mean([tr.snapshots[10, procs] for tr in ds if tr.y == 0])
        assert mal > ben

    def test_no_benign(self):
        ds = synth_generate(None, 0, 15, 2)
        assert len(ds) == 15 and all(tr.label == "malicious" for tr in ds)
        assert all(len(tr.snapshots) == 21 for tr in ds)

    def test_invariants_hold(self, small_data):
        for tr in small_data:
            assert np.all(tr.snapshots >= 0)
            assert np.all(tr.snapshots[:, :2] <= 100)
            assert tr.first_seen is not None

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            synth_generate(None, -1, 1, 0)


def test_trace_rejects_bad_shapes():
    with pytest.raises(TraceError):
        make_trace("a", "benign", np.ones((0, 10)))
    with pytest.raises(TraceError):
        make_trace("a", "benign", np.ones((2, 9)))
    with pytest.raises(TraceError):
        make_trace("a", "unknown", np.ones((2, 10)))
    with pytest.raises(TraceError, match="negative"):
        make_trace("a", "benign", -np.ones((2, 10)))


def test_duplicate_ids_rejected():
    tr = make_trace("a", "benign", np.ones((2, 10)))
    with pytest.raises(TraceError, match="duplicate"):
        LabeledDataset((tr, tr))
