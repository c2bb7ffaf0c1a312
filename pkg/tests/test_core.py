import io

import numpy as np
import pytest
from conftest import make_trace, separable_signatures
from hypothesis import given, settings
from hypothesis import strategies as st

from leakedweb.core import (
    DEFAULT_EVENTS,
    DEFAULT_TRAIN_FRACTION,
    EVENTS,
    NON_SENSITIVE,
    Dataset,
    Provenance,
    SplitError,
    SplitSpec,
    Trace,
    TraceFormatError,
    TraceInvariantError,
    TraceWriteError,
    event_sort_key,
    load_dataset,
    read_trace_csv,
    save_dataset,
    split,
    trace_csv_bytes,
    write_trace_csv,
)
from leakedweb.synth import generate

# provenance travels in the manifest, not the CSV body
SYNTH = Provenance(1.0, 0.0, "synthetic")


def test_event_table_order():
    assert len(EVENTS) == 16
    assert DEFAULT_EVENTS == ("cache-misses", "node-loads", "branch-misses", "branch-load-misses")
    assert [e.rank for e in EVENTS] == list(range(1, 17))
    assert event_sort_key("zzz") > event_sort_key("L1-dcache-load-misses")


class TestTraceInvariants:
    def test_empty_samples_rejected(self):
        with pytest.raises(TraceInvariantError):
            Trace("a", np.zeros((0, 1), dtype=np.int64), ("cache-misses",))

    def test_negative_rejected(self):
        with pytest.raises(TraceInvariantError):
            make_trace("a", [[-1]])

    def test_column_count_must_match_events(self):
        with pytest.raises(TraceInvariantError):
            Trace("a", np.ones((2, 2), dtype=np.int64), ("cache-misses",))

    def test_duplicate_events_rejected(self):
        with pytest.raises(TraceInvariantError):
            Trace("a", np.ones((2, 2), dtype=np.int64), ("cache-misses", "cache-misses"))

    def test_samples_read_only(self):
        t = make_trace("a", [[1, 2]])
        with pytest.raises(ValueError):
            t.samples[0, 0] = 5

    def test_select_and_head(self):
        t = make_trace("a", [[1, 2], [3, 4], [5, 6]])
        assert t.select(["node-loads"]).samples.tolist() == [[2], [4], [6]]
        assert t.head(2).n_samples == 2
        with pytest.raises(KeyError):
            t.select(["iTLB-loads"])


class TestCsv:
    def test_single_sample_body(self):
        t = Trace("a", np.array([[42]]), ("cache-misses",))
        assert trace_csv_bytes(t) == b"t,cache-misses\n0,42\n"
        assert read_trace_csv(trace_csv_bytes(t), "a", SYNTH) == t

    def test_header_and_row_parse(self):
        t = read_trace_csv(b"t,cache-misses\n0,42\n", "x")
        assert t.samples.tolist() == [[42]]

    def test_negative_row_is_invariant_error(self):
        with pytest.raises(TraceInvariantError):
            read_trace_csv(b"t,cache-misses\n0,-1\n", "x")

    def test_malformed_reports_line(self):
        with pytest.raises(TraceFormatError) as err:
            read_trace_csv(b"t,cache-misses\n0,1\n1,x\n", "x")
        assert err.value.line == 3
        with pytest.raises(TraceFormatError):
            read_trace_csv(b"t,cache-misses\n0,1\n5,1\n", "x")

    def test_sixty_by_four(self):
        ds = generate_cfg(60)
        body = trace_csv_bytes(ds.traces[0]).decode().splitlines()
        assert len(body) == 61
        assert all(len(line.split(",")) == 5 for line in body)

    def test_write_reports_partial_count(self):
        class Broken(io.BytesIO):
            def write(self, b):
                if self.tell() > 20:
                    raise OSError("disk full")
                return super().write(b)

        t = make_trace("a", [[1, 2]] * 10)
        with pytest.raises(TraceWriteError) as err:
            write_trace_csv(t, Broken())
        assert 20 < err.value.written < len(trace_csv_bytes(t))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 4), st.integers(0, 2**31))
    def test_round_trip(self, n, k, seed):
        rng = np.random.default_rng(seed)
        t = make_trace("lbl", rng.integers(0, 2**40, size=(n, k)))
        buf = io.BytesIO()
        assert write_trace_csv(t, buf) == len(buf.getvalue())
        assert read_trace_csv(buf.getvalue(), "lbl", SYNTH) == t


def generate_cfg(samples):
    from leakedweb.synth import GeneratorConfig

    return generate(GeneratorConfig(tuple(separable_signatures()), 2, samples))


class TestDataset:
    def test_mixed_events_rejected(self):
        with pytest.raises(ValueError):
            Dataset((make_trace("a", [[1, 2]]), make_trace("b", [[1]])))

    def test_open_world_requires_non_sensitive(self):
        with pytest.raises(ValueError):
            Dataset((make_trace("a", [[1]]),), "open")
        ds = Dataset((make_trace("a", [[1]]), make_trace(NON_SENSITIVE, [[2]])), "open")
        assert ds.class_list == ("a", NON_SENSITIVE)

    def test_save_load(self, tmp_path, noiseless):
        save_dataset(noiseless, tmp_path)
        back = load_dataset(tmp_path)
        assert back.labels == noiseless.labels
        assert all(a == b for a, b in zip(back.traces, noiseless.traces))


class TestSplit:
    def _dataset(self, classes, per_class):
        return Dataset(tuple(make_trace(f"c{c}", [[c, i]]) for c in range(classes)
                             for i in range(per_class)))

    def test_fifty_twenty(self):
        train, test = split(self._dataset(30, 70), SplitSpec(DEFAULT_TRAIN_FRACTION, 0))
        for c in range(30):
            assert sum(t.label == f"c{c}" for t in train.traces) == 50
            assert sum(t.label == f"c{c}" for t in test.traces) == 20

    def test_deterministic(self):
        ds = self._dataset(3, 10)
        a = split(ds, SplitSpec(0.7, 4))
        b = split(ds, SplitSpec(0.7, 4))
        assert [t.samples.tolist() for t in a[0]] == [t.samples.tolist() for t in b[0]]

    def test_two_traces_half(self):
        train, test = split(self._dataset(1, 2), SplitSpec(0.5, 0))
        assert len(train) == len(test) == 1

    def test_singleton_class_named(self):
        ds = Dataset(self._dataset(1, 3).traces + (make_trace("lonely", [[9, 9]]),))
        with pytest.raises(SplitError, match="lonely"):
            split(ds, SplitSpec(0.7, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 12), st.floats(0.1, 0.9), st.integers(0, 99))
    def test_partition(self, classes, per_class, fraction, seed):
        ds = self._dataset(classes, per_class)
        train, test = split(ds, SplitSpec(fraction, seed))
        keys = sorted(t.samples.tobytes() for t in train.traces + test.traces)
        assert keys == sorted(t.samples.tobytes() for t in ds.traces)
        assert set(train.labels) == set(test.labels) == set(ds.labels)
