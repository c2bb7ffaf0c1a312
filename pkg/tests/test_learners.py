import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakedweb.core import Dataset, Trace
from leakedweb.learners import (
    FAMILIES,
    TrainedModel,
    bop_transform,
    dtw_distance,
    entropy,
    gini,
    predict,
    predict_many,
    train,
)
from leakedweb.learners.boosting import fit_logitboost, logitboost_proba
from leakedweb.learners.bop import paa, sax_breakpoints, squared_distances
from leakedweb.learners.dtw import knn_vote
from leakedweb.learners.forest import fit_forest, forest_votes
from leakedweb.learners.model import ModelFormatError
from leakedweb.learners.shapelet import grow_shapelet_tree
from leakedweb.learners.views import fit_length
from leakedweb.synth import oracle_dtw

FAST = {
    "random_forest": {"n_trees": 15},
    "logit_boost": {"n_stages": 10},
    "dtw_knn": {},
    "bop": {"window": 8, "paa_segments": 4},
    "shapelet": {"candidates": 300, "max_depth": 4},
}


class TestImpurity:
    def test_gini(self):
        assert gini([5]) == 0.0
        assert gini([5, 5]) == 0.5

    def test_entropy(self):
        assert entropy([10, 10]) == 1.0
        assert entropy([4, 0]) == 0.0


class TestDtw:
    def test_small_grid_matches_oracle(self):
        seqs = [s for n in range(1, 4) for s in itertools.product((0, 1, 2), repeat=n)]
        for a in seqs:
            for b in seqs:
                assert dtw_distance(np.array(a, float), np.array(b, float)) == oracle_dtw(a, b)

    def test_hand_value(self):
        assert dtw_distance([0, 1, 2], [0, 2]) == 1.0

    def test_zero_band_is_lockstep(self):
        a, b = np.array([1.0, 5, 2, 8]), np.array([3.0, 1, 2, 9])
        assert dtw_distance(a, b, window=0) == np.abs(a - b).sum()
        with pytest.raises(ValueError):
            dtw_distance(a, b[:2], window=0)

    def test_multichannel_sums(self):
        a = np.array([[0.0, 1, 2], [3, 3, 3]])
        b = np.array([[0.0, 2], [1, 1]])
        assert dtw_distance(a, b) == oracle_dtw(a[0], b[0]) + oracle_dtw(a[1], b[1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=8),
           st.lists(st.integers(-5, 5), min_size=1, max_size=8))
    def test_symmetric_and_oracle(self, a, b):
        d = dtw_distance(np.array(a, float), np.array(b, float))
        assert d == dtw_distance(np.array(b, float), np.array(a, float)) == oracle_dtw(a, b)

    def test_knn_majority(self):
        label, votes = knn_vote(np.array([0.1, 0.2, 0.3, 5.0]), np.array([1, 1, 0, 0]), 2, 3)
        assert label == 1 and votes.tolist() == [1, 2]


class TestBop:
    def test_breakpoints(self):
        np.testing.assert_allclose(sax_breakpoints(4), [-0.6744897501960817, 0, 0.6744897501960817])

    def test_constant_sequence_one_word(self):
        assert sum(bop_transform(np.full(40, 3.0), 8, 4, 4).values()) == 1

    def test_window_equals_length(self):
        bag = bop_transform(np.arange(8.0) ** 2, 8, 4, 4)
        assert sum(bag.values()) == 1

    def test_ramp_hand_value(self):
        # Every window of a ramp z-normalises to the same ramp; PAA means of the
        # six 4-sample segments are (4k - 10) / sqrt(575 / 12), k = 0..5, i.e.
        # about -1.44, -0.87, -0.29, 0.29, 0.87, 1.44 against cuts -0.67, 0, 0.67.
        assert dict(bop_transform(np.arange(1.0, 31.0), 24, 6, 4)) == {"aabcdd": 1}

    def test_fractional_paa(self):
        np.testing.assert_allclose(paa(np.array([1.0, 2, 3]), 2), [4 / 3, 8 / 3])

    def test_no_overlap_flag(self):
        d, overlap = squared_distances(np.array([[1.0, 0.0]]), {"zz": 1}, {"aa": 0, "bb": 1})
        assert not overlap


class TestTreesAndBoosting:
    def toy(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(-2, 0.5, (10, 2)), rng.normal(2, 0.5, (10, 2))])
        return X, np.repeat([0, 1], 10)

    def test_forest_fits_toy(self):
        X, y = self.toy()
        trees = fit_forest(X, y, 2, n_trees=10, seed=1)
        assert (forest_votes(trees, X, 2).argmax(axis=1) == y).all()

    def test_logitboost_ten_stages(self):
        X, y = self.toy()
        stages = fit_logitboost(X, y, 2, n_stages=10)
        p = logitboost_proba(stages, X, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert (p.argmax(axis=1) == y).all()

    def test_logitboost_deterministic(self):
        X, y = self.toy()
        a = logitboost_proba(fit_logitboost(X, y, 2, n_stages=5, seed=3), X, 2)
        b = logitboost_proba(fit_logitboost(X, y, 2, n_stages=5, seed=3), X, 2)
        assert np.array_equal(a, b)


class TestShapelet:
    def spike_set(self):
        rng = np.random.default_rng(5)
        X = np.zeros((20, 1, 12))
        for i in range(10):
            o = rng.integers(0, 10)
            X[i, 0, o: o + 3] = [0, 5, 0]
        return X, np.repeat([0, 1], 10)

    def test_spike_root_gain_is_parent_entropy(self):
        X, y = self.spike_set()
        tree = grow_shapelet_tree(X, y, 2, min_len=3, max_len=3, seed=0)
        assert tree.left.is_leaf and tree.right.is_leaf
        assert {tuple(tree.left.counts), tuple(tree.right.counts)} == {(10.0, 0.0), (0.0, 10.0)}

    def test_single_class_is_leaf(self):
        X, y = self.spike_set()
        assert grow_shapelet_tree(X[:10], y[:10], 2).is_leaf


def test_fit_length_pads_with_last_row():
    s = np.array([[1, 2], [3, 4]])
    assert fit_length(s, 4).tolist() == [[1, 2], [3, 4], [3, 4], [3, 4]]
    assert fit_length(s, 1).tolist() == [[1, 2]]


@pytest.mark.parametrize("family", FAMILIES)
def test_noiseless_training_traces_recovered(family, noiseless):
    model = train(family, noiseless, FAST[family])
    preds = predict_many(model, noiseless.traces)
    assert [p.label for p in preds] == noiseless.labels


@pytest.mark.parametrize("family", FAMILIES)
def test_serialization_round_trip(family, noisy_small, tmp_path):
    model = train(family, noisy_small, FAST[family])
    model.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    assert back.to_json() == model.to_json()
    rng = np.random.default_rng(0)
    probes = [Trace("?", rng.integers(0, 10**5, (20, 4)), noisy_small.events) for _ in range(100)]
    assert predict_many(back, probes) == predict_many(model, probes)


@pytest.mark.parametrize("family", FAMILIES)
def test_short_trace_is_padded(family, noiseless):
    model = train(family, noiseless, FAST[family])
    result = predict(model, noiseless.traces[0].head(5))
    assert result.label in noiseless.class_list
    assert sum(result.scores.values()) == pytest.approx(1.0)


def test_missing_event_rejected(noiseless):
    model = train("dtw_knn", noiseless)
    with pytest.raises(KeyError):
        predict(model, noiseless.traces[0].select(noiseless.events[:2]))


def test_bad_model_file(tmp_path):
    (tmp_path / "m.json").write_text('{"format_version": 99}')
    with pytest.raises(ModelFormatError):
        TrainedModel.load(tmp_path / "m.json")


def test_bop_prior_without_overlap():
    # ramps only ever produce sloped words; a flat probe shares none of them
    up = np.arange(0, 200, 10).reshape(-1, 1)
    traces = [Trace("up", up + k, ("cache-misses",)) for k in range(3)]
    traces += [Trace("down", up[::-1] + k, ("cache-misses",)) for k in range(2)]
    model = train("bop", Dataset(tuple(traces)), {"window": 8, "paa_segments": 4})
    flat = Trace("?", np.full((20, 1), 7), ("cache-misses",))
    assert predict(model, flat).scores == pytest.approx({"up": 0.6, "down": 0.4})


def test_burst_position_bop():
    # same burst shape, pinned to opposite ends of the trace: one class only
    # ever shows the falling edge, the other only the rising edge
    rng = np.random.default_rng(3)
    traces = []
    for cls in ("early", "late"):
        for _ in range(8):
            length = int(rng.integers(6, 11))
            s = np.full((40, 1), int(rng.integers(50, 150)))
            burst = slice(0, length) if cls == "early" else slice(40 - length, 40)
            s[burst] *= 6
            traces.append(Trace(cls, s, ("cache-misses",)))
    model = train("bop", Dataset(tuple(traces[::2])), {"window": 6, "paa_segments": 3})
    preds = predict_many(model, traces[1::2])
    assert [p.label for p in preds] == [t.label for t in traces[1::2]]
