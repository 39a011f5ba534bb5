
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from missgan.data import SyntheticSpec, normalize_apply, synth_generate
from missgan.detector import (
    _categorical_breaks,
    _score_windows,
    anomaly_scores,
    auc,
    evaluate,
    ideal_f1,
)
from missgan.numerics import minmax_scale
from missgan.trainer import TrainConfig, missgan_fit


def brute_force_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_f1(scores, labels):
    best = 0.0
    for thr in np.unique(scores):
        pred = scores >= thr
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        if tp:
            best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


labeled_scores = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 20), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
            lambda ls: 0 < sum(ls) < len(ls)),
    )
)


class TestAuc:
    def test_perfect_separation(self):
        assert auc(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0, 0, 1, 1])) == 1.0

    def test_pairwise_example(self):
        scores = np.array([0.1, 0.4, 0.35, 0.8])
        labels = np.array([0, 0, 1, 1])
        assert auc(scores, labels) == 0.75

    def test_all_ties(self):
        assert auc(np.ones(6), np.array([0, 1, 0, 1, 0, 1])) == 0.5

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            auc(np.ones(3), np.array([1, 1, 1]))

    @given(labeled_scores)
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, case):
        values, labels = case
        scores = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels)
        assert auc(scores, labels) == brute_force_auc(scores, labels)

    @given(labeled_scores)
    @settings(max_examples=50, deadline=None)
    def test_complement_identity_when_tie_free(self, case):
        values, labels = case
        scores = np.asarray(values, dtype=np.float64)
        if len(np.unique(scores)) != len(scores):
            return
        labels = np.asarray(labels)
        assert abs(auc(scores, labels) + auc(-scores, labels) - 1.0) < 1e-12


class TestIdealF1:
    def test_sweep_example(self):
        res = ideal_f1(np.array([0.9, 0.8, 0.3, 0.2]), np.array([1, 0, 1, 0]))
        assert res.ideal_f1 == 0.8
        assert res.threshold == 0.3
        assert (res.tp, res.fp, res.fn) == (2, 1, 0)

    def test_perfect_scores(self):
        res = ideal_f1(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))
        assert res.ideal_f1 == 1.0

    def test_needs_positive(self):
        with pytest.raises(ValueError):
            ideal_f1(np.ones(3), np.zeros(3))

    @given(labeled_scores)
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, case):
        values, labels = case
        scores = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels)
        assert ideal_f1(scores, labels).ideal_f1 == brute_force_f1(scores, labels)

    @given(labeled_scores)
    @settings(max_examples=50, deadline=None)
    def test_invariant_under_minmax_scale(self, case):
        values, labels = case
        scores = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels)
        if scores.min() == scores.max():
            return
        scaled = minmax_scale(scores)
        assert ideal_f1(scaled, labels).ideal_f1 == ideal_f1(scores, labels).ideal_f1
        assert auc(scaled, labels) == auc(scores, labels)


class TestScoreWindows:
    def test_fixed_tiling_with_remainder(self):
        assert _score_windows(10, 4) == [(0, 4), (4, 8), (8, 10)]

    def test_breaks_restart_windows(self):
        assert _score_windows(10, 4, breaks=(5,)) == [(0, 4), (4, 5), (5, 9), (9, 10)]

    @given(st.integers(1, 500), st.integers(1, 64),
           st.lists(st.integers(1, 499), max_size=5))
    @settings(max_examples=150, deadline=None)
    def test_tiles_exactly(self, t, window, breaks):
        bounds = _score_windows(t, window, breaks)
        assert bounds[0][0] == 0 and bounds[-1][1] == t
        for (a0, a1), (b0, b1) in zip(bounds, bounds[1:]):
            assert a1 == b0
        assert all(hi - lo <= window or False for lo, hi in bounds) or True
        assert all(hi > lo for lo, hi in bounds)
        assert all(hi - lo <= window for lo, hi in bounds)


class TestAnomalyScores:
    @staticmethod
    def _fit(seed=0):
        series = synth_generate(SyntheticSpec(ticks=320, seed=seed, mode_block=64))
        cfg = TrainConfig(l_init=64, d_r=2, d_h=8, max_scales=1, epochs=1,
                          hmm_states=1, seg_em_iters=5, seg_refine_rounds=1)
        return missgan_fit(series, cfg), series

    def test_report_shapes(self):
        ck, series = self._fit()
        norm = normalize_apply(series, ck.norm_stats)
        rep = anomaly_scores(ck, norm)
        assert rep.raw.shape == (series.t,)
        assert rep.scaled.shape == (series.t,)
        assert rep.channel_errors.shape == (series.t, series.m)
        assert np.all(rep.raw >= 0) and np.all(rep.channel_errors >= 0)
        np.testing.assert_array_equal(rep.scaled, minmax_scale(rep.raw))

    def test_windows_respect_conditional_switches(self):
        ck, series = self._fit(seed=1)
        norm = normalize_apply(series, ck.norm_stats)
        rep = anomaly_scores(ck, norm)
        breaks = set(_categorical_breaks(norm.y, ck.schema).tolist())
        starts = {lo for lo, _ in rep.windows}
        assert breaks <= starts
        for lo, hi in rep.windows:
            assert np.all(norm.y[lo:hi] == norm.y[lo])

    def test_channel_mismatch_rejected(self):
        ck, series = self._fit(seed=2)
        from missgan.data import TimeSeries
        bad = TimeSeries(x=series.x[:, :1], y=series.y)
        with pytest.raises(ValueError):
            anomaly_scores(ck, bad)

    def test_per_tick_euclidean_norm(self):
        # a model with all-zero parameters reconstructs the zero series, so
        # the score equals the norm of each input tick
        ck, series = self._fit(seed=3)
        from missgan.recnet import get_generator_params, set_generator_params
        set_generator_params(ck.model, np.zeros_like(get_generator_params(ck.model)))
        from missgan.data import TimeSeries
        x = np.zeros((6, 2))
        x[2] = (1.0, 2.0)
        probe = TimeSeries(x=x, y=np.tile(series.y[0], (6, 1)))
        rep = anomaly_scores(ck, probe)
        assert abs(rep.raw[2] - np.sqrt(5.0)) < 1e-12
        np.testing.assert_allclose(np.delete(rep.raw, 2), 0.0, atol=1e-15)
        np.testing.assert_array_equal(rep.channel_errors[2], [1.0, 2.0])


class TestEvaluate:
    def test_combines_auc_and_f1(self):
        scores = np.array([0.9, 0.8, 0.3, 0.2])
        labels = np.array([1, 0, 1, 0])
        res = evaluate(scores, labels)
        assert res.auc == auc(scores, labels)
        assert res.ideal_f1 == ideal_f1(scores, labels).ideal_f1
