import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colar.dataset import FeatureDataset, gen_synthetic, make_sequence
from colar.errors import ParameterError, UndefinedMetricError, ValidationError
from colar.evaluation import (
    average_precision,
    calibrated_ap,
    evaluate,
    evaluate_scores,
    noninterpolated_ap,
    portion_index,
)
from colar.numeric import make_rng
from colar.streaming import prediction_records

from oracles import brute_ap, brute_cap, brute_report


def _records(dataset, scores):
    out, i = [], 0
    for seq in dataset.sequences:
        block = scores[i : i + seq.length]
        out += list(prediction_records(seq.video_id, block, block, block))
        i += seq.length
    return out


class TestAP:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0

    def test_hand_value(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-6)
        assert noninterpolated_ap([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)

    def test_interpolation_differs(self):
        # precision 1/2 at rank 2 is lifted to 2/3 by the envelope
        scores, pos = [0.9, 0.8, 0.7], [0, 1, 1]
        assert average_precision(scores, pos) == pytest.approx(2 / 3, abs=1e-12)
        assert noninterpolated_ap(scores, pos) == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)

    def test_ties_by_index(self):
        pos = [0, 1, 0, 1, 1]
        assert average_precision([0.5] * 5, pos) == brute_ap([0.5] * 5, pos)

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0.1, 0.2], [0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            average_precision([0.1, 0.2], [1])

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=30))
    def test_matches_oracle(self, pairs):
        scores = [s / 5 for s, _ in pairs]
        pos = [p for _, p in pairs]
        if any(pos):
            assert average_precision(scores, pos) == brute_ap(scores, pos)
            assert calibrated_ap(scores, pos, 1.7) == brute_cap(scores, pos, 1.7)


class TestCalibrated:
    def test_hand_value(self):
        assert calibrated_ap([0.9, 0.8, 0.7], [1, 0, 1], 2.0) == pytest.approx(0.9, abs=1e-12)

    def test_w_one_is_noninterpolated(self):
        rng = make_rng(0)
        for _ in range(50):
            s = rng.random(20)
            p = rng.random(20) < 0.4
            if p.any():
                assert abs(calibrated_ap(s, p, 1.0) - noninterpolated_ap(s, p)) <= 1e-12

    def test_all_positive(self):
        assert calibrated_ap([0.3, 0.1, 0.9], [1, 1, 1], 0.2) == 1.0

    def test_bad_w(self):
        with pytest.raises(ParameterError):
            calibrated_ap([0.1], [1], 0.0)

    def test_monte_carlo_random_scores(self):
        rng = make_rng(1)
        n, pi, w = 20000, 0.2, 4.0
        pos = rng.random(n) < pi
        got = calibrated_ap(rng.random(n), pos, w)
        expected = w * pi / (w * pi + 1 - pi)
        assert abs(got - expected) < 0.05

    def test_monotone_in_w(self):
        scores, pos = [0.9, 0.8, 0.7, 0.6], [0, 1, 0, 1]
        vals = [calibrated_ap(scores, pos, w) for w in (0.5, 1.0, 2.0, 8.0)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert vals[0] < vals[-1]

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariant(self, seed):
        rng = make_rng(seed)
        s = rng.normal(size=25)
        p = rng.random(25) < 0.3
        if p.any():
            t = np.exp(3 * s) + 2.0
            assert average_precision(s, p) == average_precision(t, p)
            assert calibrated_ap(s, p, 3.0) == calibrated_ap(t, p, 3.0)


def _micro_dataset():
    a = make_sequence("a", np.zeros((12, 1)), 2, [(1, 2, 6), (2, 8, 10)])
    b = make_sequence("b", np.zeros((10, 1)), 2, [(1, 0, 3), (2, 5, 9)])
    return FeatureDataset(2, 1, (a, b))


class TestEvaluate:
    def test_one_hot_predictions(self):
        a = make_sequence("a", np.zeros((30, 1)), 2, [(1, 2, 13), (2, 16, 27)])
        b = make_sequence("b", np.zeros((25, 1)), 2, [(1, 0, 11), (2, 13, 24)])
        data = FeatureDataset(2, 1, (a, b))
        scores = np.concatenate([s.labels for s in data.sequences])
        report = evaluate(_records(data, scores), data)
        assert report.map == 1.0 and report.cmap == 1.0
        assert report.portion_mcap == [1.0] * 10

    def test_micro_dataset_matches_brute_force(self):
        data = _micro_dataset()
        scores = np.round(make_rng(3).random((22, 3)), 1)  # coarse values force ties
        report = evaluate(_records(data, scores), data)
        classes = np.concatenate([s.classes for s in data.sequences]).tolist()
        aps, caps, mcap = brute_report(
            scores.tolist(), classes, [list(s.instance_spans) for s in data.sequences], [12, 10]
        )
        assert report.per_class_ap == aps
        assert report.per_class_cap == caps
        assert report.portion_mcap == pytest.approx(mcap, abs=1e-12, nan_ok=True)
        assert report.map == pytest.approx(np.mean(aps), abs=1e-15)
        assert report.w == 5 / 17
        # instances shorter than ten frames leave some portions without positives
        assert math.isnan(report.portion_mcap[1])

    def test_portions(self):
        seq = make_sequence("a", np.zeros((25, 1)), 1, [(1, 5, 24)])
        portion = portion_index(FeatureDataset(1, 1, (seq,)))
        np.testing.assert_array_equal(portion[:5], -1)
        np.testing.assert_array_equal(portion[5:], np.repeat(np.arange(10), 2))

    def test_record_order_irrelevant(self):
        data = _micro_dataset()
        scores = make_rng(4).random((22, 3))
        recs = _records(data, scores)
        first, second = recs[:12], recs[12:]
        a = evaluate(first + second, data)
        b = evaluate(second + first[::-1], data)
        assert a.to_json() == b.to_json()

    def test_missing_frame(self):
        data = _micro_dataset()
        recs = _records(data, np.ones((22, 3)) / 3)
        with pytest.raises(ValidationError, match="missing"):
            evaluate(recs[:-1], data)

    def test_duplicate_frame(self):
        data = _micro_dataset()
        recs = _records(data, np.ones((22, 3)) / 3)
        with pytest.raises(ValidationError, match="duplicate"):
            evaluate(recs + recs[:1], data)

    def test_unknown_frame(self):
        data = _micro_dataset()
        recs = _records(data, np.ones((22, 3)) / 3)
        recs.append({**recs[0], "video_id": "zzz"})
        with pytest.raises(ValidationError):
            evaluate(recs, data)

    def test_absent_class_is_null(self):
        seq = make_sequence("a", np.zeros((10, 1)), 2, [(1, 2, 5)])
        data = FeatureDataset(2, 1, (seq,))
        report = evaluate_scores(seq.labels.astype(float), data)
        assert math.isnan(report.per_class_ap[1])
        assert report.map == 1.0
        assert json.loads(report.to_json())["per_class_ap"] == [1.0, None]

    def test_report_in_unit_interval(self):
        data = gen_synthetic(2, 3, 3, 40, 1.0, make_rng(5))
        report = evaluate_scores(make_rng(6).random((data.n_frames, 3)), data)
        for v in report.per_class_ap + report.per_class_cap + [report.map, report.cmap] + report.portion_mcap:
            assert math.isnan(v) or 0.0 <= v <= 1.0
        assert "mean" in report.table()
