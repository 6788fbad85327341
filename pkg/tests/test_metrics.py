"""Correlation/accuracy metrics and the evaluation report."""

import itertools

import numpy as np
import pytest

from aesnet.losses import LossConfig
from aesnet.metrics import (
    EvalReport,
    UndefinedCorrelationError,
    average_ranks,
    binary_accuracy,
    build_report,
    evaluate_split,
    plcc,
    srcc,
)


def brute_force_ranks(values):
    """1-based average ranks straight from the definition."""
    out = []
    for v in values:
        smaller = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        out.append(smaller + (equal + 1) / 2.0)
    return np.array(out)


class TestPlcc:
    def test_perfect_positive_affine(self):
        x = np.array([1.0, 2.0, 3.0, 5.0])
        assert plcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_negative(self):
        x = np.array([1.0, 2.0, 3.0])
        assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_worked_example(self):
        assert plcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_constant_input_raises(self):
        with pytest.raises(UndefinedCorrelationError):
            plcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_samples(self):
        with pytest.raises(UndefinedCorrelationError):
            plcc([1.0], [2.0])

    def test_affine_invariance_and_sign_flip(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=20), rng.normal(size=20)
        base = plcc(x, y)
        assert plcc(3.5 * x + 2, y) == pytest.approx(base, abs=1e-12)
        assert plcc(x, 0.1 * y - 7) == pytest.approx(base, abs=1e-12)
        assert plcc(-2 * x, y) == pytest.approx(-base, abs=1e-12)


class TestSrcc:
    def test_monotone_transform_is_perfect(self):
        x = np.array([0.3, 2.0, 1.1, 5.0, 4.0])
        assert srcc(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)

    def test_reversed_order(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert srcc(x, x[::-1]) == pytest.approx(-1.0, abs=1e-12)

    def test_worked_example(self):
        assert srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_rank_only_dependence(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=30), rng.normal(size=30)
        base = srcc(x, y)
        assert srcc(np.exp(x), y) == pytest.approx(base, abs=1e-12)
        assert srcc(x ** 3, y) == pytest.approx(base, abs=1e-12)

    def test_average_ranks_brute_force_all_small_multisets(self):
        for n in range(2, 7):
            for values in itertools.product((1.0, 2.0, 3.0), repeat=n):
                np.testing.assert_allclose(
                    average_ranks(np.array(values)), brute_force_ranks(values),
                    atol=1e-12)

    def test_tied_srcc_matches_brute_force(self):
        for n in (3, 4):
            for x in itertools.product((1.0, 2.0, 3.0), repeat=n):
                for y in itertools.product((1.0, 2.0, 3.0), repeat=n):
                    xa, ya = np.array(x), np.array(y)
                    if len(set(x)) == 1 or len(set(y)) == 1:
                        continue
                    expected = plcc(brute_force_ranks(x), brute_force_ranks(y))
                    assert srcc(xa, ya) == pytest.approx(expected, abs=1e-12)


class TestBinaryAccuracy:
    def test_perfect(self):
        assert binary_accuracy([6.0, 4.0], [6.0, 4.0]) == 1.0

    def test_both_flipped(self):
        assert binary_accuracy([6.0, 4.0], [4.0, 6.0]) == 0.0

    def test_worked_example(self):
        assert binary_accuracy([6, 4, 5.1], [5.5, 4.5, 4.9]) == pytest.approx(2 / 3)

    def test_threshold_value_counts_as_low(self):
        assert binary_accuracy([5.0], [5.0]) == 1.0
        assert binary_accuracy([5.0], [5.1]) == 0.0

    def test_shift_invariance_with_threshold(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.uniform(1, 10, 40), rng.uniform(1, 10, 40)
        base = binary_accuracy(pred, gt, threshold=5.0)
        assert binary_accuracy(pred + 2, gt + 2, threshold=7.0) == base

    def test_length_mismatch(self):
        with pytest.raises(Exception, match="binary_accuracy"):
            binary_accuracy([1.0], [1.0, 2.0])


class _OracleModel:
    """Stub model that answers with the stored ground truth."""

    def __init__(self, mode="score"):
        self.mode = mode
        self._lookup = {}

    def remember(self, sample):
        self._lookup[sample.features.tobytes()] = sample

    def predict(self, features):
        from aesnet.model import Prediction
        sample = self._lookup[features.tobytes()]
        if self.mode == "score":
            return Prediction("score", sample.score), None
        return Prediction("distribution", sample.score, sample.distribution), None


class _FakeSample:
    def __init__(self, sample_id, score, rng, distribution=None):
        self.sample_id = sample_id
        self.score = score
        self.features = rng.normal(size=(3, 4, 4))
        self.distribution = distribution


class TestReports:
    def test_round_trip(self):
        report = EvalReport(plcc=0.5, srcc=0.25, accuracy=0.75, mse=1.5,
                            emd=None, n=4, per_sample=[("a", 1.0, 2.0)])
        again = EvalReport.from_json(report.to_json())
        assert again == report

    def test_round_trip_with_undefined_correlations(self):
        report = EvalReport(plcc=None, srcc=None, accuracy=1.0, mse=0.0,
                            emd=0.1, n=2, per_sample=[])
        assert EvalReport.from_json(report.to_json()) == report

    def test_constant_predictions_flag_undefined(self):
        report = build_report(["a", "b"], np.array([5.0, 5.0]), np.array([4.0, 6.0]))
        assert report.plcc is None and report.srcc is None
        assert report.mse == pytest.approx(1.0)

    def test_oracle_model_scores_perfectly(self):
        rng = np.random.default_rng(3)
        model = _OracleModel()
        samples = [_FakeSample(f"s{i}", float(s), rng)
                   for i, s in enumerate([2.0, 4.5, 6.0, 8.0, 9.0])]
        for s in samples:
            model.remember(s)
        report = evaluate_split(model, samples, LossConfig(relative_weight=0.0))
        assert report.plcc == pytest.approx(1.0, abs=1e-12)
        assert report.srcc == pytest.approx(1.0, abs=1e-12)
        assert report.accuracy == 1.0
        assert report.mse == 0.0
        assert report.emd is None
        assert report.n == 5

    def test_shuffled_predictions_have_low_correlation(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(1, 10, 100)
        shuffled = rng.permutation(gt)
        report = build_report([str(i) for i in range(100)], shuffled, gt)
        assert abs(report.plcc) < 0.3

    def test_distribution_mode_includes_emd(self):
        rng = np.random.default_rng(5)
        model = _OracleModel(mode="distribution")
        samples = []
        for i, s in enumerate([2.0, 5.0, 8.0]):
            dist = np.zeros(10)
            dist[int(s) - 1] = 1.0
            samples.append(_FakeSample(f"s{i}", s, rng, dist))
        for s in samples:
            model.remember(s)
        report = evaluate_split(model, samples, LossConfig(mode="distribution"))
        assert report.emd == pytest.approx(0.0, abs=1e-12)

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate_split(_OracleModel(), [], LossConfig())
