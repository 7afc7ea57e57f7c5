"""Metrics and the trivial baselines."""

import numpy as np
import pytest

from mtca.evaluation import (
    EvalReport,
    accuracy,
    confusion_matrix,
    evaluate_predictions,
    random_baseline,
    ticker_following_baseline,
)


class TestAccuracy:
    def test_identical(self):
        assert accuracy([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0

    def test_disjoint(self):
        assert accuracy([0, 0, 0], [1, 2, 1]) == 0.0

    def test_seven_of_ten(self):
        preds = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
        labels = [0, 1, 2, 0, 1, 2, 0, 2, 0, 1]
        assert accuracy(preds, labels) == pytest.approx(0.7)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([0, 1], [0])

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy([], [])

    def test_permutation_invariant(self, rng):
        preds = rng.integers(0, 3, 50)
        labels = rng.integers(0, 3, 50)
        perm = rng.permutation(50)
        assert accuracy(preds, labels) == accuracy(preds[perm], labels[perm])


class TestRandomBaseline:
    def test_balanced_labels_near_third(self):
        labels = np.repeat([0, 1, 2], 10000)
        acc = random_baseline(labels, np.random.default_rng(17))
        assert abs(acc - 1 / 3) <= 0.01

    def test_deterministic_given_seed(self):
        labels = [1]
        a = random_baseline(labels, np.random.default_rng(3))
        b = random_baseline(labels, np.random.default_rng(3))
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            random_baseline([], np.random.default_rng(0))


class TestTickerFollowingBaseline:
    def test_constant_sequence(self):
        assert ticker_following_baseline({"A": [1, 1, 1, 1]}) == 1.0

    def test_alternating_sequence(self):
        assert ticker_following_baseline({"A": [0, 1, 0, 1, 0]}) == 0.0

    def test_matches_shift_and_compare(self, rng):
        history = {
            f"T{k}": rng.integers(0, 3, size=rng.integers(2, 12)).tolist()
            for k in range(8)
        }
        hits = total = 0
        for seq in history.values():
            for prev, cur in zip(seq, seq[1:]):
                hits += prev == cur
                total += 1
        assert ticker_following_baseline(history) == pytest.approx(hits / total)

    def test_single_observations_rejected(self):
        with pytest.raises(ValueError):
            ticker_following_baseline({"A": [1], "B": [2]})


class TestEvalReport:
    def test_confusion_row_sums_are_supports(self, rng):
        preds = rng.integers(0, 3, 60)
        labels = rng.integers(0, 3, 60)
        report = evaluate_predictions("val", preds, labels)
        matrix = np.asarray(report.confusion)
        for c in range(3):
            assert matrix[c].sum() == int(np.sum(labels == c))
        assert matrix.sum() == 60
        assert report.accuracy == pytest.approx(np.trace(matrix) / 60)

    def test_json_roundtrip(self, rng):
        preds = rng.integers(0, 3, 30)
        labels = rng.integers(0, 3, 30)
        report = evaluate_predictions("test", preds, labels, baselines={"rb": 0.31})
        back = EvalReport.from_json(report.to_json())
        assert back == report

    def test_render_table_contains_baselines(self):
        report = evaluate_predictions("test", [0, 1], [0, 1], baselines={"rb": 0.33, "tfb": 0.5})
        text = report.render_table()
        assert "rb" in text and "tfb" in text and "0.3300" in text

    def test_validation_rejects_bad_accuracy(self):
        report = evaluate_predictions("val", [0, 1, 2], [0, 1, 2])
        report.accuracy = 0.1
        with pytest.raises(ValueError):
            report.validate()

    def test_confusion_matrix_contract(self):
        m = confusion_matrix([0, 0, 1], [2, 0, 1])
        assert m[2, 0] == 1 and m[0, 0] == 1 and m[1, 1] == 1
