"""Unit tests for the confusion matrix and IDS metrics.

scikit-learn serves as the reference implementation for the macro averages.
"""

from __future__ import annotations

import json
import os
import sys
import unittest

import numpy as np
import pytest
from sklearn.metrics import balanced_accuracy_score, f1_score, precision_score, recall_score
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids.metrics import (
    ClassIndexError,
    ConfusionMatrix,
    EmptyMatrixError,
    LengthMismatchError,
    compute_metrics,
    confusion_matrix,
    evaluate_predictions,
    expected_false_alarms,
    format_report_table,
    per_class_report,
)


def _random_pairs(seed, n, n_classes=5, skip_class=None):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    preds = np.where(rng.random(n) < 0.6, labels, rng.integers(0, n_classes, size=n))
    if skip_class is not None:
        labels = np.where(labels == skip_class, (skip_class + 1) % n_classes, labels)
    return preds, labels


@pytest.mark.parametrize('seed,skip_class', [(0, None), (1, None), (2, 3), (3, 0)])
def test_agrees_with_sklearn(seed, skip_class):
    preds, labels = _random_pairs(seed, 2000, skip_class=skip_class)
    report = evaluate_predictions(preds, labels)
    present = sorted(set(labels.tolist()))
    np.testing.assert_array_equal(report.confusion, sk_confusion_matrix(labels, preds, labels=range(5)))
    assert report.ba == pytest.approx(balanced_accuracy_score(labels, preds), abs=1e-12)
    assert report.prec == pytest.approx(
        precision_score(labels, preds, labels=present, average='macro', zero_division=0), abs=1e-12)
    assert report.dr == pytest.approx(
        recall_score(labels, preds, labels=present, average='macro', zero_division=0), abs=1e-12)
    assert report.macro_f1 == pytest.approx(
        f1_score(labels, preds, labels=present, average='macro', zero_division=0), abs=1e-12)


def test_brute_force_counts():
    preds, labels = _random_pairs(7, 10_000)
    cm = confusion_matrix(preds, labels)
    expected = np.zeros((5, 5), dtype=np.int64)
    for p, y in zip(preds, labels):
        expected[y, p] += 1
    np.testing.assert_array_equal(cm.counts, expected)
    assert cm.total == 10_000
    np.testing.assert_array_equal(cm.tp() + cm.fn() + cm.fp() + cm.tn(), np.full(5, 10_000))
    for i, row in enumerate(per_class_report(cm)):
        tp = int(np.sum((preds == i) & (labels == i)))
        assert row.instances == int(np.sum(labels == i))
        assert row.dr == pytest.approx(tp / np.sum(labels == i))
        assert row.prec == pytest.approx(tp / np.sum(preds == i))


class TestOverallMetrics(unittest.TestCase):

    def test_false_alarm_rate_example(self):
        counts = np.zeros((5, 5), dtype=np.int64)
        counts[0, 0] = 10_000_000 - 31
        counts[0, 1] = 31
        counts[1, 1] = 100
        report = compute_metrics(ConfusionMatrix(counts))
        self.assertAlmostEqual(report.far, 3.1e-6, places=15)
        self.assertAlmostEqual(expected_false_alarms(report.far, 1e7), 31.0, places=6)

    def test_balanced_accuracy_example(self):
        report = evaluate_predictions([0, 0, 1, 0], [0, 0, 1, 1])
        self.assertAlmostEqual(report.ba, 0.75)
        self.assertAlmostEqual(report.dr, 0.75)
        self.assertAlmostEqual(report.prec, (2 / 3 + 1.0) / 2)
        self.assertAlmostEqual(report.f1, 2 * report.prec * report.dr / (report.prec + report.dr))
        self.assertAlmostEqual(report.far, 0.0)

    def test_absent_classes_are_flagged_not_averaged(self):
        report = evaluate_predictions([0, 1], [0, 1])
        self.assertEqual(report.ba, 1.0)
        empty = [row.name for row in report.per_class if row.empty]
        self.assertEqual(empty, ['Fuzzy', 'GearSpoof', 'RpmSpoof'])
        self.assertIn('DR(Fuzzy)', report.undefined)
        self.assertEqual(report.averaged_over, ['Normal', 'DoS'])
        self.assertAlmostEqual(report.ba_all_classes, 0.4)
        self.assertEqual(report.to_dict()['averaged_over'], ['Normal', 'DoS'])

    def test_empty_matrix(self):
        with self.assertRaises(EmptyMatrixError):
            evaluate_predictions([], [])

    def test_input_errors(self):
        with self.assertRaises(LengthMismatchError):
            confusion_matrix([0, 1], [0])
        with self.assertRaises(ClassIndexError):
            confusion_matrix([5], [0])
        with self.assertRaises(ClassIndexError):
            confusion_matrix([0], [-1])


def test_json_and_table(tmp_path):
    report = evaluate_predictions([0, 1, 2, 3, 4, 0], [0, 1, 2, 3, 4, 1])
    path = report.write_json(tmp_path / 'report.json')
    text = path.read_text(encoding='utf-8')
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert data['instances'] == 6
    assert data['class_names'] == ['Normal', 'DoS', 'Fuzzy', 'GearSpoof', 'RpmSpoof']
    assert data['averaged_over'] == data['class_names']
    assert data['ba_all_classes'] == pytest.approx(report.ba)
    table = format_report_table(report)
    assert 'BA' in table and 'RpmSpoof' in table
    assert f'{report.ba:.6f}' in table
