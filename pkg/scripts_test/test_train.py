"""Unit tests for the loss, AdamW and the training loop."""

from __future__ import annotations

import math
import os
import sys
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids.config import ModelConfig, TrainConfig
from canids.dataset import DatasetBundle
from canids.model import Parameter, TransformerModel
from canids.train import (
    HISTORY_COLUMNS,
    NonFiniteGradientError,
    OptimizerState,
    TrainHistory,
    TrainingError,
    adamw_step,
    cross_entropy,
    cross_entropy_from_logits,
    evaluate,
    train_run,
    train_step,
)
from ingest.can_log import AttackClass, LabeledRecord, make_frame


def _model(arch='encoder', seed=2):
    cfg = ModelConfig(arch=arch, n_layers=1, d_model=8, n_heads=2, n_kv_heads=2 if arch == 'encoder' else 1,
                      ffn_mult=2, seed=seed)
    return TransformerModel(cfg)


def _records(n_per_class):
    records = []
    for i in range(n_per_class):
        for cls in AttackClass:
            can_id = 0 if cls is AttackClass.DOS else 0x120 * int(cls) + (i % 3)
            payload = bytes(8) if cls is AttackClass.DOS else bytes([i % 256]) * (1 + int(cls))
            records.append(LabeledRecord(make_frame(i * 1000 + int(cls), can_id, payload), cls, cls.is_attack))
    return records


class TestLoss(unittest.TestCase):

    def test_uniform_probabilities(self):
        self.assertAlmostEqual(cross_entropy(np.full(5, 0.2), 3), 1.609438, places=6)
        mean = (cross_entropy(np.full(5, 0.2), 0) + cross_entropy(np.eye(5)[2], 2)) / 2
        self.assertAlmostEqual(mean, 0.804719, places=6)

    def test_zero_probability_is_infinite(self):
        self.assertEqual(cross_entropy(np.eye(5)[0], 1), math.inf)

    def test_logit_form_matches_probability_form(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 5)) * 3
        labels = rng.integers(0, 5, size=6)
        mean, dlogits, per_sample = cross_entropy_from_logits(logits, labels)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = [cross_entropy(p, int(y)) for p, y in zip(probs, labels)]
        np.testing.assert_allclose(per_sample, expected, rtol=1e-12)
        self.assertAlmostEqual(mean, float(np.mean(expected)), places=12)
        np.testing.assert_allclose(dlogits, (probs - np.eye(5)[labels]) / 6, atol=1e-12)

    def test_large_logits_stay_finite(self):
        mean, _, _ = cross_entropy_from_logits(np.array([[1000.0, 0.0, 0.0, 0.0, 0.0]]), np.array([1]))
        self.assertAlmostEqual(mean, 1000.0, places=9)


class TestAdamW(unittest.TestCase):

    def test_zero_gradient_applies_only_decay(self):
        p = Parameter('w', np.array([1.0]))
        adamw_step(OptimizerState(lr=0.01, weight_decay=0.01), [p])
        self.assertAlmostEqual(float(p.value[0]), 0.9999, places=12)

    def test_first_step_moves_by_learning_rate(self):
        p = Parameter('w', np.array([1.0, -2.0]))
        p.grad[...] = [3.0, -0.5]
        adamw_step(OptimizerState(lr=0.01, weight_decay=0.0), [p])
        np.testing.assert_allclose(p.value, [0.99, -1.99], atol=1e-8)

    def test_no_decay_flag_and_frozen_tensors(self):
        bias = Parameter('b', np.array([1.0]), decay=False)
        frozen = Parameter('f', np.array([1.0]), frozen=True)
        frozen.grad[...] = 5.0
        state = OptimizerState(lr=0.01, weight_decay=0.5)
        adamw_step(state, [bias, frozen])
        self.assertEqual(float(bias.value[0]), 1.0)
        self.assertEqual(float(frozen.value[0]), 1.0)
        self.assertNotIn('f', state.m)

    def test_quadratic_descends(self):
        p = Parameter('w', np.array([2.0, -3.0]))
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        losses = []
        for _ in range(10):
            losses.append(float(np.sum(p.value ** 2)))
            p.zero_grad()
            p.grad += 2.0 * p.value
            adamw_step(state, [p])
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])))
        self.assertEqual(state.t, 10)

    def test_non_finite_gradient_touches_nothing(self):
        good = Parameter('a', np.array([1.0]))
        bad = Parameter('b', np.array([2.0]))
        good.grad[...] = 1.0
        bad.grad[...] = np.nan
        state = OptimizerState(lr=0.1)
        with self.assertRaises(NonFiniteGradientError):
            adamw_step(state, [good, bad])
        self.assertEqual(float(good.value[0]), 1.0)
        self.assertEqual(float(bad.value[0]), 2.0)
        self.assertEqual(state.t, 0)


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_accumulation_matches_one_large_batch(arch):
    records = _records(4)[:16]
    accumulated, single = _model(arch), _model(arch)
    state_a = OptimizerState(lr=1e-3)
    state_b = OptimizerState(lr=1e-3)
    losses = train_step(accumulated, [records[i:i + 4] for i in range(0, 16, 4)], state_a)
    train_step(single, [records], state_b)
    assert len(losses) == 4
    for pa, pb in zip(accumulated.parameters(), single.parameters()):
        np.testing.assert_allclose(pa.grad, pb.grad, rtol=0, atol=1e-9)
        np.testing.assert_allclose(pa.value, pb.value, rtol=0, atol=1e-9)


def _bundle():
    records = _records(12)
    return DatasetBundle(train=records[:40], validation=records[40:], test=[])


def test_train_run_is_deterministic():
    config = TrainConfig(epochs=3, batch_size=8, learning_rate=5e-3, seed=4)
    a, b = _model(), _model()
    result_a = train_run(a, _bundle(), config)
    result_b = train_run(b, _bundle(), config)
    assert result_a.history.to_frame().equals(result_b.history.to_frame())
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)
    assert len(result_a.history) == 3
    assert 1 <= result_a.best_epoch <= 3
    assert result_a.best_ba == max(result_a.history.ba)


def test_best_epoch_weights_are_restored():
    model = _model()
    bundle = _bundle()
    result = train_run(model, bundle, TrainConfig(epochs=3, batch_size=8, learning_rate=5e-3))
    _, report = evaluate(model, bundle.validation)
    assert report.ba == pytest.approx(result.best_ba)


def test_training_reduces_loss():
    model = _model()
    result = train_run(model, _bundle(), TrainConfig(epochs=6, batch_size=8, learning_rate=1e-2, seed=1))
    assert result.history.train_loss[-1] < result.history.train_loss[0]


def test_empty_parts_are_rejected():
    records = _records(2)
    with pytest.raises(TrainingError):
        train_run(_model(), DatasetBundle(train=[], validation=records, test=[]), TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train_run(_model(), DatasetBundle(train=records, validation=[], test=[]), TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        evaluate(_model(), [])


def test_history_csv(tmp_path):
    history = TrainHistory()
    model = _model()
    _, report = evaluate(model, _records(2))
    history.record(1.5, 1.4, report)
    history.record(1.2, 1.1, report)
    path = history.write_csv(tmp_path / 'history.csv')
    header = path.read_text(encoding='utf-8').splitlines()[0]
    assert header.split(',') == HISTORY_COLUMNS
    again = TrainHistory.read_csv(path)
    assert again.train_loss == [1.5, 1.2]
    assert again.ba == pytest.approx(history.ba)
