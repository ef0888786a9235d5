"""Unit tests for the encoder and decoder classifiers."""

from __future__ import annotations

import os
import sys
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids.config import ModelConfig
from canids.model import (
    ArchitectureMismatchError,
    ModelError,
    TransformerModel,
    model_summary,
    parameter_count,
    predict_label,
    predict_records,
    reinit_head,
)
from canids.nn_core import grad_check
from canids.textify import FrameTokenizer, TokenBatch
from canids.train import cross_entropy_from_logits
from ingest.can_log import AttackClass, LabeledRecord, make_frame


def small_config(arch, **overrides):
    settings = dict(arch=arch, n_layers=1, d_model=8, n_heads=2, n_kv_heads=1 if arch == 'decoder' else 2,
                    ffn_mult=2, max_len=48, seed=3)
    settings.update(overrides)
    return ModelConfig(**settings)


FRAMES = [
    make_frame(0, 0x316, bytes([0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F])),
    make_frame(100, 0x000, bytes(8)),
    make_frame(200, 0x43F, b'\x01'),
    make_frame(300, 0x7FF, b''),
]
LABELS = [0, 1, 3, 2]


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_padding_does_not_change_pooled_output(arch):
    model = TransformerModel(small_config(arch))
    short = make_frame(0, 0x123, b'')
    long = make_frame(0, 0x7FF, bytes(range(8)))
    alone, _ = model.forward(model.tokenizer.encode_frames([short]))
    batched, _ = model.forward(model.tokenizer.encode_frames([short, long]))
    np.testing.assert_allclose(batched[0], alone[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_longer_max_len_padding_is_bit_identical(arch):
    model = TransformerModel(small_config(arch, max_len=64))
    frames = FRAMES[:2]
    short = FrameTokenizer(arch, 28, model.vocab, model.text_cfg).encode_frames(frames)
    padded = FrameTokenizer(arch, 64, model.vocab, model.text_cfg).encode_frames(frames)
    assert padded.ids.shape[1] > short.ids.shape[1]
    np.testing.assert_array_equal(model.forward(padded)[0], model.forward(short)[0])


def _pooled_at(model, batch, positions):
    n = len(positions)
    at = TokenBatch(ids=np.repeat(batch.ids, n, axis=0), mask=np.repeat(batch.mask, n, axis=0),
                    pool_index=np.asarray(positions, dtype=np.int64), labels=np.zeros(n, dtype=np.int64))
    return model.forward(at)[0]


def test_decoder_outputs_before_a_changed_token_are_bit_identical():
    model = TransformerModel(small_config('decoder', n_layers=2))
    original = make_frame(0, 0x316, bytes([0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F]))
    changed = make_frame(0, 0x316, bytes([0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x70]))
    a = model.tokenizer.encode_frames([original])
    b = model.tokenizer.encode_frames([changed])
    j = int(np.flatnonzero(a.ids[0] != b.ids[0])[0])
    assert 0 < j < int(a.pool_index[0])

    earlier = list(range(j))
    np.testing.assert_array_equal(_pooled_at(model, a, earlier), _pooled_at(model, b, earlier))
    assert not np.array_equal(model.forward(a)[0], model.forward(b)[0])


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_parameter_count_matches_tensors(arch):
    for cfg in (small_config(arch), small_config(arch, n_layers=3, d_model=16, n_heads=4, head_hidden=12)):
        model = TransformerModel(cfg)
        assert sum(p.size for p in model.parameters()) == parameter_count(cfg)
        summary = model_summary(model)
        assert summary.total == parameter_count(cfg)
        assert summary.trainable == summary.total
        assert sum(summary.groups.values()) == summary.total


def test_zero_head_gives_uniform_probabilities():
    model = TransformerModel(small_config('encoder'))
    model.head.out.weight.value[...] = 0.0
    model.head.out.bias.value[...] = 0.0
    probs = model.predict_proba(model.tokenizer.encode_frames(FRAMES))
    np.testing.assert_allclose(probs, np.full((4, 5), 0.2), atol=1e-15)
    label, _ = predict_label(model, FRAMES[0])
    assert label is AttackClass.NORMAL


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_full_model_gradient_check(arch):
    model = TransformerModel(small_config(arch, init_std=0.3))
    batch = model.tokenizer.encode_frames(FRAMES)
    labels = np.array(LABELS)
    params = {p.name: p.value for p in model.parameters()}

    def f():
        model.zero_grad()
        logits, cache = model.logits(batch)
        loss, dlogits, _ = cross_entropy_from_logits(logits, labels)
        model.backward(dlogits, cache)
        return loss, {p.name: p.grad.copy() for p in model.parameters()}

    report = grad_check(f, params, tolerance=1e-4, max_elements=24)
    assert report.passed, report.failures()


class TestArchitectureChecks(unittest.TestCase):

    def test_decoder_rejects_encoder_tokens(self):
        decoder = TransformerModel(small_config('decoder'))
        batch = FrameTokenizer('encoder').encode_frames(FRAMES)
        with self.assertRaises(ArchitectureMismatchError):
            decoder.forward(batch)

    def test_sequences_longer_than_max_len(self):
        model = TransformerModel(small_config('encoder', max_len=24))
        batch = FrameTokenizer('encoder', max_len=48).encode_frames(FRAMES[:1])
        with self.assertRaises(ArchitectureMismatchError):
            model.forward(batch)

    def test_empty_batch(self):
        model = TransformerModel(small_config('encoder'))
        with self.assertRaises(ModelError):
            model.forward(model.tokenizer.encode_frames([]))

    def test_vocab_size_must_match(self):
        with self.assertRaises(ArchitectureMismatchError):
            TransformerModel(small_config('encoder', vocab_size=30))

    def test_decoder_has_no_positional_table_or_biases(self):
        names = set(TransformerModel(small_config('decoder')).named_parameters())
        self.assertNotIn('pos_emb', names)
        self.assertFalse(any(n.endswith('.bias') and '.attn.' in n for n in names))
        self.assertIn('layers.0.ffn.w3.weight', names)


def test_same_seed_same_weights():
    a = TransformerModel(small_config('decoder'))
    b = TransformerModel(small_config('decoder'))
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_reinit_head_only_touches_head():
    model = TransformerModel(small_config('encoder'))
    before = {p.name: p.value.copy() for p in model.parameters()}
    reinit_head(model, seed=42)
    for p in model.parameters():
        if p.name.startswith('head.'):
            continue
        np.testing.assert_array_equal(p.value, before[p.name])
    assert not np.array_equal(model.head.hidden.weight.value, before['head.hidden.weight'])


def test_predict_records_batches_consistently():
    model = TransformerModel(small_config('decoder'))
    records = [LabeledRecord(f, AttackClass(lbl), lbl != 0) for f, lbl in zip(FRAMES, LABELS)] * 3
    preds, probs = predict_records(model, records, batch_size=5)
    full = model.predict_proba(model.tokenizer.encode_batch(records))
    assert preds.shape == (12,)
    np.testing.assert_allclose(probs, full, atol=1e-12)
    np.testing.assert_array_equal(preds, np.argmax(full, axis=1))
    empty_preds, empty_probs = predict_records(model, [])
    assert empty_preds.shape == (0,)
    assert empty_probs.shape == (0, 5)
