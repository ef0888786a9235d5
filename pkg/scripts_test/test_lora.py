"""Unit tests for low-rank adapters."""

from __future__ import annotations

import os
import sys
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids.checkpoint import load_checkpoint, save_checkpoint
from canids.config import LoraConfig, ModelConfig, TrainConfig
from canids.dataset import DatasetBundle
from canids.lora import (
    AdapterBaseMismatchError,
    AdapterRankError,
    AdapterTargetError,
    AlreadyAdaptedError,
    adapter_forward,
    adapter_parameter_count,
    attach_adapters,
    attach_from_config,
    count_trainable,
    is_adapted,
    load_adapters,
    merge_adapters,
    save_adapters,
)
from canids.model import TransformerModel
from canids.train import train_run
from ingest.can_log import AttackClass, LabeledRecord, make_frame


def _model(arch='encoder'):
    cfg = ModelConfig(arch=arch, n_layers=1, d_model=8, n_heads=2, n_kv_heads=2 if arch == 'encoder' else 1,
                      ffn_mult=2, seed=11)
    return TransformerModel(cfg)


def _records(n_per_class=6):
    records = []
    for i in range(n_per_class):
        for cls in AttackClass:
            can_id = 0 if cls is AttackClass.DOS else 0x100 + 0x40 * int(cls)
            records.append(LabeledRecord(make_frame(i * 10 + int(cls), can_id, bytes([i, int(cls)])),
                                         cls, cls.is_attack))
    return records


def _randomize_adapters(model, seed=0):
    rng = np.random.default_rng(seed)
    for lin in model.linears().values():
        if lin.adapter is not None:
            lin.adapter.U.value[...] = rng.normal(0.0, 0.1, size=lin.adapter.U.value.shape)


FRAMES = [make_frame(0, 0x316, bytes(range(8))), make_frame(5, 0x000, bytes(8)), make_frame(9, 0x43F, b'\x02')]


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_zero_initialized_adapters_are_identity(arch):
    model = _model(arch)
    batch = model.tokenizer.encode_frames(FRAMES)
    before = model.predict_proba(batch)
    attach_adapters(model, r=2, alpha=4.0, dropout=0.1)
    np.testing.assert_array_equal(model.predict_proba(batch), before)


def test_adapter_forward_matches_base_at_init():
    model = _model()
    attach_adapters(model, ['layers.0.attn.q'], r=2, alpha=4.0, dropout=0.0)
    layer = model.linears()['layers.0.attn.q']
    x = np.random.default_rng(1).normal(size=(3, 8))
    y, _ = adapter_forward(layer, x)
    np.testing.assert_array_equal(y, x @ layer.weight.value.T + layer.bias.value)


@pytest.mark.parametrize('arch', ['encoder', 'decoder'])
def test_merge_is_equivalent(arch):
    model = _model(arch)
    attach_adapters(model, r=2, alpha=8.0, dropout=0.0)
    _randomize_adapters(model)
    batch = model.tokenizer.encode_frames(FRAMES)
    adapted = model.predict_proba(batch)
    merge_adapters(model)
    assert not is_adapted(model)
    assert all(not p.frozen for p in model.parameters())
    np.testing.assert_allclose(model.predict_proba(batch), adapted, rtol=0, atol=1e-9)


class TestAttachRules(unittest.TestCase):

    def test_parameter_count_example(self):
        self.assertEqual(adapter_parameter_count([(64, 64)], 8), 1024)

    def test_count_matches_attached_tensors(self):
        model = _model()
        attach_adapters(model, ['*.attn.*'], r=2)
        shapes = [(lin.d_out, lin.d_in) for lin in model.linears().values() if lin.adapter is not None]
        adapter_params = sum(p.size for p in model.parameters() if '.lora_' in p.name)
        self.assertEqual(adapter_params, adapter_parameter_count(shapes, 2))

    def test_attach_twice(self):
        model = _model()
        attach_adapters(model, r=2)
        with self.assertRaises(AlreadyAdaptedError):
            attach_adapters(model, r=2)

    def test_rank_too_large(self):
        with self.assertRaises(AdapterRankError):
            attach_adapters(_model(), r=16)

    def test_no_matching_target(self):
        with self.assertRaises(AdapterTargetError):
            attach_adapters(_model(), ['*.conv.*'], r=2)

    def test_only_adapters_and_head_train(self):
        model = _model()
        attach_from_config(model, LoraConfig(enabled=True, r=2, alpha=8.0))
        for p in model.parameters():
            expected_trainable = '.lora_' in p.name or p.name.startswith('head.')
            self.assertEqual(not p.frozen, expected_trainable, p.name)
        trainable, total, fraction = count_trainable(model)
        self.assertLess(trainable, total)
        self.assertAlmostEqual(fraction, trainable / total)


def test_training_leaves_frozen_weights_untouched():
    model = _model()
    attach_adapters(model, r=2, alpha=8.0, dropout=0.1)
    frozen = {p.name: p.value.copy() for p in model.parameters() if p.frozen}
    trainable = {p.name: p.value.copy() for p in model.parameters() if not p.frozen}
    records = _records()
    bundle = DatasetBundle(train=records, validation=records[:10], test=[])
    train_run(model, bundle, TrainConfig(epochs=2, batch_size=8, learning_rate=1e-2), restore_best=False)
    for p in model.parameters():
        if p.name in frozen:
            np.testing.assert_array_equal(p.value, frozen[p.name])
    assert any(not np.array_equal(p.value, trainable[p.name]) for p in model.parameters() if not p.frozen)


def test_adapter_file_round_trip(tmp_path):
    base = _model()
    digest = save_checkpoint(base, tmp_path / 'model.ckpt')
    attach_adapters(base, r=2, alpha=8.0)
    _randomize_adapters(base, seed=3)
    base.head.out.bias.value[...] = 0.25
    save_adapters(base, tmp_path / 'adapters.ckpt', digest)

    fresh = load_checkpoint(tmp_path / 'model.ckpt')
    load_adapters(fresh, tmp_path / 'adapters.ckpt', fresh.checkpoint_digest)
    batch = base.tokenizer.encode_frames(FRAMES)
    np.testing.assert_array_equal(fresh.predict_proba(batch), base.predict_proba(batch))

    other = load_checkpoint(tmp_path / 'model.ckpt')
    with pytest.raises(AdapterBaseMismatchError):
        load_adapters(other, tmp_path / 'adapters.ckpt', '0' * 64)
