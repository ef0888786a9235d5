"""Unit tests for splitting, subsampling, batching and split manifests."""

from __future__ import annotations

import os
import sys
import unittest
from collections import Counter

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids.config import SplitConfig
from canids.dataset import (
    DatasetError,
    SplitError,
    SubsampleError,
    balanced_subsample,
    batch_count,
    build_bundle,
    class_counts,
    export_bundle,
    load_split_manifest,
    make_batches,
    materialize,
    save_split_manifest,
    stratified_split,
    subsample_sizes,
)
from ingest.can_log import AttackClass, LabeledRecord, make_frame
from ingest.capture_store import load_capture_path


def make_records(per_class, classes=tuple(AttackClass)):
    """Distinct records, `per_class` of each class, interleaved in time."""
    records = []
    t = 0
    for i in range(per_class):
        for cls in classes:
            can_id = 0 if cls is AttackClass.DOS else 0x100 + int(cls)
            records.append(LabeledRecord(make_frame(t, can_id, (i % 256).to_bytes(1, 'big') * 8),
                                         cls, cls.is_attack))
            t += 100
    return records


@pytest.fixture(name='records')
def records_fixture():
    return make_records(200)


class TestStratifiedSplit(unittest.TestCase):

    def test_seventy_thirty_per_class(self):
        records = make_records(100)
        a, b = stratified_split(records, 0.7, seed=1)
        for cls in AttackClass:
            self.assertEqual(class_counts(a)[cls], 70)
            self.assertEqual(class_counts(b)[cls], 30)
        self.assertEqual(Counter(a + b), Counter(records))

    def test_single_record(self):
        records = make_records(1, classes=(AttackClass.DOS,))
        a, b = stratified_split(records, 0.7, seed=0)
        self.assertEqual((len(a), len(b)), (1, 0))

    def test_deterministic(self):
        records = make_records(30)
        self.assertEqual(stratified_split(records, 0.7, 5), stratified_split(records, 0.7, 5))

    def test_invalid_fraction(self):
        with self.assertRaises(SplitError):
            stratified_split(make_records(3), 1.0, 0)
        with self.assertRaises(SplitError):
            stratified_split([], 0.5, 0)


class TestSubsample(unittest.TestCase):

    def test_car_hacking_sizes(self):
        sizes = subsample_sizes({int(AttackClass.DOS): 587_521, int(AttackClass.NORMAL): 1_000_000}, 0.01)
        self.assertEqual(sizes[int(AttackClass.DOS)], 5875)
        self.assertEqual(sizes[int(AttackClass.NORMAL)], 1000)

    def test_p_one_keeps_attacks(self):
        sizes = subsample_sizes({0: 500, 1: 500, 2: 37}, 1.0)
        self.assertEqual(sizes, {0: 50, 1: 500, 2: 37})

    def test_zero_keep_raises(self):
        with self.assertRaises(SubsampleError):
            subsample_sizes({int(AttackClass.FUZZY): 50}, 0.01)
        with self.assertRaises(SubsampleError):
            subsample_sizes({0: 10}, 0.0)

    def test_class_ratio(self):
        records = make_records(1000)
        subset = balanced_subsample(records, 0.5, seed=2)
        counts = class_counts(subset)
        self.assertEqual(counts[AttackClass.NORMAL], 50)
        for cls in AttackClass.attacks():
            self.assertEqual(counts[cls], 500)
        self.assertEqual(len(set(subset)), len(subset))


def test_batches_sizes():
    records = make_records(2, classes=tuple(AttackClass))
    assert len(records) == 10
    assert [len(b) for b in make_batches(records, 4, seed=0)] == [4, 4, 2]
    assert len(list(make_batches(records, 4, seed=0, drop_last=True))) == 2
    assert batch_count(10, 4) == 3
    assert batch_count(10, 4, drop_last=True) == 2


def test_batches_reshuffle_per_epoch(records):
    epoch0 = [r for batch in make_batches(records, 8, seed=3, epoch=0) for r in batch]
    again = [r for batch in make_batches(records, 8, seed=3, epoch=0) for r in batch]
    epoch1 = [r for batch in make_batches(records, 8, seed=3, epoch=1) for r in batch]
    assert epoch0 == again
    assert epoch0 != epoch1
    assert Counter(epoch0) == Counter(epoch1) == Counter(records)


def test_invalid_batch_size(records):
    with pytest.raises(DatasetError):
        list(make_batches(records, 0, seed=0))


@pytest.mark.parametrize('subsample_first', [False, True])
def test_bundle_parts_are_disjoint(records, subsample_first):
    cfg = SplitConfig(p=0.5, seed=4, subsample_first=subsample_first)
    bundle = build_bundle(records, cfg)
    sets = {name: set(idx) for name, idx in bundle.indices.items()}
    assert not sets['train'] & sets['test']
    assert not sets['validation'] & sets['test']
    assert not sets['train'] & sets['validation']
    assert len(bundle.train) == len(sets['train'])


def test_test_part_is_never_subsampled(records):
    bundle = build_bundle(records, SplitConfig(p=0.5, seed=0))
    counts = class_counts(bundle.test)
    assert all(counts[cls] == 60 for cls in AttackClass)
    pool = class_counts(bundle.train + bundle.validation)
    assert pool[AttackClass.NORMAL] == 7
    assert pool[AttackClass.DOS] == 70


def test_split_manifest_round_trip(tmp_path, records):
    cfg = SplitConfig(p=0.5, seed=8)
    bundle = build_bundle(records, cfg)
    path = save_split_manifest(bundle, cfg, tmp_path / 'split_manifest.json', ['All.csv'], len(records))
    manifest = load_split_manifest(path)
    assert manifest['sources'] == ['All.csv']
    rebuilt = materialize(manifest, records)
    assert rebuilt.train == bundle.train
    assert rebuilt.validation == bundle.validation
    assert rebuilt.test == bundle.test
    with pytest.raises(DatasetError):
        materialize(manifest, records[:-1])


def test_export_bundle_round_trip(tmp_path, records):
    bundle = build_bundle(records, SplitConfig(p=0.5, seed=1))
    written = export_bundle(bundle, tmp_path)
    for name in ('train', 'validation', 'test'):
        loaded = load_capture_path(written[name])
        assert Counter(loaded) == Counter(bundle.part(name))


def test_same_seed_same_bundle(records):
    a = build_bundle(records, SplitConfig(p=0.5, seed=11))
    b = build_bundle(records, SplitConfig(p=0.5, seed=11))
    assert a.indices == b.indices
    np.testing.assert_array_equal(a.indices['test'], sorted(a.indices['test']))
