"""
Dataset partitioning: stratified 70/30 split, balanced subsampling, batch iteration.

Purpose: Turn labeled captures into train / validation / test parts following the evaluation
protocol: the test part is split off the full data first and never subsampled; the remaining
pool is subsampled per class (attacks at p, Normal at p * normal_ratio) and then split again
into train and validation.

Key decisions:
- Everything works on record indices; record identity is the index into the input list, so
  leakage checks and manifests are exact
- Stratified split sizes per class are round-half-up(fraction * n); subsample sizes are exact
  floors computed with fractions.Fraction (no float drift at boundaries like 0.01 * 587521)
- Selected indices are returned in ascending order, so parts keep capture (time) order
- Seeds fan out through numpy SeedSequence: one stream per (stage, class) or (seed, epoch)
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from canids.config import SplitConfig
from ingest.can_log import AttackClass, LabeledRecord
from ingest.capture_store import save_captures

logger = logging.getLogger(__name__)

PARTS = ('train', 'validation', 'test')
MANIFEST_VERSION = 1

_OUTER, _SUBSAMPLE, _INNER = 0, 1, 2


class DatasetError(Exception):
    """Base exception for dataset errors."""
    pass


class SplitError(DatasetError):
    """Invalid split fraction or empty input."""
    pass


class SubsampleError(DatasetError):
    """Invalid subsample fraction, or a present class would lose every record."""
    pass


def _derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def labels_of(records: Sequence[LabeledRecord]) -> np.ndarray:
    return np.fromiter((int(r.label) for r in records), dtype=np.int64, count=len(records))


def class_counts(records: Sequence[LabeledRecord]) -> Dict[AttackClass, int]:
    """Per-class record counts, every class present as a key."""
    counts = np.bincount(labels_of(records), minlength=len(AttackClass))
    return {cls: int(counts[int(cls)]) for cls in AttackClass}


def stratified_split_indices(labels: np.ndarray, fraction: float, seed: int,
                             candidates: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class split of ``candidates`` (default: all positions) into two sorted index arrays."""
    if not 0.0 < fraction < 1.0:
        raise SplitError(f'fraction must be in (0, 1), got {fraction}')
    pool = np.arange(len(labels)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if len(pool) == 0:
        raise SplitError('cannot split an empty record list')
    part_a: List[np.ndarray] = []
    part_b: List[np.ndarray] = []
    for cls in np.unique(labels[pool]):
        members = pool[labels[pool] == cls]
        rng = np.random.default_rng(_derive_seed(seed, int(cls)))
        shuffled = rng.permutation(members)
        n_a = math.floor(fraction * len(members) + 0.5)
        part_a.append(shuffled[:n_a])
        part_b.append(shuffled[n_a:])
    return np.sort(np.concatenate(part_a)), np.sort(np.concatenate(part_b))


def stratified_split(records: Sequence[LabeledRecord], fraction: float,
                     seed: int) -> Tuple[List[LabeledRecord], List[LabeledRecord]]:
    """Split records per class into (part_a, part_b) with |part_a| = round(fraction * n_class).

    Raises:
        SplitError: If fraction is outside (0, 1) or records is empty
    """
    idx_a, idx_b = stratified_split_indices(labels_of(records), fraction, seed)
    return [records[i] for i in idx_a], [records[i] for i in idx_b]


def subsample_sizes(counts: Dict[int, int], p: float, normal_ratio: float = 0.1) -> Dict[int, int]:
    """floor(p * n) per attack class, floor(p * normal_ratio * n) for Normal."""
    if not 0.0 < p <= 1.0:
        raise SubsampleError(f'p must be in (0, 1], got {p}')
    p_exact = Fraction(str(float(p)))
    normal_exact = p_exact * Fraction(str(float(normal_ratio)))
    sizes: Dict[int, int] = {}
    for cls, n in counts.items():
        share = normal_exact if cls == int(AttackClass.NORMAL) else p_exact
        keep = math.floor(share * n)
        if n > 0 and keep == 0:
            raise SubsampleError(
                f'p={p} keeps no {AttackClass(cls).display_name} records out of {n}'
            )
        sizes[cls] = keep
    return sizes


def balanced_subsample_indices(labels: np.ndarray, p: float, seed: int, normal_ratio: float = 0.1,
                               candidates: Optional[np.ndarray] = None) -> np.ndarray:
    pool = np.arange(len(labels)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    present = {int(cls): int(np.sum(labels[pool] == cls)) for cls in np.unique(labels[pool])}
    sizes = subsample_sizes(present, p, normal_ratio)
    chosen: List[np.ndarray] = [np.empty(0, dtype=np.int64)]
    for cls, keep in sizes.items():
        members = pool[labels[pool] == cls]
        rng = np.random.default_rng(_derive_seed(seed, cls))
        chosen.append(rng.choice(members, size=keep, replace=False))
    return np.sort(np.concatenate(chosen))


def balanced_subsample(records: Sequence[LabeledRecord], p: float, seed: int,
                       normal_ratio: float = 0.1) -> List[LabeledRecord]:
    """Sample without replacement: floor(p * n) per attack class and floor(p/10 * n) Normal.

    Raises:
        SubsampleError: If p is outside (0, 1] or a present class would get zero records
    """
    chosen = balanced_subsample_indices(labels_of(records), p, seed, normal_ratio)
    return [records[i] for i in chosen]


def make_batches(records: Sequence[LabeledRecord], batch_size: int, seed: int,
                 drop_last: bool = False, epoch: int = 0) -> Iterator[List[LabeledRecord]]:
    """Yield shuffled batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DatasetError(f'batch_size must be >= 1, got {batch_size}')
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    for start in range(0, stop, batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def batch_count(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


@dataclass
class DatasetBundle:
    """Train / validation / test parts plus the source indices they came from."""

    train: List[LabeledRecord]
    validation: List[LabeledRecord]
    test: List[LabeledRecord]
    indices: Dict[str, List[int]] = field(default_factory=dict)

    def part(self, name: str) -> List[LabeledRecord]:
        if name not in PARTS:
            raise DatasetError(f'unknown part {name!r}')
        return getattr(self, name)

    def counts(self) -> Dict[str, Dict[AttackClass, int]]:
        return {name: class_counts(self.part(name)) for name in PARTS}

    def log_summary(self) -> None:
        for name, counts in self.counts().items():
            text = ', '.join(f'{cls.display_name}={n}' for cls, n in counts.items())
            logger.info(f'{name}: {sum(counts.values())} records ({text})')


def _bundle_from_indices(records: Sequence[LabeledRecord], indices: Dict[str, np.ndarray]) -> DatasetBundle:
    return DatasetBundle(
        train=[records[i] for i in indices['train']],
        validation=[records[i] for i in indices['validation']],
        test=[records[i] for i in indices['test']],
        indices={name: [int(i) for i in idx] for name, idx in indices.items()},
    )


def build_bundle(records: Sequence[LabeledRecord], cfg: SplitConfig) -> DatasetBundle:
    """Partition records per the configured protocol.

    Default order: outer split (test reserved), subsample the train pool, inner split into
    train/validation. With ``subsample_first`` the whole input is subsampled before splitting.
    """
    labels = labels_of(records)
    if cfg.subsample_first:
        subset = balanced_subsample_indices(labels, cfg.p, _derive_seed(cfg.seed, _SUBSAMPLE),
                                            cfg.normal_ratio)
        pool, test = stratified_split_indices(labels, cfg.train_fraction,
                                              _derive_seed(cfg.seed, _OUTER), subset)
    else:
        full_pool, test = stratified_split_indices(labels, cfg.train_fraction,
                                                   _derive_seed(cfg.seed, _OUTER))
        pool = balanced_subsample_indices(labels, cfg.p, _derive_seed(cfg.seed, _SUBSAMPLE),
                                          cfg.normal_ratio, full_pool)
    train, validation = stratified_split_indices(labels, cfg.inner_train_fraction,
                                                 _derive_seed(cfg.seed, _INNER), pool)
    bundle = _bundle_from_indices(records, {'train': train, 'validation': validation, 'test': test})
    bundle.log_summary()
    return bundle


def save_split_manifest(bundle: DatasetBundle, cfg: SplitConfig, path: Union[str, Path],
                        sources: Sequence[str], n_records: int) -> Path:
    """Persist the split as JSON: config, source files, record count and per-part indices."""
    payload = {
        'version': MANIFEST_VERSION,
        'config': cfg.model_dump(),
        'sources': list(sources),
        'n_records': n_records,
        'indices': {name: bundle.indices.get(name, []) for name in PARTS},
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f'Wrote split manifest to {out}')
    return out


def load_split_manifest(path: Union[str, Path]) -> Dict[str, object]:
    with open(path, 'r', encoding='utf-8') as fh:
        payload = json.load(fh)
    if payload.get('version') != MANIFEST_VERSION:
        raise DatasetError(f'unsupported split manifest version {payload.get("version")!r}')
    return payload


def materialize(manifest: Dict[str, object], records: Sequence[LabeledRecord]) -> DatasetBundle:
    """Rebuild a bundle from a saved manifest and the same source records."""
    if manifest['n_records'] != len(records):
        raise DatasetError(
            f'manifest was built from {manifest["n_records"]} records, got {len(records)}'
        )
    indices = {name: np.asarray(manifest['indices'][name], dtype=np.int64) for name in PARTS}
    return _bundle_from_indices(records, indices)


def export_bundle(bundle: DatasetBundle, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write ``<out_dir>/<part>/<Class>.csv``, one file per label present in the part."""
    root = Path(out_dir)
    written: Dict[str, Path] = {}
    for name in PARTS:
        grouped: Dict[AttackClass, List[LabeledRecord]] = {}
        for rec in bundle.part(name):
            grouped.setdefault(rec.label, []).append(rec)
        save_captures(grouped, root / name)
        written[name] = root / name
    return written
