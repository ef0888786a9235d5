"""
File-backed storage for labeled captures.

Purpose: Persist and reload capture directories laid out one CSV per class
(``Normal.csv``, ``DoS.csv``, ...) with an optional ``manifest.json`` of per-class counts.

Key decisions:
- The class of a file comes from its stem (class_from_name), so real dataset files such as
  ``DoS_dataset.csv`` or ``gear_dataset.csv`` load without renaming
- Directory reads are sorted by class index for deterministic ordering
- Writes are idempotent: re-running overwrites the same files with the same bytes
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

from ingest.can_log import (
    AttackClass,
    CanLogError,
    LabeledRecord,
    class_from_name,
    read_capture,
    write_capture,
)
from ingest.traffic_sim import CaptureManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class CaptureStoreError(CanLogError):
    """Raised when a capture directory is missing or ambiguous."""
    pass


def capture_filename(kind: AttackClass) -> str:
    return f"{kind.display_name}.csv"


def save_captures(captures: Dict[AttackClass, List[LabeledRecord]], out_dir: Union[str, Path],
                  manifest: Optional[CaptureManifest] = None) -> List[Path]:
    """Write one CSV per class and, if given, the manifest JSON.

    Returns:
        Paths written, in class order
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for kind in sorted(captures):
        path = out / capture_filename(kind)
        count = write_capture(captures[kind], path)
        logger.info(f"Wrote {count} records to {path}")
        written.append(path)
    if manifest is not None:
        written.append(write_manifest(manifest, out / MANIFEST_NAME))
    return written


def write_manifest(manifest: CaptureManifest, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(path: Union[str, Path]) -> CaptureManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return CaptureManifest.from_dict(json.load(fh))


def load_captures(in_dir: Union[str, Path]) -> Dict[AttackClass, List[LabeledRecord]]:
    """Load every ``*.csv`` in a directory, mapping file stems to classes.

    Raises:
        CaptureStoreError: If the directory is missing, empty, or two files map to one class
        RecordParseError: On a malformed line
    """
    root = Path(in_dir)
    if not root.is_dir():
        raise CaptureStoreError(f"Capture directory not found: {root}")
    captures: Dict[AttackClass, List[LabeledRecord]] = {}
    sources: Dict[AttackClass, Path] = {}
    for path in sorted(root.glob("*.csv")):
        kind = class_from_name(path.stem)
        if kind in captures:
            raise CaptureStoreError(f"Both {sources[kind].name} and {path.name} map to {kind.display_name}")
        captures[kind] = read_capture(path, kind)
        sources[kind] = path
        logger.info(f"Loaded {len(captures[kind])} records from {path.name} as {kind.display_name}")
    if not captures:
        raise CaptureStoreError(f"No .csv captures in {root}")
    return dict(sorted(captures.items()))


def load_capture_path(path: Union[str, Path], kind: Optional[AttackClass] = None) -> List[LabeledRecord]:
    """Load a capture directory (all classes, concatenated in class order) or a single CSV.

    For a single file the class is ``kind`` or, when omitted, inferred from the file stem.
    """
    target = Path(path)
    if target.is_dir():
        records: List[LabeledRecord] = []
        for part in load_captures(target).values():
            records.extend(part)
        return records
    if not target.exists():
        raise CaptureStoreError(f"Capture not found: {target}")
    return read_capture(target, kind if kind is not None else class_from_name(target.stem))
