"""
Confusion matrix and IDS evaluation metrics.

Purpose: Exact counting plus balanced accuracy, precision, detection rate, false alarm rate and
F1, overall and per class, in a report that serializes to JSON and an aligned text table.

Key decisions:
- Rows are true classes, columns predicted classes; per-class TP/FP/FN/TN by one-vs-rest
- BA and the macro PREC/DR/F1 average over classes that occur in the labels (row sum > 0);
  overall F1 is the harmonic mean of the overall PREC and DR. The report names those classes in
  ``averaged_over`` and also carries ``ba_all_classes``, the mean DR over every class with absent
  classes counted as 0
- Overall FAR reads only the Normal row: Normal records flagged as any attack / Normal records
- 0/0 is reported as 0 and listed in ``undefined`` (never NaN)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ingest.can_log import AttackClass

logger = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = tuple(cls.display_name for cls in AttackClass)
NORMAL_INDEX = int(AttackClass.NORMAL)


class MetricsError(Exception):
    """Base exception for metric errors."""
    pass


class LengthMismatchError(MetricsError):
    pass


class ClassIndexError(MetricsError):
    pass


class EmptyMatrixError(MetricsError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).astype(np.int64)

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fn() - self.fp()

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], n_classes: int = len(AttackClass),
                     class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Count (true, predicted) pairs.

    Raises:
        LengthMismatchError: predictions and labels differ in length
        ClassIndexError: A value outside 0..n_classes-1
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise LengthMismatchError(f'{len(pred)} predictions vs {len(true)} labels')
    for name, values in (('prediction', pred), ('label', true)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise ClassIndexError(f'{name} outside 0..{n_classes - 1}')
    counts = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    names = tuple(class_names) if class_names is not None else DEFAULT_CLASS_NAMES[:n_classes]
    return ConfusionMatrix(counts.reshape(n_classes, n_classes).astype(np.int64), names)


def _ratio(num: int, den: int, what: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(what)
        return 0.0
    return num / den


@dataclass
class ClassRow:
    name: str
    instances: int
    prec: float
    dr: float
    far: float
    f1: float
    empty: bool = False

    def to_dict(self) -> Dict[str, object]:
        return {'name': self.name, 'instances': self.instances, 'prec': self.prec, 'dr': self.dr,
                'far': self.far, 'f1': self.f1, 'empty': self.empty}


@dataclass
class MetricsReport:
    ba: float
    prec: float
    dr: float
    far: float
    f1: float
    macro_f1: float
    instances: int
    per_class: List[ClassRow]
    confusion: List[List[int]]
    class_names: List[str]
    undefined: List[str] = field(default_factory=list)
    averaged_over: List[str] = field(default_factory=list)
    ba_all_classes: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {
            'ba': self.ba, 'prec': self.prec, 'dr': self.dr, 'far': self.far, 'f1': self.f1,
            'macro_f1': self.macro_f1, 'instances': self.instances,
            'per_class': [row.to_dict() for row in self.per_class],
            'confusion': self.confusion, 'class_names': self.class_names,
            'undefined': self.undefined,
            'averaged_over': self.averaged_over, 'ba_all_classes': self.ba_all_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n'

    def write_json(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.to_json(), encoding='utf-8')
        return out


def _class_rows(cm: ConfusionMatrix, undefined: List[str]) -> List[ClassRow]:
    tp, fp, fn, tn = cm.tp(), cm.fp(), cm.fn(), cm.tn()
    rows = []
    for i, name in enumerate(cm.class_names):
        empty = tp[i] + fn[i] == 0
        prec = _ratio(int(tp[i]), int(tp[i] + fp[i]), f'PREC({name})', undefined)
        dr = _ratio(int(tp[i]), int(tp[i] + fn[i]), f'DR({name})', undefined)
        far = _ratio(int(fp[i]), int(fp[i] + tn[i]), f'FAR({name})', undefined)
        f1 = 2 * prec * dr / (prec + dr) if prec + dr > 0 else 0.0
        rows.append(ClassRow(name, int(tp[i] + fn[i]), prec, dr, far, f1, bool(empty)))
    return rows


def per_class_report(cm: ConfusionMatrix) -> List[ClassRow]:
    """One row per class: instances, PREC, DR, FAR, F1 (0/0 reported as 0)."""
    return _class_rows(cm, [])


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Overall and per-class metrics for a confusion matrix.

    Raises:
        EmptyMatrixError: The matrix has no counts
    """
    if cm.total == 0:
        raise EmptyMatrixError('confusion matrix is empty')
    undefined: List[str] = []
    rows = _class_rows(cm, undefined)
    present = [row for row in rows if not row.empty]
    ba = float(np.mean([row.dr for row in present]))
    prec = float(np.mean([row.prec for row in present]))
    dr = ba
    f1 = 2 * prec * dr / (prec + dr) if prec + dr > 0 else 0.0
    macro_f1 = float(np.mean([row.f1 for row in present]))

    far = 0.0
    if cm.n_classes > NORMAL_INDEX:
        normal_row = cm.counts[NORMAL_INDEX]
        far = _ratio(int(normal_row.sum() - normal_row[NORMAL_INDEX]), int(normal_row.sum()),
                     'FAR(overall)', undefined)
    if undefined:
        logger.debug(f'Undefined ratios reported as 0: {undefined}')
    return MetricsReport(
        ba=ba, prec=prec, dr=dr, far=far, f1=f1, macro_f1=macro_f1,
        instances=cm.total,
        per_class=rows,
        confusion=cm.counts.tolist(),
        class_names=list(cm.class_names),
        undefined=undefined,
        averaged_over=[row.name for row in present],
        ba_all_classes=float(np.mean([row.dr for row in rows])),
    )


def evaluate_predictions(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    return compute_metrics(confusion_matrix(predictions, labels))


def _fmt(value: float) -> str:
    return f'{value:.6f}'


def format_report_table(report: MetricsReport) -> str:
    """Summary row (BA, PREC, DR, FAR, F1) followed by per-class rows, as aligned text."""
    summary = pd.DataFrame(
        [{'BA': report.ba, 'PREC': report.prec, 'DR': report.dr, 'FAR': report.far, 'F1': report.f1}],
        index=['overall'],
    )
    classes = pd.DataFrame(
        [{'Instances': row.instances, 'PREC': row.prec, 'DR': row.dr, 'FAR': row.far, 'F1': row.f1,
          'Note': 'empty class' if row.empty else ''} for row in report.per_class],
        index=[row.name for row in report.per_class],
    )
    return (summary.to_string(float_format=_fmt) + '\n\n'
            + classes.to_string(float_format=_fmt) + '\n')


def expected_false_alarms(far: float, volume: float) -> float:
    """Expected benign messages flagged for a traffic volume (e.g. messages per day)."""
    return far * volume
