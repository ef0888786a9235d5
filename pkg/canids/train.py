"""
Loss, AdamW and the epoch-driven training loop.

Purpose: Train a TransformerModel on a DatasetBundle with cross-entropy, AdamW (decoupled
weight decay) and gradient accumulation, validating each epoch in eval mode and keeping the
weights of the best validation epoch.

Key decisions:
- Loss is computed from logits with log-sum-exp; it equals -log P_true of the softmax output
- One optimizer step per ``accumulation`` micro-batches; each micro-batch gradient is its mean
  gradient divided by the number of micro-batches in the group, so a trailing partial group is
  still an average
- AdamW step counter advances once per optimizer step; frozen tensors are skipped; weight decay
  only touches tensors flagged ``decay`` (not biases, norm gains or embeddings)
- Best epoch = highest validation BA, ties go to the later epoch
- Batch order depends on (seed, epoch); dropout draws from its own (seed, epoch) stream
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from canids import nn_core
from canids.config import TrainConfig
from canids.dataset import DatasetBundle, make_batches
from canids.metrics import MetricsReport, compute_metrics, confusion_matrix
from canids.model import Parameter, TransformerModel
from ingest.can_log import LabeledRecord

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'ba', 'prec', 'dr', 'f1']


class TrainingError(Exception):
    """Base exception for training errors."""
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, message: str, batch_index: int):
        self.batch_index = batch_index
        super().__init__(message)


class OptimizerError(Exception):
    """Base exception for optimizer errors."""
    pass


class NonFiniteGradientError(OptimizerError):
    pass


def cross_entropy(probabilities: np.ndarray, true_class: int) -> float:
    """-log P_true for one probability vector."""
    p = float(probabilities[true_class])
    return -math.log(p) if p > 0 else math.inf


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, d(mean loss)/d(logits) and per-sample losses for (N, C) logits."""
    logp = nn_core.log_softmax(logits)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= len(labels)
    return float(losses.mean()), dlogits, losses


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> 'OptimizerState':
        return cls(lr=cfg.learning_rate, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)


def adamw_step(state: OptimizerState, params: Sequence[Parameter]) -> None:
    """Apply one AdamW update from each parameter's accumulated grad.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta

    Raises:
        NonFiniteGradientError: Any trainable gradient is NaN/Inf; no parameter is touched
    """
    trainable = [p for p in params if not p.frozen]
    for p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f'non-finite gradient in {p.name}')
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in trainable:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.decay and state.weight_decay:
            update = update + state.lr * state.weight_decay * p.value
        p.value -= update


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    ba: List[float] = field(default_factory=list)
    prec: List[float] = field(default_factory=list)
    dr: List[float] = field(default_factory=list)
    f1: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def record(self, train_loss: float, val_loss: float, report: MetricsReport) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.ba.append(report.ba)
        self.prec.append(report.prec)
        self.dr.append(report.dr)
        self.f1.append(report.f1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, len(self) + 1),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'ba': self.ba,
            'prec': self.prec,
            'dr': self.dr,
            'f1': self.f1,
        }, columns=HISTORY_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out, index=False, float_format='%.12g', lineterminator='\n')
        return out

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> 'TrainHistory':
        frame = pd.read_csv(path)
        return cls(**{col: frame[col].astype(float).tolist() for col in HISTORY_COLUMNS[1:]})


@dataclass
class TrainResult:
    history: TrainHistory
    best_epoch: int
    best_ba: float
    best_report: Optional[MetricsReport] = None
    elapsed_seconds: float = 0.0


def evaluate(model: TransformerModel, records: Sequence[LabeledRecord],
             batch_size: int = 32) -> Tuple[float, MetricsReport]:
    """Eval-mode mean loss and metrics over records; parameters are not touched."""
    if not records:
        raise TrainingError('cannot evaluate on an empty record list')
    losses: List[np.ndarray] = []
    preds: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for start in range(0, len(records), batch_size):
        batch = model.tokenizer.encode_batch(records[start:start + batch_size])
        logits, _ = model.logits(batch, train=False)
        _, _, per_sample = cross_entropy_from_logits(logits, batch.labels)
        losses.append(per_sample)
        preds.append(np.argmax(logits, axis=1))
        labels.append(batch.labels)
    report = compute_metrics(confusion_matrix(np.concatenate(preds), np.concatenate(labels),
                                              model.config.n_classes))
    return float(np.concatenate(losses).mean()), report


def train_step(model: TransformerModel, micro_batches: Sequence[Sequence[LabeledRecord]],
               state: OptimizerState, rng: Optional[np.random.Generator] = None,
               first_index: int = 0) -> List[float]:
    """Accumulate gradients over micro-batches, then take one optimizer step.

    Returns:
        Mean loss of each micro-batch

    Raises:
        NonFiniteLossError: With the global index of the offending micro-batch
    """
    model.zero_grad()
    group = len(micro_batches)
    losses = []
    for offset, records in enumerate(micro_batches):
        batch = model.tokenizer.encode_batch(records)
        logits, cache = model.logits(batch, train=True, rng=rng)
        loss, dlogits, _ = cross_entropy_from_logits(logits, batch.labels)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f'non-finite loss in batch {first_index + offset}',
                                     first_index + offset)
        model.backward(dlogits / group, cache)
        losses.append(loss)
    adamw_step(state, model.parameters())
    return losses


def _snapshot(model: TransformerModel) -> Dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in model.parameters()}


def _restore(model: TransformerModel, snapshot: Dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        p.value[...] = snapshot[p.name]


def train_run(model: TransformerModel, bundle: DatasetBundle, config: TrainConfig,
              restore_best: bool = True) -> TrainResult:
    """Train for config.epochs epochs and validate after each.

    Returns:
        TrainResult with one history row per epoch; the model holds the best epoch's weights
        when restore_best is set
    """
    if not bundle.train:
        raise TrainingError('training part is empty')
    if not bundle.validation:
        raise TrainingError('validation part is empty')
    state = OptimizerState.from_config(config)
    history = TrainHistory()
    best_epoch, best_ba, best_report, best_weights = 0, -1.0, None, None
    started = time.perf_counter()

    for epoch in range(config.epochs):
        epoch_started = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch, 1])
        batches = list(make_batches(bundle.train, config.batch_size, config.seed, epoch=epoch))
        epoch_losses: List[float] = []
        for first in range(0, len(batches), config.accumulation):
            group = batches[first:first + config.accumulation]
            epoch_losses.extend(train_step(model, group, state, rng, first))
        val_loss, report = evaluate(model, bundle.validation, config.eval_batch_size)
        train_loss = float(np.mean(epoch_losses))
        history.record(train_loss, val_loss, report)
        if report.ba >= best_ba:
            best_epoch, best_ba, best_report = epoch + 1, report.ba, report
            best_weights = _snapshot(model)
        logger.info(
            f'Epoch {epoch + 1}/{config.epochs}: train_loss={train_loss:.6f} val_loss={val_loss:.6f} '
            f'BA={report.ba:.6f} F1={report.f1:.6f} ({time.perf_counter() - epoch_started:.1f}s)'
        )

    elapsed = time.perf_counter() - started
    if restore_best and best_weights is not None:
        _restore(model, best_weights)
    logger.info(f'Training finished in {elapsed:.1f}s; best epoch {best_epoch} with BA={best_ba:.6f}')
    return TrainResult(history, best_epoch, best_ba, best_report, elapsed)
