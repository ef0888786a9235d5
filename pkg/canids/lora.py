"""
Low-rank adaptation of Linear layers.

Purpose: Freeze a trained classifier and fine-tune rank-r factors next to selected Linear
layers: y = W0 x + (alpha / r) U (V dropout(x)). Adapters can be merged back into W0 for
deployment, saved on their own against a base checkpoint, and counted for trainable-parameter
reporting.

Key decisions:
- U (m x r) starts at zero and V (r x n) at N(0, init_std), so a freshly adapted model
  reproduces its base outputs exactly
- Targets are fnmatch patterns over Linear names (defaults: attention projections and FFN
  layers); the classifier head stays trainable and is never adapted by default
- Every non-adapter, non-head tensor is frozen on attach
"""
from __future__ import annotations

import fnmatch
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from canids import nn_core
from canids.checkpoint import (
    CheckpointFormatError,
    KIND_ADAPTERS,
    assign_tensors,
    read_container,
    write_container,
)
from canids.config import LoraConfig
from canids.model import ForwardContext, Linear, Parameter, TransformerModel

logger = logging.getLogger(__name__)


class LoraError(Exception):
    """Base exception for adapter errors."""
    pass


class AdapterTargetError(LoraError):
    """Target patterns select no Linear layer."""
    pass


class AdapterRankError(LoraError):
    """Rank exceeds min(in, out) of a selected layer."""
    pass


class AlreadyAdaptedError(LoraError):
    pass


class AdapterBaseMismatchError(LoraError):
    """Adapter file was trained on a different base checkpoint."""
    pass


class LoraAdapter:
    """Additive low-rank branch for one Linear layer."""

    def __init__(self, layer: str, d_in: int, d_out: int, r: int, alpha: float, dropout: float,
                 rng: np.random.Generator, init_std: float = 0.02):
        if r > min(d_in, d_out):
            raise AdapterRankError(f'{layer}: rank {r} exceeds min({d_out}, {d_in})')
        self.layer = layer
        self.r = r
        self.alpha = float(alpha)
        self.dropout = float(dropout)
        self.U = Parameter(f'{layer}.lora_U', np.zeros((d_out, r)))
        self.V = Parameter(f'{layer}.lora_V', rng.normal(0.0, init_std, size=(r, d_in)))

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def parameters(self) -> Iterator[Parameter]:
        yield self.U
        yield self.V

    def describe(self) -> Dict[str, object]:
        return {'layer': self.layer, 'r': self.r, 'alpha': self.alpha, 'dropout': self.dropout}

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.U.value @ self.V.value)

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        xd, cd = nn_core.dropout(x, self.dropout, ctx.rng, ctx.train)
        t = xd @ self.V.value.T
        return self.scale * (t @ self.U.value.T), (xd, cd, t)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        xd, cd, t = cache
        g = dy * self.scale
        r = self.r
        self.U.accumulate(g.reshape(-1, g.shape[-1]).T @ t.reshape(-1, r))
        dt = g @ self.U.value
        self.V.accumulate(dt.reshape(-1, r).T @ xd.reshape(-1, xd.shape[-1]))
        return nn_core.dropout_backward(dt @ self.V.value, cd)


def adapter_forward(layer: Linear, x: np.ndarray, train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, tuple]:
    """Forward through an adapted Linear layer: W0 x (+ b) + (alpha/r) U V dropout(x)."""
    if layer.adapter is None:
        raise LoraError(f'{layer.name} has no adapter')
    return layer.forward(x, ForwardContext(train=train_mode, rng=rng))


def select_layers(model: TransformerModel, targets: Sequence[str]) -> List[Linear]:
    layers = [lin for name, lin in model.linears().items()
              if any(fnmatch.fnmatchcase(name, pattern) for pattern in targets)]
    if not layers:
        raise AdapterTargetError(f'patterns {list(targets)} select no Linear layer')
    return layers


def is_adapted(model: TransformerModel) -> bool:
    return any(lin.adapter is not None for lin in model.linears().values())


def _freeze_base(model: TransformerModel) -> None:
    head = {p.name for p in model.head.parameters()}
    for p in model.parameters():
        if '.lora_' not in p.name and p.name not in head:
            p.frozen = True
            p.zero_grad()


def attach_adapters(model: TransformerModel, targets: Optional[Sequence[str]] = None, r: int = 16,
                    alpha: float = 64.0, dropout: float = 0.1, seed: int = 0,
                    init_std: float = 0.02) -> TransformerModel:
    """Attach adapters in place and freeze the base; returns the same model.

    Raises:
        AlreadyAdaptedError: The model already carries adapters
        AdapterTargetError: No layer matches
        AdapterRankError: r > min(m, n) for a selected layer
    """
    if is_adapted(model):
        raise AlreadyAdaptedError('model already carries adapters')
    layers = select_layers(model, targets or LoraConfig().targets)
    for lin in layers:
        if r > min(lin.d_in, lin.d_out):
            raise AdapterRankError(f'{lin.name}: rank {r} exceeds min({lin.d_out}, {lin.d_in})')
    rng = np.random.default_rng(seed)
    for lin in layers:
        lin.adapter = LoraAdapter(lin.name, lin.d_in, lin.d_out, r, alpha, dropout, rng, init_std)
    _freeze_base(model)
    trainable, total, fraction = count_trainable(model)
    logger.info(f'Attached {len(layers)} adapters (r={r}, alpha={alpha}): '
                f'{trainable}/{total} trainable ({fraction:.2%})')
    return model


def attach_from_config(model: TransformerModel, cfg: LoraConfig) -> TransformerModel:
    return attach_adapters(model, cfg.targets, cfg.r, cfg.alpha, cfg.dropout, cfg.seed, cfg.init_std)


def attach_from_descriptions(model: TransformerModel, descriptions: Sequence[Dict[str, object]]) -> None:
    """Recreate adapters recorded in a checkpoint header (values are assigned afterwards)."""
    layers = model.linears()
    rng = np.random.default_rng(0)
    for desc in descriptions:
        name = str(desc['layer'])
        if name not in layers:
            raise AdapterTargetError(f'checkpoint adapter for unknown layer {name}')
        lin = layers[name]
        lin.adapter = LoraAdapter(name, lin.d_in, lin.d_out, int(desc['r']), float(desc['alpha']),
                                  float(desc['dropout']), rng)


def merge_adapters(model: TransformerModel) -> TransformerModel:
    """Fold every adapter into its base weight, remove adapters and unfreeze the model."""
    merged = 0
    for lin in model.linears().values():
        if lin.adapter is not None:
            lin.weight.value = lin.weight.value + lin.adapter.delta_weight()
            lin.adapter = None
            merged += 1
    for p in model.parameters():
        p.frozen = False
    logger.info(f'Merged {merged} adapters into base weights')
    return model


def count_trainable(model: TransformerModel) -> Tuple[int, int, float]:
    """(trainable, total, trainable / total) over every parameter tensor."""
    total = trainable = 0
    for p in model.parameters():
        total += p.size
        if not p.frozen:
            trainable += p.size
    return trainable, total, trainable / total if total else 0.0


def adapter_parameter_count(shapes: Sequence[Tuple[int, int]], r: int) -> int:
    """Closed form sum of r * (m + n) over adapted (m, n) layers."""
    return sum(r * (m + n) for m, n in shapes)


def save_adapters(model: TransformerModel, path: Union[str, Path], base_digest: str) -> str:
    """Write adapter factors plus every other trainable tensor (the head) against a base digest."""
    descriptions = [lin.adapter.describe() for _, lin in sorted(model.linears().items())
                    if lin.adapter is not None]
    if not descriptions:
        raise LoraError('model carries no adapters')
    tensors = [(p.name, p.value, {'frozen': p.frozen, 'decay': p.decay})
               for p in model.parameters() if not p.frozen]
    header = {'kind': KIND_ADAPTERS, 'base_digest': base_digest, 'adapters': descriptions}
    digest = write_container(path, header, tensors)
    logger.info(f'Saved {len(descriptions)} adapters to {path}')
    return digest


def load_adapters(model: TransformerModel, path: Union[str, Path], base_digest: str) -> TransformerModel:
    """Attach and fill adapters from an adapter file onto the matching base model.

    Raises:
        AdapterBaseMismatchError: The file was saved against another base checkpoint
    """
    header, tensors, _ = read_container(path)
    if header.get('kind') != KIND_ADAPTERS:
        raise CheckpointFormatError(f'{path}: expected an adapter file, got {header.get("kind")!r}')
    if header['base_digest'] != base_digest:
        raise AdapterBaseMismatchError(
            f"adapters were trained on base {header['base_digest'][:12]}, not {base_digest[:12]}"
        )
    if is_adapted(model):
        raise AlreadyAdaptedError('model already carries adapters')
    attach_from_descriptions(model, header['adapters'])
    _freeze_base(model)
    assign_tensors(model, tensors, header['tensors'], strict=False)
    return model
