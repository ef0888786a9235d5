"""
Versioned binary checkpoints.

Purpose: Persist models (and adapter-only deltas) so that a reload predicts bit-identically.

Key decisions:
- Container: magic, u32 format version, u32 header length, sorted-key JSON header, raw
  little-endian float64 tensors, trailing SHA-256 of everything before it
- The trailing digest doubles as the checkpoint id that adapter files point back to
- The header embeds the model config, text settings, vocab tokens, version and hash; loading
  refuses a vocab version or hash other than the expected one
- Writes are byte-deterministic for identical models

Layout details live in docs/checkpoint_format.md.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from canids.config import ModelConfig, TextConfig
from canids.model import ModelError, TransformerModel
from canids.textify import VOCAB_VERSION, Vocab

logger = logging.getLogger(__name__)

MAGIC = b'CANIDSCK'
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<8sII')
_DIGEST_LEN = 32
_DTYPE = np.dtype('<f8')

KIND_MODEL = 'model'
KIND_ADAPTERS = 'adapters'


class CheckpointError(ModelError):
    """Base exception for checkpoint errors."""
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint, or the content digest does not match."""
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCompatibilityError(CheckpointError):
    """Vocab, config or tensor layout does not match what the caller expects."""
    pass


def write_container(path: Union[str, Path], header: Dict[str, object],
                    tensors: Sequence[Tuple[str, np.ndarray, Dict[str, object]]]) -> str:
    """Write header + tensors; returns the hex digest.

    Each tensor entry is (name, array, extra header fields).
    """
    entries: List[Dict[str, object]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, array, extra in tensors:
        data = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset, **extra})
        chunks.append(data)
        offset += len(data)
    full_header = dict(header, tensors=entries, payload_bytes=offset)
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b''.join(chunks)
    digest = hashlib.sha256(body).digest()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(body + digest)
    logger.debug(f'Wrote checkpoint {out} ({len(body) + _DIGEST_LEN} bytes)')
    return digest.hex()


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, object], Dict[str, np.ndarray], str]:
    """Read and verify a container: (header, tensors by name, hex digest).

    Raises:
        CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError
    """
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f'{path}: file too short for a checkpoint header')
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f'{path}: not a checkpoint (bad magic)')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f'{path}: format version {version}, expected {FORMAT_VERSION}')
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise CheckpointTruncatedError(f'{path}: header truncated')
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f'{path}: unreadable header: {exc}') from exc
    try:
        expected = header_end + int(header['payload_bytes']) + _DIGEST_LEN
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f'{path}: header has no valid payload size: {exc!r}') from exc
    if len(blob) < expected:
        raise CheckpointTruncatedError(f'{path}: {len(blob)} bytes, expected {expected}')
    if len(blob) > expected:
        raise CheckpointFormatError(f'{path}: {len(blob) - expected} trailing bytes')
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError(f'{path}: content digest mismatch')

    tensors: Dict[str, np.ndarray] = {}
    try:
        for entry in header['tensors']:
            shape = tuple(entry['shape'])
            count = int(np.prod(shape, dtype=np.int64))
            start = header_end + int(entry['offset'])
            data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start)
            tensors[entry['name']] = data.reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f'{path}: malformed tensor table: {exc!r}') from exc
    return header, tensors, digest.hex()


def _vocab_header(vocab: Vocab) -> Dict[str, object]:
    return {'version': vocab.version, 'hash': vocab.hash, 'tokens': list(vocab.tokens)}


def _adapter_header(model: TransformerModel) -> List[Dict[str, object]]:
    adapters = []
    for name, lin in sorted(model.linears().items()):
        if lin.adapter is not None:
            adapters.append(lin.adapter.describe())
    return adapters


def save_checkpoint(model: TransformerModel, path: Union[str, Path]) -> str:
    """Write the whole model (adapters included); returns the checkpoint digest."""
    header = {
        'kind': KIND_MODEL,
        'model_config': model.config.model_dump(),
        'text_config': model.text_cfg.model_dump(),
        'vocab': _vocab_header(model.vocab),
        'adapters': _adapter_header(model),
    }
    tensors = [
        (p.name, p.value, {'frozen': p.frozen, 'decay': p.decay})
        for p in model.parameters()
    ]
    digest = write_container(path, header, tensors)
    logger.info(f'Saved checkpoint {path} ({digest[:12]})')
    return digest


def _check_vocab(header: Dict[str, object], vocab: Optional[Vocab], expected_version: str) -> Vocab:
    info = header['vocab']
    embedded = Vocab(info['tokens'], info['version'])
    if embedded.hash != info['hash']:
        raise CheckpointCompatibilityError('embedded vocabulary does not match its recorded hash')
    if info['version'] != expected_version:
        raise CheckpointCompatibilityError(
            f"vocab version {info['version']!r} is not the expected {expected_version!r}"
        )
    if vocab is not None and vocab.hash != info['hash']:
        raise CheckpointCompatibilityError('checkpoint vocabulary differs from the supplied vocabulary')
    return embedded


def assign_tensors(model: TransformerModel, tensors: Dict[str, np.ndarray],
                   entries: Sequence[Dict[str, object]], strict: bool = True) -> None:
    """Copy tensor values (and frozen flags) into a model by parameter name."""
    params = model.named_parameters()
    if strict and set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointCompatibilityError(f'tensor layout mismatch: missing={missing[:3]} extra={extra[:3]}')
    flags = {e['name']: e for e in entries}
    for name, value in tensors.items():
        if name not in params:
            raise CheckpointCompatibilityError(f'unknown tensor {name}')
        param = params[name]
        if param.value.shape != value.shape:
            raise CheckpointCompatibilityError(f'{name}: shape {value.shape} != {param.value.shape}')
        param.value[...] = value
        param.frozen = bool(flags.get(name, {}).get('frozen', param.frozen))


def load_checkpoint(path: Union[str, Path], vocab: Optional[Vocab] = None,
                    expected_vocab_version: str = VOCAB_VERSION) -> TransformerModel:
    """Rebuild a model from a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: Any format, version, truncation or compatibility failure
    """
    from canids.lora import attach_from_descriptions

    header, tensors, digest = read_container(path)
    if header.get('kind') != KIND_MODEL:
        raise CheckpointFormatError(f'{path}: expected a model checkpoint, got {header.get("kind")!r}')
    embedded_vocab = _check_vocab(header, vocab, expected_vocab_version)
    try:
        config = ModelConfig(**header['model_config'])
        text_cfg = TextConfig(**header['text_config'])
    except ValueError as exc:
        raise CheckpointCompatibilityError(f'{path}: invalid embedded config: {exc}') from exc
    model = TransformerModel(config, embedded_vocab, text_cfg)
    if header.get('adapters'):
        attach_from_descriptions(model, header['adapters'])
    assign_tensors(model, tensors, header['tensors'])
    model.checkpoint_digest = digest
    logger.info(f'Loaded {config.arch} checkpoint {path} ({digest[:12]})')
    return model


def checkpoint_digest(path: Union[str, Path]) -> str:
    """Hex digest of a verified checkpoint file."""
    return read_container(path)[2]


def read_header(path: Union[str, Path]) -> Dict[str, object]:
    return read_container(path)[0]
