"""
Frame serialization and tokenization.

Purpose: Render a CAN frame as canonical text (``ID 3 1 6 DLC 2 D 0 5 2 1``) and map it onto
fixed-length token id sequences for the encoder ([CLS] ... [SEP]) or decoder ([BOS] ... [EOS])
classifier.

Key decisions:
- Closed nibble-level vocabulary; every token of a serialized frame is in it, so unknown tokens
  are an error rather than [UNK]
- [PAD] is id 0; the attention mask is a prefix of ones
- Encoder pooling index is 0 ([CLS]); decoder pooling index is the [EOS] position
- Timestamp text (``TS 0 . 0 0 0 4 0 0 |``) is off by default; the DLC field is on by default
- Vocab files carry a version header and are hashed (SHA-256) into checkpoints
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from canids.config import TextConfig
from ingest.can_log import CanFrame, LabeledRecord, format_timestamp

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, BOS, EOS = '[PAD]', '[UNK]', '[CLS]', '[SEP]', '[BOS]', '[EOS]'
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, BOS, EOS)
STRUCTURAL_TOKENS = ('ID', 'DLC', 'D', '|', 'TS', '.')
NIBBLE_TOKENS = tuple('0123456789abcdef')

VOCAB_VERSION = 'canids-nibble-v1'
ARCHS = ('encoder', 'decoder')
DEFAULT_MAX_LEN = 48


class TokenizerError(Exception):
    """Base exception for tokenizer errors."""
    pass


class UnknownTokenError(TokenizerError):
    pass


class UnknownTokenIdError(TokenizerError):
    pass


class SequenceTooLongError(TokenizerError):
    pass


class VocabFormatError(TokenizerError):
    pass


class Vocab:
    """Immutable bijection between token strings and dense ids."""

    def __init__(self, tokens: Sequence[str], version: str = VOCAB_VERSION):
        if not tokens or tokens[0] != PAD:
            raise VocabFormatError('[PAD] must be token id 0')
        if len(set(tokens)) != len(tokens):
            raise VocabFormatError('duplicate tokens in vocabulary')
        self._tokens: Tuple[str, ...] = tuple(tokens)
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(self._tokens)}
        self.version = version

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens and self.version == other.version

    def __hash__(self) -> int:
        return hash((self._tokens, self.version))

    @property
    def tokens(self) -> Tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownTokenError(f'token {token!r} not in vocabulary') from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise UnknownTokenIdError(f'token id {token_id} outside 0..{len(self._tokens) - 1}')
        return self._tokens[token_id]

    @property
    def special_ids(self) -> frozenset:
        return frozenset(self._ids[t] for t in SPECIAL_TOKENS if t in self._ids)

    def to_text(self) -> str:
        lines = [f'#version={self.version}']
        lines.extend(f'{tok}\t{i}' for i, tok in enumerate(self._tokens))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'Vocab':
        lines = text.splitlines()
        if not lines or not lines[0].startswith('#version='):
            raise VocabFormatError('vocab file must start with #version=<tag>')
        version = lines[0][len('#version='):].strip()
        tokens: List[str] = []
        for n, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[1].isdigit():
                raise VocabFormatError(f'line {n}: expected token<TAB>id')
            if int(parts[1]) != len(tokens):
                raise VocabFormatError(f'line {n}: ids must be dense and ordered, got {parts[1]}')
            tokens.append(parts[0])
        return cls(tokens, version)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.to_text(), encoding='utf-8', newline='\n')
        return out

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocab':
        return cls.from_text(Path(path).read_text(encoding='utf-8'))


def default_vocab() -> Vocab:
    return Vocab(SPECIAL_TOKENS + STRUCTURAL_TOKENS + NIBBLE_TOKENS)


DEFAULT_VOCAB = default_vocab()


def serialize_frame(frame: CanFrame, text_cfg: Optional[TextConfig] = None) -> str:
    """Canonical text for a frame: ``ID h h h DLC d D b b ...`` (two nibbles per byte)."""
    cfg = text_cfg or TextConfig()
    parts: List[str] = []
    if cfg.include_timestamp:
        parts.append('TS')
        parts.extend(format_timestamp(frame.timestamp_us))
        parts.append('|')
    parts.append('ID')
    parts.extend(f'{frame.can_id:03x}')
    if cfg.include_dlc:
        parts.append('DLC')
        parts.append(str(frame.dlc))
    parts.append('D')
    parts.extend(''.join(f'{b:02x}' for b in frame.data))
    return ' '.join(parts)


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    mask: Tuple[int, ...]
    pool_index: int

    @property
    def length(self) -> int:
        """Number of real (unmasked) positions."""
        return sum(self.mask)


@dataclass
class TokenBatch:
    """Stacked sequences: ids and mask are (B, max_len), pool_index and labels are (B,)."""

    ids: np.ndarray
    mask: np.ndarray
    pool_index: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @classmethod
    def stack(cls, seqs: Sequence[TokenSequence], labels: Sequence[int], max_len: int) -> 'TokenBatch':
        if not seqs:
            empty = np.zeros((0, max_len), dtype=np.int64)
            return cls(empty, empty.astype(bool), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        return cls(
            ids=np.array([s.ids for s in seqs], dtype=np.int64),
            mask=np.array([s.mask for s in seqs], dtype=bool),
            pool_index=np.array([s.pool_index for s in seqs], dtype=np.int64),
            labels=np.asarray(labels, dtype=np.int64),
        )


def _check_arch(arch: str) -> None:
    if arch not in ARCHS:
        raise TokenizerError(f'arch must be one of {ARCHS}, got {arch!r}')


def tokenize(text: str, arch: str, max_len: int = DEFAULT_MAX_LEN,
             vocab: Vocab = DEFAULT_VOCAB) -> TokenSequence:
    """Wrap serialized text in architecture specials and pad to max_len.

    Raises:
        UnknownTokenError: A token outside the vocabulary
        SequenceTooLongError: Text plus the two specials exceeds max_len
    """
    _check_arch(arch)
    body = [vocab.id_of(tok) for tok in text.split()]
    start, end = (CLS, SEP) if arch == 'encoder' else (BOS, EOS)
    ids = [vocab.id_of(start)] + body + [vocab.id_of(end)]
    if len(ids) > max_len:
        raise SequenceTooLongError(f'{len(ids)} tokens do not fit max_len={max_len}')
    n_real = len(ids)
    pad_id = vocab.id_of(PAD)
    ids.extend([pad_id] * (max_len - n_real))
    mask = [1] * n_real + [0] * (max_len - n_real)
    pool_index = 0 if arch == 'encoder' else n_real - 1
    return TokenSequence(tuple(ids), tuple(mask), pool_index)


def detokenize(seq: TokenSequence, vocab: Vocab = DEFAULT_VOCAB) -> str:
    """Inverse of tokenize, dropping special tokens and padding.

    Raises:
        UnknownTokenIdError: An id outside the vocabulary
    """
    skip = {vocab.id_of(t) for t in (PAD, CLS, SEP, BOS, EOS)}
    words = []
    for token_id in seq.ids:
        token = vocab.token_of(int(token_id))
        if token_id not in skip:
            words.append(token)
    return ' '.join(words)


class FrameTokenizer:
    """Serialize + tokenize with a fixed vocab, text settings, arch and max_len."""

    def __init__(self, arch: str, max_len: int = DEFAULT_MAX_LEN, vocab: Vocab = DEFAULT_VOCAB,
                 text_cfg: Optional[TextConfig] = None):
        _check_arch(arch)
        self.arch = arch
        self.max_len = max_len
        self.vocab = vocab
        self.text_cfg = text_cfg or TextConfig()

    def encode_frame(self, frame: CanFrame) -> TokenSequence:
        return tokenize(serialize_frame(frame, self.text_cfg), self.arch, self.max_len, self.vocab)

    def encode_frames(self, frames: Sequence[CanFrame]) -> TokenBatch:
        seqs = [self.encode_frame(f) for f in frames]
        return TokenBatch.stack(seqs, [0] * len(seqs), self.max_len)

    def encode_batch(self, records: Sequence[LabeledRecord]) -> TokenBatch:
        seqs = [self.encode_frame(rec.frame) for rec in records]
        return TokenBatch.stack(seqs, [int(rec.label) for rec in records], self.max_len)


def encode_batch(records: Sequence[LabeledRecord], arch: str, max_len: int = DEFAULT_MAX_LEN,
                 vocab: Vocab = DEFAULT_VOCAB, text_cfg: Optional[TextConfig] = None) -> TokenBatch:
    """Order-preserving tokenization of records with an aligned label vector."""
    return FrameTokenizer(arch, max_len, vocab, text_cfg).encode_batch(records)
