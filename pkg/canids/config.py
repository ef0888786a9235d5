"""Configuration settings, run-config files and logging setup.

Environment values (including a local .env file) are read through small helpers that strip
inline comments, so a line such as

    CANIDS_LOG_LEVEL=DEBUG # verbose while tuning

does not break parsing. Run configurations are flat ``section.key = value`` files:

    include = desk_common.cfg
    model.arch = encoder
    model.d_model = 64
    train.epochs = 10

``include`` (comma separated, relative to the including file) is applied first; keys in the
including file override included ones. Every section is a pydantic model that rejects
unknown keys, and every field has a default.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Set, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# Load environment variables from .env file
load_dotenv()

_logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


class ConfigError(Exception):
    """Raised for unreadable, cyclic, or invalid run configuration."""
    pass


def _strip_inline_comment(val: str) -> str:
    """Strip an inline comment from a string and trim whitespace/quotes.

    Example: "DEBUG # verbose" -> "DEBUG"
    """
    if val is None:
        return ''
    val = val.split('#', 1)[0]
    val = val.strip()
    if (val.startswith('"') and val.endswith('"')) or (
        val.startswith("'") and val.endswith("'")
    ):
        val = val[1:-1]
    return val


def _get_env(name: str, default: Optional[str] = None) -> Optional[str]:
    raw = os.environ.get(name)
    if raw is None:
        return default
    stripped = _strip_inline_comment(raw)
    return stripped if stripped != '' else default


def env_int(name: str, default: int) -> int:
    """Integer environment setting; unparsable values log a warning and yield ``default``."""
    raw = _get_env(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        _logger.warning("%s=%r is not an integer, using %s", name, raw, default)
        return default


_TRUE_WORDS = frozenset({'1', 'true', 'yes', 'on'})
_FALSE_WORDS = frozenset({'0', 'false', 'no', 'off'})


def env_flag(name: str, default: bool) -> bool:
    """Boolean environment setting (1/0, true/false, yes/no, on/off)."""
    raw = _get_env(name)
    if raw is None:
        return default
    word = raw.lower()
    if word in _TRUE_WORDS:
        return True
    if word in _FALSE_WORDS:
        return False
    _logger.warning("%s=%r is not a boolean, using %s", name, raw, default)
    return default


def setup_logging(level: Optional[str] = None) -> None:
    """Setup logging configuration.

    The level defaults to CANIDS_LOG_LEVEL (INFO when unset); CANIDS_LOG_FORMAT overrides the
    record format.
    """
    name = (level or _get_env('CANIDS_LOG_LEVEL', 'INFO')).upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        _logger.warning("Unknown log level %r, using INFO", name)
        numeric = logging.INFO
    logging.basicConfig(
        level=numeric,
        format=_get_env('CANIDS_LOG_FORMAT', LOG_FORMAT),
        datefmt=LOG_DATEFMT,
        force=True,
    )


def _split_list(value: object) -> object:
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class ModelConfig(_Section):
    """Architecture hyperparameters.

    vocab_size is filled in from the tokenizer vocabulary when left at 0; head_hidden 0 means
    "same as d_model".
    """

    arch: Literal['encoder', 'decoder'] = 'encoder'
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 0
    max_len: int = 48
    n_classes: int = 5
    head_hidden: int = 0
    dropout: float = 0.0
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    init_std: float = 0.02
    seed: int = 0

    @model_validator(mode='after')
    def _check_shapes(self) -> 'ModelConfig':
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1 or self.n_kv_heads < 1:
            raise ValueError('n_layers, d_model, n_heads and n_kv_heads must be >= 1')
        if self.d_model % self.n_heads:
            raise ValueError(f'd_model {self.d_model} not divisible by n_heads {self.n_heads}')
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f'n_kv_heads {self.n_kv_heads} does not divide n_heads {self.n_heads}')
        if self.arch == 'decoder' and (self.d_model // self.n_heads) % 2:
            raise ValueError('decoder head dimension must be even for rotary embeddings')
        if self.n_classes < 2:
            raise ValueError('n_classes must be >= 2')
        if self.ffn_mult < 1 or self.max_len < 2:
            raise ValueError('ffn_mult must be >= 1 and max_len >= 2')
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError('dropout must be in [0, 1)')
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return self.d_model * self.ffn_mult

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.d_model


class TrainConfig(_Section):
    epochs: int = 10
    batch_size: int = 4
    eval_batch_size: int = 32
    accumulation: int = 1
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    @model_validator(mode='after')
    def _check_positive(self) -> 'TrainConfig':
        if min(self.epochs, self.batch_size, self.eval_batch_size, self.accumulation) < 1:
            raise ValueError('epochs, batch sizes and accumulation must be >= 1')
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError('learning_rate must be > 0 and weight_decay >= 0')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError('betas must be in [0, 1) and eps > 0')
        return self

    @classmethod
    def for_arch(cls, arch: str, **overrides: object) -> 'TrainConfig':
        """Per-architecture defaults: encoders 5e-5 / batch 32 eval, decoder 3e-5 / accumulation 4 / eval 16."""
        if arch == 'decoder':
            base: Dict[str, object] = {'learning_rate': 3e-5, 'accumulation': 4, 'eval_batch_size': 16}
        else:
            base = {'learning_rate': 5e-5, 'accumulation': 1, 'eval_batch_size': 32}
        base.update(overrides)
        return cls(**base)


class SplitConfig(_Section):
    train_fraction: float = 0.7
    p: float = 0.01
    normal_ratio: float = 0.1
    inner_train_fraction: float = 0.7
    subsample_first: bool = False
    seed: int = 0

    @model_validator(mode='after')
    def _check_fractions(self) -> 'SplitConfig':
        for name in ('train_fraction', 'inner_train_fraction'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f'{name} must be in (0, 1), got {value}')
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f'p must be in (0, 1], got {self.p}')
        if not 0.0 < self.normal_ratio <= 1.0:
            raise ValueError(f'normal_ratio must be in (0, 1], got {self.normal_ratio}')
        return self

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.train_fraction


class LoraConfig(_Section):
    enabled: bool = False
    r: int = 16
    alpha: float = 64.0
    dropout: float = 0.1
    targets: List[str] = ['*.attn.*', '*.ffn.*']
    init_std: float = 0.02
    seed: int = 0

    @field_validator('targets', mode='before')
    @classmethod
    def _split_targets(cls, value: object) -> object:
        return _split_list(value)

    @model_validator(mode='after')
    def _check(self) -> 'LoraConfig':
        if self.r < 1:
            raise ValueError('r must be >= 1')
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError('dropout must be in [0, 1)')
        if not self.targets:
            raise ValueError('targets must select at least one layer pattern')
        return self


class TextConfig(_Section):
    include_timestamp: bool = False
    include_dlc: bool = True


class PathsConfig(_Section):
    data_dir: str = 'data/generated'
    split_dir: str = 'data/split'
    out_dir: str = 'runs/default'


class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    text: TextConfig = Field(default_factory=TextConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


SECTIONS = tuple(RunConfig.model_fields)


def _read_flat(path: Path, seen: Set[Path]) -> Dict[str, str]:
    resolved = path.resolve()
    if resolved in seen:
        raise ConfigError(f'Include cycle through {path}')
    if not resolved.is_file():
        raise ConfigError(f'Config file not found: {path}')
    seen = seen | {resolved}

    raw = dotenv_values(resolved, interpolate=False)
    merged: Dict[str, str] = {}
    include = raw.pop('include', None)
    if include:
        for item in include.split(','):
            item = item.strip()
            if item:
                merged.update(_read_flat(resolved.parent / item, seen))
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f'{path}: key {key!r} has no value')
        merged[key] = _strip_inline_comment(value)
    return merged


def parse_override(text: str) -> Dict[str, str]:
    """Parse one ``section.key=value`` override."""
    if '=' not in text:
        raise ConfigError(f'Override {text!r} is not key=value')
    key, value = text.split('=', 1)
    return {key.strip(): _strip_inline_comment(value)}


def build_run_config(flat: Dict[str, object]) -> RunConfig:
    """Assemble a RunConfig from dotted keys.

    Raises:
        ConfigError: Unknown section/key or invalid value
    """
    nested: Dict[str, Dict[str, object]] = {}
    for key, value in flat.items():
        if '.' not in key:
            raise ConfigError(f'Key {key!r} must be section.name')
        section, name = key.split('.', 1)
        if section not in SECTIONS:
            raise ConfigError(f'Unknown config section {section!r} in {key!r}')
        nested.setdefault(section, {})[name] = value
    try:
        return RunConfig(**nested)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = '.'.join(str(part) for part in first.get('loc', ()))
        raise ConfigError(f'Invalid config value at {where or "<root>"}: {first.get("msg")}') from exc


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Iterable[str]] = None) -> RunConfig:
    """Load a run-config file (or defaults) and apply ``key=value`` overrides in order."""
    flat: Dict[str, object] = {}
    if path is not None:
        flat.update(_read_flat(Path(path), set()))
        _logger.info(f'Loaded run config from {path}')
    for item in overrides or ():
        flat.update(parse_override(item))
    return build_run_config(flat)


def flatten_run_config(cfg: RunConfig) -> Dict[str, object]:
    """Dotted-key view of a RunConfig, sorted by key."""
    flat: Dict[str, object] = {}
    for section, values in cfg.model_dump().items():
        for name, value in values.items():
            flat[f'{section}.{name}'] = value
    return dict(sorted(flat.items()))


def dump_run_config(cfg: RunConfig) -> str:
    """Render a RunConfig in the flat file format (loadable by load_run_config)."""
    lines = []
    for key, value in flatten_run_config(cfg).items():
        if isinstance(value, list):
            value = ','.join(str(v) for v in value)
        elif isinstance(value, bool):
            value = 'true' if value else 'false'
        lines.append(f'{key} = {value}')
    return '\n'.join(lines) + '\n'
