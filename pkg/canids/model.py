"""
Transformer classifiers for CAN frames.

Purpose: Assemble the encoder classifier (BERT lineage: learned positions, LayerNorm, GELU MLP,
biases, [CLS] pooling, tanh head) and the decoder classifier (LLaMA lineage: RoPE, RMSNorm,
SwiGLU, grouped-query attention, causal mask, no biases, [EOS] pooling, silu head) from the
nn_core kernels, with an explicit backward pass.

Key decisions:
- Pre-norm residual blocks followed by a final norm, applied to the pooled position only
- Each batch is trimmed to its longest real sequence before the stack, so appending [PAD]s to
  a sequence cannot change its pooled output
- Parameters carry name, value, grad and frozen/decay flags; gradients accumulate into
  Parameter.grad and are skipped for frozen tensors
- A Linear layer may carry an adapter (see canids.lora) whose output is added to the base map
- Train/eval mode is an explicit forward argument; dropout randomness comes from a passed
  generator. Argmax ties resolve to the lowest class index
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from canids import nn_core
from canids.config import ModelConfig, TextConfig
from canids.textify import (
    BOS,
    CLS,
    DEFAULT_VOCAB,
    FrameTokenizer,
    TokenBatch,
    Vocab,
)
from ingest.can_log import AttackClass, CanFrame, LabeledRecord

logger = logging.getLogger(__name__)


class ModelError(Exception):
    """Base exception for model errors."""
    pass


class ArchitectureMismatchError(ModelError):
    """Input sequences were tokenized for the other architecture, or config/vocab disagree."""
    pass


class Parameter:
    """A named float64 tensor with its gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray, decay: bool = True, frozen: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.decay = decay
        self.frozen = frozen

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if not self.frozen:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f'Parameter({self.name}, shape={self.value.shape}, frozen={self.frozen})'


@dataclass
class ForwardContext:
    train: bool = False
    rng: Optional[np.random.Generator] = None
    dropout: float = 0.0


class Linear:
    """y = x W^T (+ b), plus an optional additive adapter branch."""

    def __init__(self, name: str, d_in: int, d_out: int, bias: bool, rng: np.random.Generator, std: float):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(f'{name}.weight', rng.normal(0.0, std, size=(d_out, d_in)))
        self.bias = Parameter(f'{name}.bias', np.zeros(d_out), decay=False) if bias else None
        self.adapter = None

    def parameters(self) -> Iterator[Parameter]:
        yield self.weight
        if self.bias is not None:
            yield self.bias
        if self.adapter is not None:
            yield from self.adapter.parameters()

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        y, cache = nn_core.affine(x, self.weight.value, None if self.bias is None else self.bias.value)
        adapter_cache = None
        if self.adapter is not None:
            delta, adapter_cache = self.adapter.forward(x, ctx)
            y = y + delta
        return y, (cache, adapter_cache)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        base_cache, adapter_cache = cache
        dx, dW, db = nn_core.affine_backward(dy, base_cache)
        self.weight.accumulate(dW)
        if self.bias is not None:
            self.bias.accumulate(db)
        if self.adapter is not None:
            dx = dx + self.adapter.backward(dy, adapter_cache)
        return dx


class Norm:
    def __init__(self, name: str, kind: str, d: int, eps: float):
        self.kind = kind
        self.eps = eps
        self.gain = Parameter(f'{name}.gain', np.ones(d), decay=False)
        self.bias = Parameter(f'{name}.bias', np.zeros(d), decay=False) if kind == 'layer_norm' else None

    def parameters(self) -> Iterator[Parameter]:
        yield self.gain
        if self.bias is not None:
            yield self.bias

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, tuple]:
        bias = None if self.bias is None else self.bias.value
        return nn_core.normalize(x, self.kind, self.gain.value, bias, self.eps)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        dx, dgain, dbias = nn_core.normalize_backward(dy, cache)
        self.gain.accumulate(dgain)
        if self.bias is not None:
            self.bias.accumulate(dbias)
        return dx


class SelfAttention:
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator, bias: bool, rope: bool):
        d, kv = cfg.d_model, cfg.n_kv_heads * cfg.head_dim
        self.n_heads = cfg.n_heads
        self.n_kv_heads = cfg.n_kv_heads
        self.rope = rope
        self.rope_base = cfg.rope_base
        self.q = Linear(f'{name}.q', d, d, bias, rng, cfg.init_std)
        self.k = Linear(f'{name}.k', d, kv, bias, rng, cfg.init_std)
        self.v = Linear(f'{name}.v', d, kv, bias, rng, cfg.init_std)
        self.o = Linear(f'{name}.o', d, d, bias, rng, cfg.init_std)

    def linears(self) -> List[Linear]:
        return [self.q, self.k, self.v, self.o]

    def forward(self, x: np.ndarray, mask: np.ndarray, positions: np.ndarray,
                ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        q, cq = self.q.forward(x, ctx)
        k, ck = self.k.forward(x, ctx)
        v, cv = self.v.forward(x, ctx)
        if self.rope:
            q = nn_core.rope_heads(q, self.n_heads, positions, self.rope_base)
            k = nn_core.rope_heads(k, self.n_kv_heads, positions, self.rope_base)
        a, ca = nn_core.attention(q, k, v, mask, self.n_heads, self.n_kv_heads)
        out, co = self.o.forward(a, ctx)
        return out, (cq, ck, cv, ca, co, positions)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        cq, ck, cv, ca, co, positions = cache
        da = self.o.backward(dy, co)
        dq, dk, dv = nn_core.attention_backward(da, ca)
        if self.rope:
            dq = nn_core.rope_heads(dq, self.n_heads, positions, self.rope_base, inverse=True)
            dk = nn_core.rope_heads(dk, self.n_kv_heads, positions, self.rope_base, inverse=True)
        return self.q.backward(dq, cq) + self.k.backward(dk, ck) + self.v.backward(dv, cv)


class FeedForward:
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator, kind: str):
        d, f = cfg.d_model, cfg.ffn_hidden
        self.kind = kind
        bias = kind == 'gelu_mlp'
        self.w1 = Linear(f'{name}.w1', d, f, bias, rng, cfg.init_std)
        self.w3 = Linear(f'{name}.w3', d, f, False, rng, cfg.init_std) if kind == 'swiglu' else None
        self.w2 = Linear(f'{name}.w2', f, d, bias, rng, cfg.init_std)

    def linears(self) -> List[Linear]:
        return [lin for lin in (self.w1, self.w3, self.w2) if lin is not None]

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        h, c1 = self.w1.forward(x, ctx)
        if self.kind == 'gelu_mlp':
            a, ca = nn_core.gelu(h)
            y, c2 = self.w2.forward(a, ctx)
            return y, (c1, ca, None, None, None, c2)
        u, c3 = self.w3.forward(x, ctx)
        s, cs = nn_core.silu(h)
        y, c2 = self.w2.forward(s * u, ctx)
        return y, (c1, cs, c3, s, u, c2)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        c1, ca, c3, s, u, c2 = cache
        dmid = self.w2.backward(dy, c2)
        if self.kind == 'gelu_mlp':
            return self.w1.backward(nn_core.gelu_backward(dmid, ca), c1)
        dh = nn_core.silu_backward(dmid * u, ca)
        return self.w1.backward(dh, c1) + self.w3.backward(dmid * s, c3)


class Block:
    """Pre-norm residual block: h = x + attn(norm1(x)); y = h + ffn(norm2(h))."""

    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        name = f'layers.{index}'
        encoder = cfg.arch == 'encoder'
        norm_kind = 'layer_norm' if encoder else 'rms_norm'
        self.norm1 = Norm(f'{name}.norm1', norm_kind, cfg.d_model, cfg.norm_eps)
        self.attn = SelfAttention(f'{name}.attn', cfg, rng, bias=encoder, rope=not encoder)
        self.norm2 = Norm(f'{name}.norm2', norm_kind, cfg.d_model, cfg.norm_eps)
        self.ffn = FeedForward(f'{name}.ffn', cfg, rng, 'gelu_mlp' if encoder else 'swiglu')

    def parameters(self) -> Iterator[Parameter]:
        yield from self.norm1.parameters()
        for lin in self.attn.linears():
            yield from lin.parameters()
        yield from self.norm2.parameters()
        for lin in self.ffn.linears():
            yield from lin.parameters()

    def linears(self) -> List[Linear]:
        return self.attn.linears() + self.ffn.linears()

    def forward(self, x: np.ndarray, mask: np.ndarray, positions: np.ndarray,
                ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        n1, cn1 = self.norm1.forward(x)
        a, ca = self.attn.forward(n1, mask, positions, ctx)
        a, cd1 = nn_core.dropout(a, ctx.dropout, ctx.rng, ctx.train)
        h = x + a
        n2, cn2 = self.norm2.forward(h)
        f, cf = self.ffn.forward(n2, ctx)
        f, cd2 = nn_core.dropout(f, ctx.dropout, ctx.rng, ctx.train)
        return h + f, (cn1, ca, cd1, cn2, cf, cd2)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        cn1, ca, cd1, cn2, cf, cd2 = cache
        dn2 = self.ffn.backward(nn_core.dropout_backward(dy, cd2), cf)
        dh = dy + self.norm2.backward(dn2, cn2)
        dn1 = self.attn.backward(nn_core.dropout_backward(dh, cd1), ca)
        return dh + self.norm1.backward(dn1, cn1)


class ClassifierHead:
    """logits = W_out act(W_h z + b_h) + b_out."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.activation = 'tanh' if cfg.arch == 'encoder' else 'silu'
        self.hidden = Linear('head.hidden', cfg.d_model, cfg.head_width, True, rng, cfg.init_std)
        self.out = Linear('head.out', cfg.head_width, cfg.n_classes, True, rng, cfg.init_std)

    def parameters(self) -> Iterator[Parameter]:
        yield from self.hidden.parameters()
        yield from self.out.parameters()

    def forward(self, z: np.ndarray, ctx: ForwardContext) -> Tuple[np.ndarray, tuple]:
        act, _ = nn_core.ACTIVATIONS[self.activation]
        h, c1 = self.hidden.forward(z, ctx)
        a, ca = act(h)
        logits, c2 = self.out.forward(a, ctx)
        return logits, (c1, ca, c2)

    def backward(self, dlogits: np.ndarray, cache: tuple) -> np.ndarray:
        _, act_backward = nn_core.ACTIVATIONS[self.activation]
        c1, ca, c2 = cache
        da = self.out.backward(dlogits, c2)
        return self.hidden.backward(act_backward(da, ca), c1)


@dataclass
class ModelSummary:
    total: int
    trainable: int
    groups: Dict[str, int] = field(default_factory=dict)

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


class TransformerModel:
    """Encoder or decoder classifier over tokenized CAN frames."""

    def __init__(self, config: ModelConfig, vocab: Vocab = DEFAULT_VOCAB,
                 text_cfg: Optional[TextConfig] = None):
        if config.vocab_size == 0:
            config = config.model_copy(update={'vocab_size': len(vocab)})
        elif config.vocab_size != len(vocab):
            raise ArchitectureMismatchError(
                f'config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}'
            )
        self.config = config
        self.vocab = vocab
        self.text_cfg = text_cfg or TextConfig()
        self.tokenizer = FrameTokenizer(config.arch, config.max_len, vocab, self.text_cfg)
        self._start_id = vocab.id_of(CLS if config.arch == 'encoder' else BOS)

        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.tok_emb = Parameter('tok_emb', rng.normal(0.0, config.init_std, size=(config.vocab_size, d)),
                                 decay=False)
        self.pos_emb = None
        if config.arch == 'encoder':
            self.pos_emb = Parameter('pos_emb', rng.normal(0.0, config.init_std, size=(config.max_len, d)),
                                     decay=False)
        self.blocks = [Block(i, config, rng) for i in range(config.n_layers)]
        self.final_norm = Norm('final_norm', 'layer_norm' if config.arch == 'encoder' else 'rms_norm',
                               d, config.norm_eps)
        self.head = ClassifierHead(config, rng)
        self.checkpoint_digest: Optional[str] = None

    @property
    def arch(self) -> str:
        return self.config.arch

    def parameters(self) -> List[Parameter]:
        params = [self.tok_emb]
        if self.pos_emb is not None:
            params.append(self.pos_emb)
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.final_norm.parameters())
        params.extend(self.head.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def linears(self) -> Dict[str, Linear]:
        """Every Linear layer by name, head included."""
        layers: Dict[str, Linear] = {}
        for block in self.blocks:
            for lin in block.linears():
                layers[lin.name] = lin
        layers[self.head.hidden.name] = self.head.hidden
        layers[self.head.out.name] = self.head.out
        return layers

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _masks(self, mask: np.ndarray) -> np.ndarray:
        additive = nn_core.padding_mask(mask)
        if self.arch == 'decoder':
            additive = additive + nn_core.causal_mask(mask.shape[1])[None, None, :, :]
        return additive

    def forward(self, batch: TokenBatch, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, tuple]:
        """Pooled, final-normalized embeddings Z of shape (B, d_model).

        Raises:
            ArchitectureMismatchError: Sequences do not start with this architecture's start token
        """
        if len(batch) == 0:
            raise ModelError('empty batch')
        if batch.ids.shape[1] > self.config.max_len:
            raise ArchitectureMismatchError(
                f'sequence length {batch.ids.shape[1]} exceeds max_len {self.config.max_len}'
            )
        if np.any(batch.ids[:, 0] != self._start_id):
            raise ArchitectureMismatchError(f'sequences were not tokenized for the {self.arch} model')
        t = int(batch.mask.sum(axis=1).max())
        ids = batch.ids[:, :t]
        mask = batch.mask[:, :t]
        positions = np.arange(t)
        ctx = ForwardContext(train=train, rng=rng, dropout=self.config.dropout)

        h = self.tok_emb.value[ids]
        if self.pos_emb is not None:
            h = h + self.pos_emb.value[:t]
        additive = self._masks(mask)
        block_caches = []
        for block in self.blocks:
            h, cache = block.forward(h, additive, positions, ctx)
            block_caches.append(cache)
        rows = np.arange(len(batch))
        pooled = h[rows, batch.pool_index]
        z, norm_cache = self.final_norm.forward(pooled)
        return z, (ids, h.shape, rows, batch.pool_index, block_caches, norm_cache)

    def backward_pooled(self, dz: np.ndarray, cache: tuple) -> None:
        ids, h_shape, rows, pool_index, block_caches, norm_cache = cache
        dpooled = self.final_norm.backward(dz, norm_cache)
        dh = np.zeros(h_shape)
        dh[rows, pool_index] = dpooled
        for block, block_cache in zip(reversed(self.blocks), reversed(block_caches)):
            dh = block.backward(dh, block_cache)
        if self.pos_emb is not None and not self.pos_emb.frozen:
            self.pos_emb.grad[:h_shape[1]] += dh.sum(axis=0)
        if not self.tok_emb.frozen:
            np.add.at(self.tok_emb.grad, ids, dh)

    def logits(self, batch: TokenBatch, train: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, tuple]:
        z, cache = self.forward(batch, train, rng)
        ctx = ForwardContext(train=train, rng=rng, dropout=self.config.dropout)
        out, head_cache = self.head.forward(z, ctx)
        return out, (cache, head_cache)

    def backward(self, dlogits: np.ndarray, cache: tuple) -> None:
        """Accumulate parameter gradients for d(loss)/d(logits)."""
        forward_cache, head_cache = cache
        dz = self.head.backward(dlogits, head_cache)
        self.backward_pooled(dz, forward_cache)

    def classify(self, z: np.ndarray) -> np.ndarray:
        """Class probabilities (B, C) from pooled embeddings."""
        out, _ = self.head.forward(z, ForwardContext())
        return nn_core.softmax(out)

    def predict_proba(self, batch: TokenBatch) -> np.ndarray:
        z, _ = self.forward(batch)
        return self.classify(z)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config (no adapters)."""
    d, f, c, hw = config.d_model, config.ffn_hidden, config.n_classes, config.head_width
    kv = config.n_kv_heads * config.head_dim
    v = config.vocab_size or len(DEFAULT_VOCAB)
    if config.arch == 'encoder':
        embeddings = v * d + config.max_len * d
        attention = (d * d + d) * 2 + (d * kv + kv) * 2
        ffn = d * f + f + f * d + d
        norms = 2 * (2 * d)
        final = 2 * d
    else:
        embeddings = v * d
        attention = d * d * 2 + d * kv * 2
        ffn = 3 * d * f
        norms = 2 * d
        final = d
    head = d * hw + hw + hw * c + c
    return embeddings + config.n_layers * (attention + ffn + norms) + final + head


def _group_of(name: str) -> str:
    if name.startswith(('tok_emb', 'pos_emb')):
        return 'embeddings'
    if name.startswith('head.'):
        return 'head'
    if '.lora_' in name:
        return 'adapters'
    if '.attn.' in name:
        return 'attention'
    if '.ffn.' in name:
        return 'ffn'
    return 'norms'


def model_summary(model: TransformerModel) -> ModelSummary:
    """Total and trainable parameter counts with a per-group breakdown."""
    total = trainable = 0
    groups: Dict[str, int] = {}
    for p in model.parameters():
        total += p.size
        if not p.frozen:
            trainable += p.size
        group = _group_of(p.name)
        groups[group] = groups.get(group, 0) + p.size
    return ModelSummary(total=total, trainable=trainable, groups=groups)


def reinit_head(model: TransformerModel, seed: int) -> None:
    """Replace the classifier head with freshly initialized weights."""
    model.head = ClassifierHead(model.config, np.random.default_rng(seed))
    logger.info(f'Re-initialized classifier head with seed {seed}')


def predict_label(model: TransformerModel, frame: CanFrame) -> Tuple[AttackClass, np.ndarray]:
    """Most probable class for one frame and its probability vector."""
    probs = model.predict_proba(model.tokenizer.encode_frames([frame]))[0]
    return AttackClass(int(np.argmax(probs))), probs


def predict_records(model: TransformerModel, records: Sequence[LabeledRecord],
                    batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Batched inference: (predicted class indices (N,), probabilities (N, C))."""
    n_classes = model.config.n_classes
    if not records:
        return np.zeros(0, dtype=np.int64), np.zeros((0, n_classes))
    probs = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        probs.append(model.predict_proba(model.tokenizer.encode_batch(chunk)))
    stacked = np.concatenate(probs, axis=0)
    return np.argmax(stacked, axis=1).astype(np.int64), stacked
