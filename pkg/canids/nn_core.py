"""
Tensor kernels with analytic backward passes.

Purpose: The numeric building blocks of the encoder and decoder classifiers, in float64
numpy: affine maps, softmax, layer/RMS normalization, masked (grouped-query) attention,
rotary embeddings, GELU/SiLU feed-forward blocks, dropout, and a central-difference gradient
checker.

Key decisions:
- Every kernel is a pure function returning (output, cache); the matching *_backward takes
  (dy, cache). No state lives in this module, so forward passes may run concurrently
- Weights are (out, in); affine computes x @ W.T + b over any leading batch shape
- Attention masks are additive (0 or -inf), broadcast against (B, H, Tq, Tk) scores
- Rotary embeddings pair feature i with i + d/2 (rotate-half layout)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
GRAD_CHECK_STEP = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

Cache = Tuple


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""
    pass


class GradCheckError(RuntimeError):
    """Raised when a gradient check evaluates to a non-finite value."""
    pass


# Affine

def affine(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Cache]:
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f'affine: input width {x.shape[-1]} != weight in-dim {W.shape[1]}')
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f'affine: bias shape {b.shape} != ({W.shape[0]},)')
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, (x, W, b is not None)


def affine_backward(dy: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Returns (dx, dW, db); db is None for bias-free layers."""
    x, W, has_bias = cache
    dx = dy @ W
    dW = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_bias else None
    return dx, dW, db


# Softmax

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# Normalization

def layer_norm(x: np.ndarray, gain: np.ndarray, bias: Optional[np.ndarray] = None,
               eps: float = NORM_EPS) -> Tuple[np.ndarray, Cache]:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain
    if bias is not None:
        y = y + bias
    return y, (xhat, inv, gain, bias is not None)


def layer_norm_backward(dy: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    xhat, inv, gain, has_bias = cache
    n = xhat.shape[-1]
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    flat = dy.reshape(-1, n)
    dgain = (flat * xhat.reshape(-1, n)).sum(axis=0)
    dbias = flat.sum(axis=0) if has_bias else None
    return dx, dgain, dbias


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> Tuple[np.ndarray, Cache]:
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x / rms * gain
    return y, (x, rms, gain)


def rms_norm_backward(dy: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray]:
    x, rms, gain = cache
    n = x.shape[-1]
    u = dy * gain
    dx = u / rms - x * (u * x).sum(axis=-1, keepdims=True) / (n * rms ** 3)
    dgain = (dy * x / rms).reshape(-1, n).sum(axis=0)
    return dx, dgain


def normalize(x: np.ndarray, kind: str, gain: np.ndarray, bias: Optional[np.ndarray] = None,
              eps: float = NORM_EPS) -> Tuple[np.ndarray, Cache]:
    """Dispatch to layer_norm or rms_norm; the cache records the kind for normalize_backward."""
    if kind == 'layer_norm':
        y, cache = layer_norm(x, gain, bias, eps)
    elif kind == 'rms_norm':
        if bias is not None:
            raise ShapeError('rms_norm takes no bias')
        y, cache = rms_norm(x, gain, eps)
    else:
        raise ValueError(f'unknown normalization {kind!r}')
    return y, (kind, cache)


def normalize_backward(dy: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    kind, inner = cache
    if kind == 'layer_norm':
        return layer_norm_backward(dy, inner)
    dx, dgain = rms_norm_backward(dy, inner)
    return dx, dgain, None


# Activations

def gelu(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """tanh approximation."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: np.ndarray, cache: Cache) -> np.ndarray:
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, cache: Cache) -> np.ndarray:
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def tanh(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    y = np.tanh(x)
    return y, (y,)


def tanh_backward(dy: np.ndarray, cache: Cache) -> np.ndarray:
    (y,) = cache
    return dy * (1.0 - y * y)


ACTIVATIONS: Dict[str, Tuple[Callable, Callable]] = {
    'gelu': (gelu, gelu_backward),
    'silu': (silu, silu_backward),
    'tanh': (tanh, tanh_backward),
}


# Dropout

def dropout(x: np.ndarray, rate: float, rng: Optional[np.random.Generator],
            train: bool) -> Tuple[np.ndarray, Cache]:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train or rate <= 0.0:
        return x, (None,)
    if rng is None:
        raise ValueError('dropout in train mode needs a generator')
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, (keep,)


def dropout_backward(dy: np.ndarray, cache: Cache) -> np.ndarray:
    (keep,) = cache
    return dy if keep is None else dy * keep


# Attention

def causal_mask(t: int) -> np.ndarray:
    """(t, t) additive mask: -inf above the diagonal."""
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, 1, 1, T) additive mask from a boolean (B, T) validity array."""
    return np.where(valid, 0.0, -np.inf)[:, None, None, :]


def _split_heads(x: np.ndarray, n: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n, d // n).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: Optional[np.ndarray],
              n_heads: int, n_kv_heads: int) -> Tuple[np.ndarray, Cache]:
    """Scaled dot-product attention over projected inputs.

    Args:
        q: (B, Tq, n_heads * hd)
        k, v: (B, Tk, n_kv_heads * hd); each kv head serves n_heads / n_kv_heads query heads
        mask: Additive mask broadcastable to (B, n_heads, Tq, Tk), or None

    Returns:
        (context (B, Tq, n_heads * hd), cache)
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError('attention expects rank-3 q, k, v')
    if n_heads % n_kv_heads or q.shape[-1] % n_heads:
        raise ShapeError(f'bad head layout: d={q.shape[-1]} heads={n_heads} kv_heads={n_kv_heads}')
    hd = q.shape[-1] // n_heads
    if k.shape != v.shape or k.shape[-1] != n_kv_heads * hd or k.shape[0] != q.shape[0]:
        raise ShapeError(f'k/v shape {k.shape} does not match q {q.shape} with {n_kv_heads} kv heads')
    group = n_heads // n_kv_heads
    qh = _split_heads(q, n_heads)
    kh = np.repeat(_split_heads(k, n_kv_heads), group, axis=1)
    vh = np.repeat(_split_heads(v, n_kv_heads), group, axis=1)
    scale = 1.0 / math.sqrt(hd)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    p = softmax(scores)
    ctx = p @ vh
    return _merge_heads(ctx), (qh, kh, vh, p, scale, n_kv_heads, group)


def attention_backward(dctx: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dq, dk, dv) in the projected layouts of attention()."""
    qh, kh, vh, p, scale, n_kv_heads, group = cache
    dctxh = _split_heads(dctx, qh.shape[1])
    dp = dctxh @ vh.swapaxes(-1, -2)
    dvh = p.swapaxes(-1, -2) @ dctxh
    ds = softmax_backward(dp, p) * scale
    dqh = ds @ kh
    dkh = ds.swapaxes(-1, -2) @ qh
    b, _, tk, hd = kh.shape
    dkh = dkh.reshape(b, n_kv_heads, group, tk, hd).sum(axis=2)
    dvh = dvh.reshape(b, n_kv_heads, group, tk, hd).sum(axis=2)
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# Rotary embeddings

def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (T, head_dim) in rotate-half layout."""
    if head_dim % 2:
        raise ShapeError(f'rotary embeddings need an even head dimension, got {head_dim}')
    half = head_dim // 2
    theta = base ** (-2.0 * np.arange(half) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def rope_apply(x: np.ndarray, positions: np.ndarray, base: float = 10000.0,
               inverse: bool = False) -> np.ndarray:
    """Rotate feature pairs (i, i + d/2) of x (..., T, d) by position * theta_i.

    ``inverse=True`` applies the opposite rotation, which is also the backward pass.
    """
    cos, sin = rope_angles(positions, x.shape[-1], base)
    if inverse:
        sin = -sin
    return x * cos + _rotate_half(x) * sin


def rope_heads(x: np.ndarray, n_heads: int, positions: np.ndarray, base: float = 10000.0,
               inverse: bool = False) -> np.ndarray:
    """rope_apply per head on a projected (B, T, n_heads * hd) tensor."""
    return _merge_heads(rope_apply(_split_heads(x, n_heads), positions, base, inverse))


# Feed-forward

def ffn_block(x: np.ndarray, kind: str, params: Dict[str, np.ndarray]) -> Tuple[np.ndarray, Cache]:
    """gelu_mlp: W2 gelu(W1 x + b1) + b2; swiglu: W2 (silu(W1 x) * (W3 x))."""
    if kind == 'gelu_mlp':
        h, c1 = affine(x, params['W1'], params['b1'])
        a, ca = gelu(h)
        y, c2 = affine(a, params['W2'], params['b2'])
        return y, (kind, c1, ca, c2)
    if kind == 'swiglu':
        g, c1 = affine(x, params['W1'])
        u, c3 = affine(x, params['W3'])
        s, cs = silu(g)
        y, c2 = affine(s * u, params['W2'])
        return y, (kind, c1, c3, cs, s, u, c2)
    raise ValueError(f'unknown ffn kind {kind!r}')


def ffn_block_backward(dy: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    kind = cache[0]
    if kind == 'gelu_mlp':
        _, c1, ca, c2 = cache
        da, dW2, db2 = affine_backward(dy, c2)
        dh = gelu_backward(da, ca)
        dx, dW1, db1 = affine_backward(dh, c1)
        return dx, {'W1': dW1, 'b1': db1, 'W2': dW2, 'b2': db2}
    _, c1, c3, cs, s, u, c2 = cache
    dsu, dW2, _ = affine_backward(dy, c2)
    dg = silu_backward(dsu * u, cs)
    du = dsu * s
    dx1, dW1, _ = affine_backward(dg, c1)
    dx3, dW3, _ = affine_backward(du, c3)
    return dx1 + dx3, {'W1': dW1, 'W2': dW2, 'W3': dW3}


# Gradient checking

@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> Dict[str, float]:
        return {name: err for name, err in self.errors.items() if err >= self.tolerance}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, 1e-12)."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def grad_check(f: Callable[[], Tuple[float, Dict[str, np.ndarray]]], params: Dict[str, np.ndarray],
               tolerance: float = 1e-4, step: float = GRAD_CHECK_STEP,
               max_elements: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Args:
        f: Evaluates the scalar loss at the current contents of ``params`` and returns
            (loss, grads) with one gradient per parameter name
        params: Arrays perturbed in place (restored afterwards)
        tolerance: Per-tensor relative error threshold
        step: Finite-difference step
        max_elements: Probe at most this many entries per tensor (chosen with ``seed``)

    Raises:
        GradCheckError: If the loss or a gradient is non-finite
    """
    loss, grads = f()
    if not np.isfinite(loss):
        raise GradCheckError(f'non-finite loss {loss}')
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, value in params.items():
        analytic = grads[name]
        if analytic is None or not np.all(np.isfinite(analytic)):
            raise GradCheckError(f'missing or non-finite analytic gradient for {name}')
        flat = value.reshape(-1)
        probes = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            probes = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.zeros(len(probes))
        for j, idx in enumerate(probes):
            original = flat[idx]
            flat[idx] = original + step
            plus, _ = f()
            flat[idx] = original - step
            minus, _ = f()
            flat[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradCheckError(f'non-finite loss while probing {name}[{idx}]')
            numeric[j] = (plus - minus) / (2.0 * step)
        report.errors[name] = relative_error(analytic.reshape(-1)[probes], numeric)
    if not report.passed:
        logger.debug(f'Gradient check failures: {report.failures()}')
    return report
