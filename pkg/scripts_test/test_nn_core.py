"""Gradient and invariance checks for the numpy layer kernels."""

from __future__ import annotations

import os
import sys
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canids import nn_core
from canids.nn_core import GradCheckError, ShapeError, grad_check


def _projection(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


class TestKernelGradients(unittest.TestCase):
    """Every kernel's backward agrees with central differences."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_affine(self):
        params = {'x': self.rng.normal(size=(2, 3, 4)), 'W': self.rng.normal(size=(5, 4)),
                  'b': self.rng.normal(size=5)}
        R = _projection((2, 3, 5))

        def f():
            y, cache = nn_core.affine(params['x'], params['W'], params['b'])
            dx, dW, db = nn_core.affine_backward(R, cache)
            return float(np.sum(y * R)), {'x': dx, 'W': dW, 'b': db}

        report = grad_check(f, params)
        self.assertTrue(report.passed, report.failures())

    def test_layer_norm(self):
        params = {'x': self.rng.normal(size=(3, 6)), 'gain': self.rng.normal(size=6),
                  'bias': self.rng.normal(size=6)}
        R = _projection((3, 6))

        def f():
            y, cache = nn_core.layer_norm(params['x'], params['gain'], params['bias'])
            dx, dgain, dbias = nn_core.layer_norm_backward(R, cache)
            return float(np.sum(y * R)), {'x': dx, 'gain': dgain, 'bias': dbias}

        report = grad_check(f, params)
        self.assertTrue(report.passed, report.failures())

    def test_rms_norm(self):
        params = {'x': self.rng.normal(size=(2, 2, 6)), 'gain': self.rng.normal(size=6)}
        R = _projection((2, 2, 6))

        def f():
            y, cache = nn_core.rms_norm(params['x'], params['gain'])
            dx, dgain = nn_core.rms_norm_backward(R, cache)
            return float(np.sum(y * R)), {'x': dx, 'gain': dgain}

        report = grad_check(f, params)
        self.assertTrue(report.passed, report.failures())

    def test_activations(self):
        for name, (forward, backward) in nn_core.ACTIVATIONS.items():
            with self.subTest(activation=name):
                params = {'x': self.rng.normal(size=(4, 5))}
                R = _projection((4, 5))

                def f():
                    y, cache = forward(params['x'])
                    return float(np.sum(y * R)), {'x': backward(R, cache)}

                report = grad_check(f, params)
                self.assertTrue(report.passed, report.failures())


@pytest.mark.parametrize('n_heads,n_kv_heads,masked', [
    (2, 2, 'none'),
    (2, 2, 'causal'),
    (4, 2, 'causal'),
    (4, 1, 'padding'),
])
def test_attention_gradients(n_heads, n_kv_heads, masked):
    rng = np.random.default_rng(1)
    hd, t = 2, 5
    params = {
        'q': rng.normal(size=(2, t, n_heads * hd)),
        'k': rng.normal(size=(2, t, n_kv_heads * hd)),
        'v': rng.normal(size=(2, t, n_kv_heads * hd)),
    }
    if masked == 'causal':
        mask = nn_core.causal_mask(t)
    elif masked == 'padding':
        mask = nn_core.padding_mask(np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool))
    else:
        mask = None
    R = _projection((2, t, n_heads * hd))

    def f():
        ctx, cache = nn_core.attention(params['q'], params['k'], params['v'], mask, n_heads, n_kv_heads)
        dq, dk, dv = nn_core.attention_backward(R, cache)
        return float(np.sum(ctx * R)), {'q': dq, 'k': dk, 'v': dv}

    report = grad_check(f, params)
    assert report.passed, report.failures()


@pytest.mark.parametrize('kind', ['gelu_mlp', 'swiglu'])
def test_ffn_gradients(kind):
    rng = np.random.default_rng(2)
    d, hidden = 4, 8
    params = {'x': rng.normal(size=(2, 3, d)), 'W1': rng.normal(size=(hidden, d)),
              'W2': rng.normal(size=(d, hidden))}
    if kind == 'gelu_mlp':
        params.update(b1=rng.normal(size=hidden), b2=rng.normal(size=d))
    else:
        params['W3'] = rng.normal(size=(hidden, d))
    R = _projection((2, 3, d))

    def f():
        weights = {name: value for name, value in params.items() if name != 'x'}
        y, cache = nn_core.ffn_block(params['x'], kind, weights)
        dx, grads = nn_core.ffn_block_backward(R, cache)
        return float(np.sum(y * R)), dict(grads, x=dx)

    report = grad_check(f, params)
    assert report.passed, report.failures()


def test_rope_backward_is_inverse_rotation():
    rng = np.random.default_rng(3)
    positions = np.arange(6)
    params = {'x': rng.normal(size=(2, 6, 8))}
    R = _projection((2, 6, 8))

    def f():
        y = nn_core.rope_apply(params['x'], positions)
        return float(np.sum(y * R)), {'x': nn_core.rope_apply(R, positions, inverse=True)}

    report = grad_check(f, params)
    assert report.passed, report.failures()


def test_grad_check_flags_a_wrong_gradient():
    params = {'x': np.array([1.0, 2.0, 3.0])}

    def f():
        return float(np.sum(params['x'] ** 2)), {'x': 3.0 * params['x']}

    report = grad_check(f, params)
    assert not report.passed
    assert 'x' in report.failures()
    np.testing.assert_array_equal(params['x'], [1.0, 2.0, 3.0])


def test_grad_check_rejects_non_finite_loss():
    params = {'x': np.array([1.0])}
    with pytest.raises(GradCheckError):
        grad_check(lambda: (float('nan'), {'x': np.zeros(1)}), params)


def test_rms_norm_example():
    y, _ = nn_core.rms_norm(np.array([3.0, 4.0]), np.ones(2), eps=0.0)
    np.testing.assert_allclose(y, [0.848528137423857, 1.131370849898476], rtol=1e-12)


def test_softmax_properties():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 7)) * 10
    p = nn_core.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(5), atol=1e-12)
    np.testing.assert_allclose(nn_core.softmax(logits + 123.0), p, atol=1e-12)
    big = nn_core.softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(big, [0.5, 0.5])
    np.testing.assert_allclose(np.exp(nn_core.log_softmax(logits)), p, atol=1e-12)


def test_rope_scores_depend_only_on_relative_offset():
    rng = np.random.default_rng(5)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))

    def score(m, n):
        return float(nn_core.rope_apply(q, np.array([m]))[0] @ nn_core.rope_apply(k, np.array([n]))[0])

    for m, n in [(0, 3), (5, 2), (7, 7)]:
        for shift in (1, 10, 40):
            assert abs(score(m, n) - score(m + shift, n + shift)) <= 1e-9


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ShapeError):
        nn_core.rope_angles(np.arange(3), 5)


def test_causal_attention_ignores_future_positions():
    rng = np.random.default_rng(6)
    t = 6
    q, k, v = (rng.normal(size=(1, t, 4)) for _ in range(3))
    mask = nn_core.causal_mask(t)
    base, _ = nn_core.attention(q, k, v, mask, 2, 2)
    for i in range(t - 1):
        k2, v2 = k.copy(), v.copy()
        k2[:, i + 1:] += rng.normal(size=k2[:, i + 1:].shape)
        v2[:, i + 1:] += rng.normal(size=v2[:, i + 1:].shape)
        out, _ = nn_core.attention(q, k2, v2, mask, 2, 2)
        np.testing.assert_allclose(out[:, :i + 1], base[:, :i + 1], atol=1e-12)


def test_grouped_query_attention_matches_repeated_heads():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(2, 4, 8))
    k = rng.normal(size=(2, 4, 4))
    v = rng.normal(size=(2, 4, 4))
    grouped, _ = nn_core.attention(q, k, v, None, 4, 2)

    def repeat_heads(x):
        heads = x.reshape(2, 4, 2, 2)
        return np.repeat(heads, 2, axis=2).reshape(2, 4, 8)

    full, _ = nn_core.attention(q, repeat_heads(k), repeat_heads(v), None, 4, 4)
    np.testing.assert_allclose(grouped, full, atol=1e-12)


def test_attention_shape_errors():
    x = np.zeros((1, 3, 6))
    with pytest.raises(ShapeError):
        nn_core.attention(x, x, x, None, 4, 4)
    with pytest.raises(ShapeError):
        nn_core.affine(np.zeros((2, 3)), np.zeros((4, 5)))


def test_dropout_modes():
    x = np.ones((100, 100))
    same, cache = nn_core.dropout(x, 0.5, None, train=False)
    assert same is x
    np.testing.assert_array_equal(nn_core.dropout_backward(x, cache), x)
    dropped, cache = nn_core.dropout(x, 0.25, np.random.default_rng(0), train=True)
    assert set(np.unique(dropped)) <= {0.0, 1.0 / 0.75}
    np.testing.assert_array_equal(nn_core.dropout_backward(x, cache), dropped)
    with pytest.raises(ValueError):
        nn_core.dropout(x, 0.5, None, train=True)
