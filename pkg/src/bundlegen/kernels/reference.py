"""Reference numpy implementations of the numeric kernels.

These are the fallback backend and the semantic ground truth for the
compiled extension: every function here must agree with its compiled
counterpart to floating-point roundoff.

Shapes and conventions:
  * attention operates on stacked heads: q (H, m, hd), k/v (H, n, hd);
    ``causal`` masks key j for query i when j > i + (n - m), i.e. the
    query rows are right-aligned against the keys.
  * layer_norm normalizes the last axis of a 2-D input.
  * csr_matmul multiplies a CSR matrix (given as raw indptr/indices/data
    arrays) with a dense matrix.
  * adam_step updates a flat parameter view in place.
"""

import math

import numpy as np
import scipy.sparse as sp

name = "python"


def _softmax_lastaxis(scores):
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention_forward(q, k, v, causal):
    """Scaled dot-product attention over stacked heads.

    Returns (out, weights) where out is (H, m, hd) and weights the
    post-softmax attention matrix (H, m, n), kept for the backward pass.
    """
    hd = q.shape[2]
    scale = 1.0 / math.sqrt(hd)
    scores = np.matmul(q, np.swapaxes(k, 1, 2)) * scale
    if causal:
        m, n = scores.shape[1], scores.shape[2]
        offset = n - m
        mask = np.arange(n)[None, :] > (np.arange(m)[:, None] + offset)
        scores = np.where(mask[None, :, :], -np.inf, scores)
    weights = _softmax_lastaxis(scores)
    out = np.matmul(weights, v)
    return out, weights


def attention_backward(g_out, q, k, v, weights, causal):
    """Gradients of attention_forward w.r.t. q, k, v.

    Masked positions carry zero weight, so no explicit re-masking is
    needed: their score gradient vanishes through the softmax jacobian.
    """
    hd = q.shape[2]
    scale = 1.0 / math.sqrt(hd)
    g_weights = np.matmul(g_out, np.swapaxes(v, 1, 2))
    g_v = np.matmul(np.swapaxes(weights, 1, 2), g_out)
    inner = np.sum(g_weights * weights, axis=-1, keepdims=True)
    g_scores = weights * (g_weights - inner)
    g_q = np.matmul(g_scores, k) * scale
    g_k = np.matmul(np.swapaxes(g_scores, 1, 2), q) * scale
    return g_q, g_k, g_v


def layer_norm_forward(x, gain, bias, eps):
    """Row-wise layer normalization; returns (y, mean, rstd)."""
    mean = x.mean(axis=-1)
    xc = x - mean[:, None]
    var = np.mean(xc * xc, axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gain + bias
    return y, mean, rstd


def layer_norm_backward(g, x, gain, mean, rstd):
    """Gradients of layer_norm_forward w.r.t. x, gain, bias."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    g_xhat = g * gain
    m1 = g_xhat.mean(axis=-1, keepdims=True)
    m2 = np.mean(g_xhat * xhat, axis=-1, keepdims=True)
    g_x = rstd[:, None] * (g_xhat - m1 - xhat * m2)
    g_gain = np.sum(g * xhat, axis=0)
    g_bias = np.sum(g, axis=0)
    return g_x, g_gain, g_bias


def csr_matmul(indptr, indices, data, n_cols, dense):
    """(CSR matrix) @ (dense matrix) without densifying the left operand."""
    n_rows = len(indptr) - 1
    mat = sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols))
    return np.asarray(mat @ dense)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One Adam update on flat float64 views, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
