"""Shared test utilities: finite differences and tiny fixtures."""

import numpy as np


def fd_gradient(loss_fn, array, eps=1e-6):
    """Central finite differences of a scalar-valued loss_fn over array."""
    flat = array.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(array.shape)


def max_rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def assert_grad_close(loss_builder, tensors, eps=1e-6, tol=1e-5):
    """Compare tape gradients against finite differences for each tensor.

    loss_builder must rebuild the forward graph from the tensors' current
    values on every call.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_builder()
    loss.backward()
    for t in tensors:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.value)
        numeric = fd_gradient(lambda: loss_builder().item(), t.value, eps)
        err = max_rel_err(analytic, numeric)
        assert err < tol, f"gradient mismatch {err} for tensor of shape {t.shape}"
