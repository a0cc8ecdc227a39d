"""Numeric kernel backends.

The hot inner loops (attention, layer norm, sparse propagation, Adam) are
implemented twice: a Cython extension (``_compiled``) and a numpy reference
(``reference``). The extension is preferred when importable; set
``BUNDLEGEN_KERNELS=python`` or ``=compiled`` to force a backend. All other
numeric work stays in plain numpy on both paths.
"""

import os

from bundlegen.kernels import reference

_BACKENDS = {"python": reference}

try:
    from bundlegen.kernels import _compiled

    _BACKENDS["compiled"] = _compiled
except ImportError:
    _compiled = None


def _select_initial():
    requested = os.environ.get("BUNDLEGEN_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(
                f"BUNDLEGEN_KERNELS={requested!r} but available backends are "
                f"{sorted(_BACKENDS)}"
            )
        return _BACKENDS[requested]
    return _BACKENDS.get("compiled", reference)


_active = _select_initial()


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active.name


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise KeyError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}")


def use_backend(name):
    """Switch the active backend (tests and benchmarks only)."""
    global _active
    _active = get_backend(name)


def attention_forward(q, k, v, causal):
    return _active.attention_forward(q, k, v, causal)


def attention_backward(g_out, q, k, v, weights, causal):
    return _active.attention_backward(g_out, q, k, v, weights, causal)


def layer_norm_forward(x, gain, bias, eps):
    return _active.layer_norm_forward(x, gain, bias, eps)


def layer_norm_backward(g, x, gain, mean, rstd):
    return _active.layer_norm_backward(g, x, gain, mean, rstd)


def csr_matmul(indptr, indices, data, n_cols, dense):
    return _active.csr_matmul(indptr, indices, data, n_cols, dense)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    return _active.adam_step(param, grad, m, v, t, lr, beta1, beta2, eps)
