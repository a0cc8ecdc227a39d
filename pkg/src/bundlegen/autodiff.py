"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Forward computations build a DAG of ``Tensor`` nodes; calling ``backward()``
on a scalar loss walks the graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``. The op set
is deliberately small: exactly what the embedding propagation, transformer
generator, and triplet losses need. Fused ops (attention, layer_norm) defer
to the kernel backend; everything else is plain numpy.
"""

from __future__ import annotations

import numpy as np

from bundlegen import kernels


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad=False, _parents=(), _backprop=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backprop = _backprop

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar; accumulates into .grad fields."""
        if self.value.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Parents-first ordering of the requires_grad subgraph under root."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def constant(value):
    return Tensor(value)


def parameter(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _op(value, parents, backprop):
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _backprop=backprop)
    return Tensor(value)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _op(a.value + b.value, (a, b), backprop)


def sub(a, b):
    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    return _op(a.value - b.value, (a, b), backprop)


def mul(a, b):
    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _op(a.value * b.value, (a, b), backprop)


def scale(a, c):
    c = float(c)

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _op(a.value * c, (a,), backprop)


def add_n(tensors):
    """Sum of same-shaped tensors (flat, not a reduce chain)."""
    tensors = list(tensors)
    value = tensors[0].value.copy()
    for t in tensors[1:]:
        value += t.value

    def backprop(g):
        for t in tensors:
            if t.requires_grad:
                t._accumulate(g)

    return _op(value, tensors, backprop)


def matmul(a, b):
    def backprop(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _op(a.value @ b.value, (a, b), backprop)


def relu(a):
    mask = a.value > 0.0

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _op(a.value * mask, (a,), backprop)


def softplus(a):
    """log(1 + exp(x)), numerically stable for large |x|."""
    x = a.value
    value = np.logaddexp(0.0, x)

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-x)))

    return _op(value, (a,), backprop)


def sum_all(a):
    def backprop(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.value, float(g)))

    return _op(a.value.sum(), (a,), backprop)


def mean_all(a):
    n = a.value.size

    def backprop(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.value, float(g) / n))

    return _op(a.value.mean(), (a,), backprop)


def sumsq(a):
    """Sum of squared entries, in one op (used by the L2 regularizer)."""

    def backprop(g):
        if a.requires_grad:
            a._accumulate(2.0 * float(g) * a.value)

    return _op(np.sum(a.value * a.value), (a,), backprop)


def rowdot(a, b):
    """Per-row dot product of two (n, d) tensors -> (n,)."""

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * b.value)
        if b.requires_grad:
            b._accumulate(g[:, None] * a.value)

    return _op(np.sum(a.value * b.value, axis=1), (a, b), backprop)


def gather_rows(a, idx):
    """Row selection a[idx]; backward scatter-adds (repeated indices ok)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backprop(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _op(a.value[idx], (a,), backprop)


def split_heads(a, n_heads):
    """(m, d) -> (H, m, d/H) view for head-stacked attention."""
    m, d = a.value.shape
    hd = d // n_heads
    value = np.ascontiguousarray(a.value.reshape(m, n_heads, hd).transpose(1, 0, 2))

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g.transpose(1, 0, 2).reshape(m, d))

    return _op(value, (a,), backprop)


def merge_heads(a):
    """(H, m, hd) -> (m, H*hd), inverse of split_heads."""
    n_heads, m, hd = a.value.shape
    value = a.value.transpose(1, 0, 2).reshape(m, n_heads * hd)

    def backprop(g):
        if a.requires_grad:
            a._accumulate(
                np.ascontiguousarray(g.reshape(m, n_heads, hd).transpose(1, 0, 2))
            )

    return _op(value, (a,), backprop)


def attention(q, k, v, causal=False):
    """Fused scaled dot-product attention on (H, seq, head_dim) tensors."""
    qv = np.ascontiguousarray(q.value)
    kv = np.ascontiguousarray(k.value)
    vv = np.ascontiguousarray(v.value)
    out, weights = kernels.attention_forward(qv, kv, vv, causal)

    def backprop(g):
        gq, gk, gv = kernels.attention_backward(
            np.ascontiguousarray(g), qv, kv, vv, weights, causal
        )
        if q.requires_grad:
            q._accumulate(gq)
        if k.requires_grad:
            k._accumulate(gk)
        if v.requires_grad:
            v._accumulate(gv)

    return _op(out, (q, k, v), backprop)


def layer_norm(x, gain, bias, eps=1e-5):
    xv = np.ascontiguousarray(x.value)
    y, mean, rstd = kernels.layer_norm_forward(xv, gain.value, bias.value, eps)

    def backprop(g):
        gx, ggain, gbias = kernels.layer_norm_backward(
            np.ascontiguousarray(g), xv, gain.value, mean, rstd
        )
        if x.requires_grad:
            x._accumulate(gx)
        if gain.requires_grad:
            gain._accumulate(ggain)
        if bias.requires_grad:
            bias._accumulate(gbias)

    return _op(y, (x, gain, bias), backprop)


def spmm(csr, csr_t, x):
    """Constant sparse matrix times dense tensor; csr_t is the transpose."""
    value = kernels.csr_matmul(
        csr.indptr, csr.indices, csr.data, csr.shape[1], x.value
    )

    def backprop(g):
        if x.requires_grad:
            x._accumulate(
                kernels.csr_matmul(
                    csr_t.indptr, csr_t.indices, csr_t.data, csr_t.shape[1], g
                )
            )

    return _op(value, (x,), backprop)


def l2_normalize_rows(a):
    """Rows scaled to unit Euclidean norm; all-zero rows stay zero."""
    norms = np.linalg.norm(a.value, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    y = a.value / safe[:, None]

    def backprop(g):
        if a.requires_grad:
            inner = np.sum(g * y, axis=1)
            ga = (g - y * inner[:, None]) / safe[:, None]
            ga[norms == 0.0] = 0.0
            a._accumulate(ga)

    return _op(y, (a,), backprop)


def cosine_rows(a, b):
    """Per-row cosine similarity of (n, d) tensors; zero rows score 0."""
    na = np.linalg.norm(a.value, axis=1)
    nb = np.linalg.norm(b.value, axis=1)
    dots = np.sum(a.value * b.value, axis=1)
    ok = (na > 0.0) & (nb > 0.0)
    sa = np.where(na > 0.0, na, 1.0)
    sb = np.where(nb > 0.0, nb, 1.0)
    cos = np.where(ok, dots / (sa * sb), 0.0)

    def backprop(g):
        gc = np.where(ok, g, 0.0)
        if a.requires_grad:
            ga = gc[:, None] * (
                b.value / (sa * sb)[:, None] - a.value * (cos / (sa * sa))[:, None]
            )
            a._accumulate(ga)
        if b.requires_grad:
            gb = gc[:, None] * (
                a.value / (sa * sb)[:, None] - b.value * (cos / (sb * sb))[:, None]
            )
            b._accumulate(gb)

    return _op(cos, (a, b), backprop)


def cross_entropy_logits(logits, targets):
    """Mean negative log-likelihood of targets under softmax(logits) rows."""
    targets = np.asarray(targets, dtype=np.intp)
    x = logits.value
    n = x.shape[0]
    mx = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - mx)
    z = np.sum(e, axis=1)
    log_probs_t = x[np.arange(n), targets] - mx[:, 0] - np.log(z)
    value = -np.mean(log_probs_t)

    def backprop(g):
        if logits.requires_grad:
            grad = e / z[:, None]
            grad[np.arange(n), targets] -= 1.0
            logits._accumulate(grad * (float(g) / n))

    return _op(value, (logits,), backprop)
