"""Dense float64 tensors with tape-style reverse-mode autodiff.

Every op that touches a tensor with ``requires_grad`` records a node carrying a
monotonically increasing id. ``backward`` collects the nodes reachable from the
loss and replays them in strictly decreasing id order, so the implicit graph is
topological by construction and rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
from collections import Counter
from contextlib import contextmanager

import numpy as np

KL_EPS = 1e-12

_node_ids = itertools.count()
_grad_enabled = True

# incremented per forward op; read by tests that check how often the body runs
op_counter: Counter = Counter()


class NumericError(ArithmeticError):
    """Non-finite values or invalid probabilities."""


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class LabelError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("id", "op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out_data, backward_fn):
    op_counter[op] += 1
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._node = Node(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- graph


def trace(loss):
    """Nodes reachable from ``loss`` in recording order."""
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.inputs)
    return [seen[i] for i in sorted(seen)]


def backward(loss):
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(trace(loss)):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.data + b.data, bw)


def mul(a, c):
    """Scale by a constant or multiply elementwise by another tensor."""
    a = _as_tensor(a)
    if isinstance(c, Tensor):
        sa, sc = a.shape, c.shape
        ad, cd = a.data, c.data

        def bw(g):
            return _unbroadcast(g * cd, sa), _unbroadcast(g * ad, sc)

        return _record("mul", (a, c), ad * cd, bw)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def sum(x):
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    shape = x.shape
    return _record("mean", (x,), np.array(x.data.sum() / n), lambda g: (np.full(shape, g / n),))


def relu(x):
    mask = x.data > 0
    return _record("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def reshape(x, shape):
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, bw)


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if k > size + 2 * pad:
        raise ConfigurationError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral output size: ({size}+2*{pad}-{k})/{stride}+1"
        )
    return span // stride + 1


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation of x[B,C,H,W] with w[F,C,kh,kw] plus bias b[F]."""
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {list(x.shape)}, weight {list(w.shape)}")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    # cols[b, c, u, v, i, j] = xp[b, c, i*stride + u, j*stride + v]
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + he:stride, v:v + we:stride]
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # B,Ho,Wo,F
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    wd = w.data

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # F,C,kh,kw
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.tensordot(wd, g, axes=([0], [1]))  # C,kh,kw,B,Ho,Wo
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + he:stride, v:v + we:stride] += gcols[:, u, v].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    return _record("conv2d", (x, w, b), np.ascontiguousarray(out), bw)


def maxpool2d(x, k, stride=None):
    stride = k if stride is None else stride
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ConfigurationError(f"pool window {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    win = np.empty((B, C, Ho, Wo, k * k))
    for u in range(k):
        for v in range(k):
            win[..., u * k + v] = x.data[:, :, u:u + he:stride, v:v + we:stride]
    arg = win.argmax(axis=-1)  # first index on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((B, C, H, W))
        for u in range(k):
            for v in range(k):
                gx[:, :, u:u + he:stride, v:v + we:stride] += np.where(arg == u * k + v, g, 0.0)
        return (gx,)

    return _record("maxpool2d", (x,), out, bw)


# ---------------------------------------------------------------- probabilities and losses


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(q):
    if q.data.ndim != 2 or q.shape[1] < 1:
        raise DimensionError(f"softmax expects [B,M] with M >= 1, got {list(q.shape)}")
    _check_finite(q.data, "softmax logits")
    e = np.exp(q.data - q.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax", (q,), s, bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    z = logits.data
    B, M = z.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    bad = np.flatnonzero((labels < 0) | (labels >= M))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]} out of range [0,{M}) at sample {i}")
    _check_finite(z, "cross_entropy logits")
    labels = labels.astype(np.int64)
    logp = _log_softmax(z)
    rows = np.arange(B)
    loss = -logp[rows, labels].sum() / B

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return _record("cross_entropy", (logits,), np.array(loss), bw)


def _check_probs(p, what):
    _check_finite(p, what)
    if np.any(p < 0):
        raise NumericError(f"negative probability in {what}")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise NumericError(f"rows of {what} do not sum to 1")


def kl_divergence(p, q):
    """Batch-mean KL(p || q); q is clamped below at KL_EPS, as is p inside the log."""
    if p.shape != q.shape or p.data.ndim != 2:
        raise DimensionError(f"kl_divergence shape mismatch: {list(p.shape)} vs {list(q.shape)}")
    _check_probs(p.data, "kl_divergence p")
    _check_probs(q.data, "kl_divergence q")
    B = p.shape[0]
    pd, qd = p.data, q.data
    logp = np.log(np.maximum(pd, KL_EPS))
    logq = np.log(np.maximum(qd, KL_EPS))
    val = (pd * (logp - logq)).sum() / B

    def bw(g):
        gp = (logp - logq + (pd > KL_EPS)) * (g / B)
        gq = np.where(qd > KL_EPS, -pd / np.maximum(qd, KL_EPS), 0.0) * (g / B)
        return gp, gq

    return _record("kl_divergence", (p, q), np.array(val), bw)
