"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: nine forward operations (enough to express
a decoder-only transformer with exit heads), one linear-form primitive used
by the stage-local surrogate losses, and a single-use tape per forward pass.
It doubles as the single-device gradient oracle that the pipeline executor
is checked against, so clarity beats cleverness throughout.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError, TapeError, TokenError

# Tapes are confined to one worker at a time; each thread has its own stack.
_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense row-major float64 value, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Used as a context manager; ops executed inside record a node whenever one
    of their inputs requires a gradient.  A tape can be replayed backward
    exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, inputs, output, backward_fn):
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

        Returns a dict keyed by leaf Tensor; leaves not reachable from the
        loss get zeros.  Also adds into each leaf's ``.grad``.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        if loss._tape is not self:
            raise TapeError("loss is not connected to this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        produced = {id(n.output) for n in self.nodes}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            for tensor, g in node.backward_fn(gout):
                key = id(tensor)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = g

        result: dict[Tensor, np.ndarray] = {}
        seen = set()
        for node in self.nodes:
            for t in node.inputs:
                if id(t) in seen or not t.requires_grad or id(t) in produced:
                    continue
                seen.add(id(t))
                g = grads.get(id(t))
                if g is None:
                    g = np.zeros_like(t.data)
                else:
                    g = g.reshape(t.data.shape)
                result[t] = g
                t.grad = g if t.grad is None else t.grad + g
        return result


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make_output(data, inputs, backward_fn, what):
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """a @ b with a of shape (..., k) and b of shape (k, n) or (n, k)."""
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects (..., k) @ 2-d, got {a.shape} @ {b.shape}")
    bmat = b.data.T if transpose_b else b.data
    if a.data.shape[-1] != bmat.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    lead = a.data.shape[:-1]
    a2 = a.data.reshape(-1, a.data.shape[-1])
    out2 = a2 @ bmat

    def backward_fn(gout):
        g2 = gout.reshape(-1, out2.shape[-1])
        grads = []
        if a.requires_grad:
            grads.append((a, (g2 @ bmat.T).reshape(a.data.shape)))
        if b.requires_grad:
            gb = a2.T @ g2
            grads.append((b, gb.T if transpose_b else gb))
        return grads

    return _make_output(out2.reshape(lead + (bmat.shape[1],)), (a, b), backward_fn, "matmul output")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may broadcast over a's leading axes."""
    if b.data.shape != a.data.shape and b.data.shape != a.data.shape[-b.data.ndim:]:
        raise ShapeError(f"add shapes do not conform: {a.shape} + {b.shape}")
    lead = a.data.ndim - b.data.ndim

    def backward_fn(gout):
        grads = []
        if a.requires_grad:
            grads.append((a, gout.copy()))
        if b.requires_grad:
            gb = gout.sum(axis=tuple(range(lead))) if lead else gout.copy()
            grads.append((b, gb))
        return grads

    return _make_output(a.data + b.data, (a, b), backward_fn, "add output")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(gout):
        return [(x, gout * c)]

    return _make_output(x.data * c, (x,), backward_fn, "scale output")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of table (V, h) at integer ids; output ids.shape + (h,)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TokenError("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise TokenError(f"token id out of range [0, {v})")

    def backward_fn(gout):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), gout.reshape(-1, table.data.shape[1]))
        return [(table, gt)]

    return _make_output(table.data[ids], (table,), backward_fn, "embedding output")


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if weight.data.ndim != 1 or x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(f"rmsnorm shapes do not conform: {x.shape}, {weight.shape}")
    h = x.data.shape[-1]
    x2 = x.data.reshape(-1, h)
    y2, inv_rms = kernels.rmsnorm_fwd(x2, weight.data, eps)

    def backward_fn(gout):
        gx2, gw = kernels.rmsnorm_bwd(x2, weight.data, inv_rms, gout.reshape(-1, h))
        grads = []
        if x.requires_grad:
            grads.append((x, gx2.reshape(x.data.shape)))
        if weight.requires_grad:
            grads.append((weight, gw))
        return grads

    return _make_output(y2.reshape(x.data.shape), (x, weight), backward_fn, "rmsnorm output")


def softmax(x: Tensor) -> Tensor:
    k = x.data.shape[-1]
    p2 = kernels.softmax_fwd(x.data.reshape(-1, k))

    def backward_fn(gout):
        gx2 = kernels.softmax_bwd(p2, gout.reshape(-1, k))
        return [(x, gx2.reshape(x.data.shape))]

    return _make_output(p2.reshape(x.data.shape), (x,), backward_fn, "softmax output")


def gelu(x: Tensor) -> Tensor:
    def backward_fn(gout):
        return [(x, kernels.gelu_bwd(x.data, gout))]

    return _make_output(kernels.gelu_fwd(x.data), (x,), backward_fn, "gelu output")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Multi-head causal self-attention over (batch, seq, hidden) inputs.

    Head split/merge happens inside the op so the tape only sees hidden-state
    shaped tensors.
    """
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError("attention q/k/v shapes differ")
    if q.data.ndim != 3:
        raise ShapeError(f"attention expects (batch, seq, hidden), got {q.shape}")
    bsz, seq, hid = q.data.shape
    if hid % num_heads:
        raise ShapeError(f"hidden dim {hid} not divisible by {num_heads} heads")
    dh = hid // num_heads

    def split(arr):
        return np.ascontiguousarray(arr.reshape(bsz, seq, num_heads, dh).transpose(0, 2, 1, 3))

    def merge(arr):
        return np.ascontiguousarray(arr.transpose(0, 2, 1, 3).reshape(bsz, seq, hid))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    sc = 1.0 / np.sqrt(dh)
    out_h, probs = kernels.attention_fwd(qh, kh, vh, sc)

    def backward_fn(gout):
        gq, gk, gv = kernels.attention_bwd(qh, kh, vh, probs, sc, split(gout))
        grads = []
        for t, g in ((q, gq), (k, gk), (v, gv)):
            if t.requires_grad:
                grads.append((t, merge(g)))
        return grads

    return _make_output(merge(out_h), (q, k, v), backward_fn, "attention output")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token NLL; targets is an int array over logits' leading axes."""
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise TokenError("cross-entropy targets must be integers")
    vocab = logits.data.shape[-1]
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    t1 = targets.ravel().astype(np.int64)
    if t1.size == 0:
        raise ShapeError("cross-entropy over an empty batch")
    if t1.min() < 0 or t1.max() >= vocab:
        raise TokenError(f"target id out of range [0, {vocab})")
    l2 = logits.data.reshape(-1, vocab)
    loss, probs = kernels.cross_entropy_fwd(l2, t1)

    def backward_fn(gout):
        g2 = kernels.cross_entropy_bwd(probs, t1, float(gout))
        return [(logits, g2.reshape(logits.data.shape))]

    return _make_output(np.float64(loss), (logits,), backward_fn, "cross-entropy loss")


def dot_const(x: Tensor, g) -> Tensor:
    """⟨g, x⟩ with g a constant array: d/dx is exactly g (bitwise).

    This is the linear term of the stage-local surrogate loss; no gradient is
    ever computed with respect to g.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.shape != x.data.shape:
        raise ShapeError(f"dot_const shapes differ: {x.shape} vs {g.shape}")

    def backward_fn(gout):
        go = float(gout)
        return [(x, g.copy() if go == 1.0 else g * go)]

    val = np.float64(np.dot(x.data.ravel(), g.ravel()))
    return _make_output(val, (x,), backward_fn, "dot_const output")


_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs, **attrs),
    "add": lambda inputs, attrs: add(*inputs, **attrs),
    "scale": lambda inputs, attrs: scale(*inputs, **attrs),
    "embedding-lookup": lambda inputs, attrs: embedding_lookup(*inputs, **attrs),
    "rmsnorm": lambda inputs, attrs: rmsnorm(*inputs, **attrs),
    "softmax": lambda inputs, attrs: softmax(*inputs, **attrs),
    "gelu": lambda inputs, attrs: gelu(*inputs, **attrs),
    "causal-attention": lambda inputs, attrs: causal_attention(*inputs, **attrs),
    "cross-entropy": lambda inputs, attrs: cross_entropy(*inputs, **attrs),
}


def op_forward(kind: str, inputs, attrs=None) -> Tensor:
    """Dispatch one of the supported op kinds by name."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    return _OPS[kind](list(inputs), dict(attrs or {}))


def backward(loss: Tensor):
    """Run the backward pass of the tape that produced ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not connected to any tape")
    return loss._tape.backward(loss)


def finite_difference_check(f, x: Tensor, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor and must be deterministic.  The error
    per coordinate is |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    grad_map = tape.backward(out)
    analytic = grad_map.get(probe)
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    flat = x.data.ravel()
    central = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor(bumped.reshape(x.data.shape))).item()
        central[i] = (hi - lo) / (2.0 * eps)

    a = analytic.ravel()
    err = np.abs(a - central) / (np.abs(a) + np.abs(central) + 1e-12)
    return float(err.max()) if err.size else 0.0
