"""Numpy implementations of the numeric kernels.

This is the fallback backend; `eepipe._ckernels` provides the same functions
as a compiled extension.  Both operate on contiguous float64 arrays and share
one contract:

- 2-d kernels (rmsnorm, softmax, cross-entropy, row-stable matmul) treat the
  leading axis as independent rows.
- attention kernels take (batch, heads, seq, head_dim) arrays and apply a
  causal mask.
- backward kernels take whatever the forward cached and the upstream gradient,
  and return input gradients of matching shapes.

`dot_rows` must accumulate along the reduction axis in ascending index order
for every row, independent of how many rows are in the call.  The inference
paths rely on this to make batched and one-position-at-a-time forward passes
bitwise identical.
"""

import numpy as np
from scipy.special import erf

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * INV_SQRT2))


def gelu_bwd(x, gout):
    phi = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return gout * (0.5 * (1.0 + erf(x * INV_SQRT2)) + x * phi)


def rmsnorm_fwd(x, w, eps):
    """x: (n, h), w: (h,).  Returns (y, inv_rms) with inv_rms cached for bwd."""
    ms = np.mean(x * x, axis=1)
    inv_rms = 1.0 / np.sqrt(ms + eps)
    y = x * inv_rms[:, None] * w[None, :]
    return y, inv_rms


def rmsnorm_bwd(x, w, inv_rms, gout):
    h = x.shape[1]
    gw = np.sum(gout * x * inv_rms[:, None], axis=0)
    gwx = np.sum(gout * w[None, :] * x, axis=1)
    gx = gout * w[None, :] * inv_rms[:, None] - x * (inv_rms**3 * gwx / h)[:, None]
    return gx, gw


def softmax_fwd(x):
    """Row-wise softmax over the last axis of a 2-d array."""
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_bwd(p, gout):
    dot = np.sum(p * gout, axis=1, keepdims=True)
    return p * (gout - dot)


def cross_entropy_fwd(logits, targets):
    """Mean negative log-likelihood over rows.

    logits: (n, V), targets: (n,) int64.  Returns (loss, probs); probs are
    cached for the backward pass.
    """
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    n = logits.shape[0]
    logp = (logits - m) - np.log(z)
    loss = -np.sum(logp[np.arange(n), targets]) / n
    return loss, probs


def cross_entropy_bwd(probs, targets, gout):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), targets] -= 1.0
    g *= gout / n
    return g


def attention_fwd(q, k, v, scale):
    """Causal scaled dot-product attention.

    q, k, v: (B, H, S, D).  Returns (out, probs) with probs (B, H, S, S)
    cached for the backward pass; masked entries of probs are exactly zero.
    """
    s = q.shape[2]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores[..., mask] = -np.inf
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / np.sum(e, axis=-1, keepdims=True)
    out = np.matmul(probs, v)
    return out, probs


def attention_bwd(q, k, v, probs, scale, gout):
    gv = np.matmul(np.swapaxes(probs, -1, -2), gout)
    gprobs = np.matmul(gout, np.swapaxes(v, -1, -2))
    dot = np.sum(probs * gprobs, axis=-1, keepdims=True)
    gscores = probs * (gprobs - dot)
    gq = np.matmul(gscores, k) * scale
    gk = np.matmul(np.swapaxes(gscores, -1, -2), q) * scale
    return gq, gk, gv


def dot_rows(a, b):
    """Row-stable matmul: (m, k) @ (k, n) with a fixed k-order per element.

    np.einsum without `optimize` reduces along k in ascending order for each
    output element, so results do not depend on m.
    """
    return np.einsum("mk,kn->mn", a, b, optimize=False)
