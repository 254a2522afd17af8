"""Shared builders for gradient-check test cases."""

import zlib

import numpy as np

from eepipe.autodiff import (
    Tensor,
    add,
    causal_attention,
    cross_entropy,
    dot_const,
    embedding_lookup,
    gelu,
    matmul,
    rmsnorm,
    scale,
    softmax,
)

OP_KINDS = (
    "matmul", "add", "scale", "embedding-lookup", "rmsnorm", "softmax",
    "gelu", "causal-attention", "cross-entropy",
)


def seed_for(kind):
    """Stable per-kind RNG seed (unlike hash(), identical across processes)."""
    return zlib.crc32(kind.encode())


def covec(rng, shape):
    """Covector with entries bounded away from zero, so the per-coordinate
    relative-error metric never divides two near-zero quantities."""
    return np.sign(rng.normal(size=shape)) * (0.5 + np.abs(rng.normal(size=shape)))


def gelu_probe(rng, shape):
    # gelu' has a root near x = -0.752 and decays to zero for large |x|;
    # keep trial points off those ill-conditioned regions.
    x = rng.uniform(-1.8, 1.8, size=shape)
    x[np.abs(x + 0.752) < 0.25] += 0.6
    return x


def op_cases(rng):
    """(probe array, scalar-valued closure) per op kind."""
    h, heads = 8, 2
    w = Tensor(rng.normal(size=(h, 5)))
    nw = Tensor(rng.normal(1.0, 0.1, size=h))
    cvec5 = covec(rng, (2, 3, 5))
    cvec = covec(rng, (2, 3, h))
    cmat = covec(rng, (2, 3, h))
    ids = rng.integers(0, 4, size=(2, 3))
    tgt = rng.integers(0, 5, size=(2, 3))
    bias = Tensor(rng.normal(size=h))
    normal = rng.normal

    return {
        "matmul": (normal(size=(2, 3, h)), lambda x: dot_const(matmul(x, w), cvec5)),
        "add": (normal(size=(2, 3, h)), lambda x: dot_const(add(x, bias), cvec)),
        "scale": (normal(size=(2, 3, h)), lambda x: dot_const(scale(x, -1.7), cvec)),
        "embedding-lookup": (
            normal(size=(4, h)),
            lambda x: dot_const(embedding_lookup(x, ids), cmat),
        ),
        "rmsnorm": (normal(size=(2, 3, h)), lambda x: dot_const(rmsnorm(x, nw), cvec)),
        "softmax": (normal(size=(2, 3, h)), lambda x: dot_const(softmax(x), cvec)),
        "gelu": (gelu_probe(rng, (2, 3, h)), lambda x: dot_const(gelu(x), cvec)),
        "causal-attention": (
            normal(size=(2, 3, h)),
            lambda x: dot_const(causal_attention(x, x, x, heads), cvec),
        ),
        "cross-entropy": (normal(size=(2, 3, 5)), lambda x: cross_entropy(x, tgt)),
    }
