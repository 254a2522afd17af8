"""Synthetic token streams for convergence experiments.

A seeded Markov chain over the vocabulary: peaky Dirichlet transition rows
give the source low conditional entropy, so even small models can push the
next-token loss well below log(V).  Batches are a pure function of
(seed, step), which keeps whole training runs bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from scipy.special import xlogy

from .errors import ConfigError


class MarkovCorpus:
    def __init__(self, vocab_size: int, seed: int, concentration: float = 0.003):
        if vocab_size < 2:
            raise ConfigError("need at least two symbols")
        rng = np.random.default_rng([seed, 0xC0FFEE])
        self.vocab_size = vocab_size
        self.seed = seed
        alpha = np.full(vocab_size, concentration)
        self.transition = rng.dirichlet(alpha, size=vocab_size)
        self.initial = rng.dirichlet(np.full(vocab_size, 0.5))
        self._cum = np.cumsum(self.transition, axis=1)
        self._cum_init = np.cumsum(self.initial)

    def batch(self, rows: int, row_len: int, step: int) -> np.ndarray:
        """(rows, row_len) token ids, deterministic in (corpus seed, step)."""
        rng = np.random.default_rng([self.seed, step])
        out = np.empty((rows, row_len), dtype=np.int64)
        state = np.searchsorted(self._cum_init, rng.random(rows))
        out[:, 0] = state
        for t in range(1, row_len):
            u = rng.random(rows)
            state = (self._cum[state] > u[:, None]).argmax(axis=1)
            out[:, t] = state
        return out

    def entropy_floor(self) -> float:
        """Expected next-token NLL of the source under its stationary law."""
        p = self.transition
        h_rows = -np.sum(xlogy(p, p), axis=1)
        # stationary distribution via power iteration
        pi = np.full(self.vocab_size, 1.0 / self.vocab_size)
        for _ in range(200):
            pi = pi @ p
        return float(pi @ h_rows)


class TokenFileCorpus:
    """Whitespace-separated token ids, wrapped into rows round-robin."""

    def __init__(self, path, vocab_size: int):
        ids = np.loadtxt(path, dtype=np.int64).ravel()
        if ids.size == 0:
            raise ConfigError(f"{path} holds no tokens")
        if ids.min() < 0 or ids.max() >= vocab_size:
            raise ConfigError(f"{path} holds ids outside [0, {vocab_size})")
        self.ids = ids
        self.vocab_size = vocab_size

    def batch(self, rows: int, row_len: int, step: int) -> np.ndarray:
        n = self.ids.size
        start = (step * rows * row_len) % n
        idx = (start + np.arange(rows * row_len)) % n
        return self.ids[idx].reshape(rows, row_len)
