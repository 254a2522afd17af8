#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the hot per-microbatch kernels at desk scale plus one full training
iteration per backend.  Run after an editable install:

    python3 benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from eepipe import _pykernels as pk

try:
    from eepipe import _ckernels as ck
except ImportError:
    ck = None


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def kernel_cases(rng, batch=2, heads=4, seq=64, hidden=64, vocab=256):
    n = batch * seq
    dh = hidden // heads
    x2 = rng.normal(size=(n, hidden))
    w = rng.normal(size=hidden)
    gout = rng.normal(size=(n, hidden))
    logits = rng.normal(size=(n, vocab))
    targets = rng.integers(0, vocab, size=n)
    q = rng.normal(size=(batch, heads, seq, dh))
    k = rng.normal(size=(batch, heads, seq, dh))
    v = rng.normal(size=(batch, heads, seq, dh))
    gattn = rng.normal(size=(batch, heads, seq, dh))
    scale = 1.0 / np.sqrt(dh)
    a_small = rng.normal(size=(4, hidden))
    bT = rng.normal(size=(hidden, vocab))

    def attn_pair(impl):
        out, probs = impl.attention_fwd(q, k, v, scale)
        impl.attention_bwd(q, k, v, probs, scale, gattn)

    def ce_pair(impl):
        _, probs = impl.cross_entropy_fwd(logits, targets)
        impl.cross_entropy_bwd(probs, targets, 1.0)

    return [
        ("gelu fwd+bwd", lambda impl: (impl.gelu_fwd(x2), impl.gelu_bwd(x2, gout))),
        ("rmsnorm fwd+bwd", lambda impl: impl.rmsnorm_bwd(
            x2, w, impl.rmsnorm_fwd(x2, w, 1e-6)[1], gout)),
        ("softmax fwd", lambda impl: impl.softmax_fwd(logits)),
        ("cross-entropy fwd+bwd", ce_pair),
        ("attention fwd+bwd", attn_pair),
        ("dot_rows 4x64 @ 64x256", lambda impl: impl.dot_rows(a_small, bT)),
    ]


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, case in kernel_cases(rng):
        t_py = timeit(lambda: case(pk), repeats)
        t_c = timeit(lambda: case(ck), repeats) if ck else float("nan")
        rows.append((name, t_py, t_c))
    return rows


def bench_train_step(backend, steps=3):
    import importlib
    import os

    os.environ["EEPIPE_BACKEND"] = backend
    for mod in ("eepipe.kernels", "eepipe.autodiff", "eepipe.model", "eepipe.pipeline"):
        importlib.reload(importlib.import_module(mod))
    from eepipe.model import ExitSpec, ModelConfig, build_model, partition
    from eepipe.pipeline import IterationOptions, run_iteration_1f1b

    cfg = ModelConfig(8, 64, 4, 256, 64,
                      exits=(ExitSpec(2, loss_weight=0.25), ExitSpec(4, loss_weight=0.5)))
    model = build_model(cfg, 0)
    part = partition(model, 4)
    batch = np.random.default_rng(1).integers(0, 256, size=(8, 33))
    opts = IterationOptions(microbatch_size=2)
    run_iteration_1f1b(part, batch, opts)  # warm up
    t0 = time.perf_counter()
    for _ in range(steps):
        run_iteration_1f1b(part, batch, opts)
    return (time.perf_counter() - t0) / steps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--skip-train-step", action="store_true")
    args = ap.parse_args()

    if ck is None:
        print("compiled kernels not built; showing numpy fallback only\n")
    print(f"{'kernel':<26} {'numpy':>12} {'compiled':>12} {'speedup':>9}")
    for name, t_py, t_c in bench_kernels(args.repeats):
        ratio = t_py / t_c if t_c == t_c and t_c > 0 else float("nan")
        print(f"{name:<26} {t_py * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us {ratio:>8.2f}x")

    if not args.skip_train_step:
        print()
        t_py = bench_train_step("python")
        line = f"{'full 1F1B iteration':<26} {t_py * 1e3:>10.1f}ms"
        if ck is not None:
            t_c = bench_train_step("compiled")
            line += f" {t_c * 1e3:>10.1f}ms {t_py / t_c:>8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
