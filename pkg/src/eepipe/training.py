"""Optimizers and the iteration-driving training loop.

The monolithic model is the source of truth: every step partitions it afresh
(stage workers get parameter copies), runs one 1F1B iteration, merges the
synchronized gradients, and applies the optimizer to the monolithic
parameters in sorted name order.  Metrics go to a line-delimited file whose
first record is a header.
"""

from __future__ import annotations

import json
import time

import numpy as np

from .bubblefill import plan_bubble_fill, truncated_part1_depths
from .errors import ConfigError, NonFiniteError
from .model import build_model, partition
from .pipeline import IterationOptions, run_iteration_1f1b
from .schedule import peak_memory


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads, scale):
        for name in sorted(grads):
            params[name].data -= self.lr * scale * grads[name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params, grads, scale):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for name in sorted(grads):
            g = grads[name] * scale
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            params[name].data -= self.lr * correction * m / (np.sqrt(v) + self.eps)


def make_optimizer(kind, lr):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def train(run_cfg, corpus, metrics_path=None, progress=None):
    """Train per the run configuration; returns (model, history).

    history is the list of per-step metric records (also written to
    ``metrics_path`` as line-delimited JSON after a header record).
    """
    model = build_model(run_cfg.model, run_cfg.seed)
    optimizer = make_optimizer(run_cfg.optimizer, run_cfg.learning_rate)
    rows_per_step = run_cfg.global_batch_size
    num_mb = rows_per_step // run_cfg.microbatch_size
    row_len = run_cfg.data_seq_len + 1

    plan = None
    n_fill = 0
    if run_cfg.fill_bubbles:
        plan = plan_bubble_fill(run_cfg.stages, run_cfg.fill_f_over_b)
        part_probe = partition(model, run_cfg.stages)
        depths = truncated_part1_depths(plan, part_probe.exit_stages())
        n_fill = sum(1 for d in depths if d is not None) + plan.k_part2

    head_keys = None
    history = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(run_cfg.steps):
            part = partition(model, run_cfg.stages)
            batch = corpus.batch(rows_per_step, row_len, step)
            fill_batch = None
            if plan is not None and not plan.empty and n_fill:
                fill_batch = corpus.batch(
                    n_fill * run_cfg.microbatch_size, row_len, step + 10**9
                )
            opts = IterationOptions(
                microbatch_size=run_cfg.microbatch_size,
                defer_exit_forward=run_cfg.defer_exit_forward,
                fill_plan=plan,
                fill_batch=fill_batch,
                weight_schedule=run_cfg.weight_schedule(),
                step=step,
            )
            t0 = time.perf_counter()
            grads, report = run_iteration_1f1b(part, batch, opts)
            if not all(np.isfinite(v) for v in report.per_exit_losses.values()):
                raise NonFiniteError(f"non-finite loss at step {step}")
            optimizer.step(model.params, grads, 1.0 / num_mb)
            elapsed = time.perf_counter() - t0

            if head_keys is None:
                head_keys = list(report.per_exit_losses)
                _write(fh, {"record": "header", "heads": head_keys,
                            "steps": run_cfg.steps, "seed": run_cfg.seed})
            mem = peak_memory(report.timeline.cost, report.timeline.variant,
                              report.timeline.fill_plan, report.timeline)
            rec = {
                "record": "step",
                "step": step,
                "losses": {k: report.per_exit_losses[k] for k in head_keys},
                "time": elapsed,
                "peak_memory_units": {m.stage: m.total_units for m in mem},
                "microbatches": report.microbatches,
                "weights": list(report.weights_used),
            }
            history.append(rec)
            _write(fh, rec)
            if progress is not None:
                progress(rec)
        if head_keys is None:  # steps == 0: header only
            _write(fh, {"record": "header", "heads": [], "steps": 0,
                        "seed": run_cfg.seed})
    finally:
        if fh:
            fh.close()
    return model, history


def _write(fh, record):
    if fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def trailing_average(values, window):
    """Mean of the last `window` entries at each step (shorter at the start)."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out
