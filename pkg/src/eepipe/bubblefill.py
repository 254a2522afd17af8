"""Bubble filling: capacity formulas, gradient rescaling, estimator statistics.

Explicit-bubble capacity for each of the two fillable regions is
``K = floor((P-1) / (f/b + 1))`` microbatches; a Part-2 microbatch inserted
at position i runs a full forward pass and then backward through the last
``floor(P - i*(f/b + 1))`` stages.  After rescaling (loss weights for Part 1,
stage gradients for Part 2) the accumulated gradient stays an unbiased
estimate of the original objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_FLOOR_EPS = 1e-12  # guard against 2.9999999999999996-style float floors


def _floor(x: float) -> int:
    return int(np.floor(x + _FLOOR_EPS))


@dataclass(frozen=True)
class FillPlan:
    """Bubble-fill plan for one iteration.

    part1_fwd_depths[i-1] is the untruncated forward depth K+1-i of the i-th
    Part-1 microbatch (at apply time it is truncated to the deepest visited
    stage that has an early exit, or skipped if there is none).
    part2_bwd_depths[i-1] is the backward depth of the i-th Part-2 microbatch.
    """

    num_stages: int
    f_over_b: float
    k_part1: int
    k_part2: int
    part1_fwd_depths: tuple = ()
    part2_bwd_depths: tuple = ()

    @property
    def empty(self):
        return self.k_part1 == 0 and self.k_part2 == 0


def plan_bubble_fill(num_stages: int, f_over_b: float) -> FillPlan:
    if num_stages < 2:
        raise ConfigError("bubble filling needs at least 2 stages")
    if f_over_b <= 0:
        raise ConfigError("f/b ratio must be positive")
    k = _floor((num_stages - 1) / (f_over_b + 1.0))
    part1 = tuple(k + 1 - i for i in range(1, k + 1))
    part2 = tuple(_floor(num_stages - i * (f_over_b + 1.0)) for i in range(1, k + 1))
    assert all(r >= 1 for r in part2)  # guaranteed by the capacity formula
    return FillPlan(num_stages, f_over_b, k, k, part1, part2)


def truncated_part1_depths(plan: FillPlan, exit_stages) -> list:
    """Actual Part-1 forward depths given early-exit placement.

    Entry i is the deepest exit-bearing stage within the first
    part1_fwd_depths[i] stages, or None when the microbatch is skipped.
    """
    has_exit = set(exit_stages)
    out = []
    for depth in plan.part1_fwd_depths:
        cands = [s for s in range(1, depth + 1) if s in has_exit]
        out.append(max(cands) if cands else None)
    return out


def part1_loss_sample_counts(plan: FillPlan, exit_stages) -> dict:
    """How many extra samples each stage-local loss receives from Part 1."""
    counts: dict[int, int] = {}
    for d in truncated_part1_depths(plan, exit_stages):
        if d is None:
            continue
        for s in set(exit_stages):
            if s <= d:
                counts[s] = counts.get(s, 0) + 1
    return counts


def part2_stage_sample_counts(plan: FillPlan) -> dict:
    """How many extra samples each stage's gradient receives from Part 2."""
    counts: dict[int, int] = {}
    for r in plan.part2_bwd_depths:
        for s in range(plan.num_stages - r + 1, plan.num_stages + 1):
            counts[s] = counts.get(s, 0) + 1
    return counts


@dataclass(frozen=True)
class FillRescale:
    """Multipliers making the filled accumulated gradient unbiased.

    loss_weight_scale[stage] multiplies the weights of that stage's local
    exit losses in every microbatch (Part 1); grad_scale[stage] multiplies
    the stage's accumulated gradient (Part 2).
    """

    loss_weight_scale: dict = field(default_factory=dict)
    grad_scale: dict = field(default_factory=dict)

    def weight_scale_for(self, stage):
        return self.loss_weight_scale.get(stage, 1.0)

    def grad_scale_for(self, stage):
        return self.grad_scale.get(stage, 1.0)


def fill_rescale(plan: FillPlan, exit_stages, num_microbatches: int) -> FillRescale:
    b = num_microbatches
    m = part1_loss_sample_counts(plan, exit_stages)
    n = part2_stage_sample_counts(plan)
    return FillRescale(
        loss_weight_scale={s: b / (b + c) for s, c in m.items() if c},
        grad_scale={s: b / (b + c) for s, c in n.items() if c},
    )


# ---------------------------------------------------------------------------
# Estimator statistics for the extra-sample mean (Monte Carlo harness)
# ---------------------------------------------------------------------------


def predicted_variance_difference(n: int, var_a: float, cov_ab: float) -> float:
    """Closed form for var(e_hat) - var(e_hat_plus)."""
    return var_a / (n * (n + 1)) + 2.0 * cov_ab / (n * (n + 1))


def estimator_stats(trials, n, var_a=1.0, var_b=1.0, cov_ab=0.0,
                    mean_a=0.0, mean_b=0.0, seed=0, groups=100):
    """Monte Carlo comparison of e_hat = mean(a_1..N) + mean(b_1..N) against
    e_hat_plus = mean(a_1..N+1) + mean(b_1..N), where (a_i, b_i) pairs share
    a covariance.

    Returns a dict with empirical biases, the empirical variance difference,
    the closed-form prediction, and batched-mean standard errors (``groups``
    batches) for 3-sigma assertions.
    """
    if trials < 10**5:
        raise ConfigError("need at least 1e5 trials for stable statistics")
    cov = np.array([[var_a, cov_ab], [cov_ab, var_b]])
    if np.linalg.det(cov) < -1e-12 or var_a <= 0 or var_b <= 0:
        raise ConfigError("degenerate distribution spec")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov + 1e-15 * np.eye(2))

    per_group = trials // groups
    e_means, ep_means, e_vars, ep_vars, diffs = [], [], [], [], []
    for _ in range(groups):
        z = rng.standard_normal((per_group, n + 1, 2))
        ab = z @ chol.T
        a = ab[:, :, 0] + mean_a
        b = ab[:, : n, 1] + mean_b
        e = a[:, :n].mean(axis=1) + b.mean(axis=1)
        ep = a.mean(axis=1) + b.mean(axis=1)
        e_means.append(e.mean())
        ep_means.append(ep.mean())
        e_vars.append(e.var(ddof=1))
        ep_vars.append(ep.var(ddof=1))
        diffs.append(e.var(ddof=1) - ep.var(ddof=1))

    def mean_se(xs):
        xs = np.asarray(xs)
        return float(xs.mean()), float(xs.std(ddof=1) / np.sqrt(len(xs)))

    e_mean, e_mean_se = mean_se(e_means)
    ep_mean, ep_mean_se = mean_se(ep_means)
    diff, diff_se = mean_se(diffs)
    return {
        "target": mean_a + mean_b,
        "e_mean": e_mean,
        "e_mean_se": e_mean_se,
        "ep_mean": ep_mean,
        "ep_mean_se": ep_mean_se,
        "var_e": float(np.mean(e_vars)),
        "var_ep": float(np.mean(ep_vars)),
        "var_diff": diff,
        "var_diff_se": diff_se,
        "predicted_diff": predicted_variance_difference(n, var_a, cov_ab),
    }


# ---------------------------------------------------------------------------
# Linear-Gaussian toy: end-to-end check of the rescaled accumulated gradient
# ---------------------------------------------------------------------------


def toy_filled_iterations(plan: FillPlan, exit_stages, num_microbatches,
                          iterations, dim=3, seed=0, rescale=None):
    """Plain vs filled gradient accumulation on a linear-Gaussian surrogate.

    Loss-bearing stages are the exit stages plus the last stage.  The
    contribution of stage-j's local loss to stage-s parameters (j >= s) for
    microbatch data xi is the linear-Gaussian g_{s,j}(xi) = mu_{s,j} +
    beta_{s,j} * xi with entrywise-positive beta, so all loss-term
    contributions are non-negatively correlated per coordinate.

    A plain iteration accumulates all (s, j) terms over B i.i.d. microbatches.
    A filled iteration additionally draws one fresh microbatch per planned
    insertion: Part-1 insertions contribute the terms with j <= its truncated
    depth, Part-2 insertions contribute all terms of the covered stage
    suffix.  Rescaling goes through :func:`fill_rescale`, the same helper the
    pipeline executor consumes.

    Returns per-stage mean gradients, standard errors, and per-coordinate
    variances across ``iterations``.
    """
    p = plan.num_stages
    b = num_microbatches
    rng = np.random.default_rng(seed)
    loss_stages = sorted(set(exit_stages) | {p})
    mu = {(s, j): rng.normal(size=dim)
          for j in loss_stages for s in range(1, j + 1)}
    beta = {(s, j): rng.uniform(0.5, 1.5, size=dim)
            for j in loss_stages for s in range(1, j + 1)}
    if rescale is None:
        rescale = fill_rescale(plan, exit_stages, b)
    depths = truncated_part1_depths(plan, exit_stages)
    wscale = {j: rescale.weight_scale_for(j) for j in loss_stages}

    def term(s, j, xi):
        return mu[(s, j)] + beta[(s, j)] * xi

    plain = np.zeros((iterations, p, dim))
    filled = np.zeros((iterations, p, dim))
    for it in range(iterations):
        xis = rng.normal(size=(b, dim))
        for j in loss_stages:
            for s in range(1, j + 1):
                contrib = sum(term(s, j, xis[k]) for k in range(b))
                plain[it, s - 1] += contrib
                filled[it, s - 1] += wscale[j] * contrib
        for d in depths:  # Part 1
            if d is None:
                continue
            xi = rng.normal(size=dim)
            for j in loss_stages:
                if j > d:
                    continue
                for s in range(1, j + 1):
                    filled[it, s - 1] += wscale[j] * term(s, j, xi)
        for r in plan.part2_bwd_depths:  # Part 2
            xi = rng.normal(size=dim)
            for s in range(p - r + 1, p + 1):
                for j in loss_stages:
                    if j >= s:
                        filled[it, s - 1] += wscale[j] * term(s, j, xi)
        for s in range(1, p + 1):
            filled[it, s - 1] *= rescale.grad_scale_for(s)
    plain /= b
    filled /= b

    n = iterations
    return {
        "plain_mean": plain.mean(axis=0),
        "filled_mean": filled.mean(axis=0),
        "plain_se": plain.std(axis=0, ddof=1) / np.sqrt(n),
        "filled_se": filled.std(axis=0, ddof=1) / np.sqrt(n),
        "plain_var": plain.var(axis=0, ddof=1),
        "filled_var": filled.var(axis=0, ddof=1),
        "part2_stages": sorted(part2_stage_sample_counts(plan)),
    }


def has_rescale_overlap(plan: FillPlan, exit_stages) -> bool:
    """True when a Part-1-affected loss sits on a Part-2-covered stage.

    In that geometry the two independent rescalings compose to
    B^2 / ((B+m)(B+n)) instead of the exact B / (B+m+n), leaving an O(1/B^2)
    bias; callers may want to drop one of the parts.
    """
    m = part1_loss_sample_counts(plan, exit_stages)
    n = part2_stage_sample_counts(plan)
    return bool(m) and bool(n) and min(n) <= max(m)
