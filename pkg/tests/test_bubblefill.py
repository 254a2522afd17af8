"""Capacity formulas, rescaling algebra, and estimator statistics."""

import numpy as np
import pytest

from eepipe.bubblefill import (
    FillPlan,
    estimator_stats,
    fill_rescale,
    has_rescale_overlap,
    part1_loss_sample_counts,
    part2_stage_sample_counts,
    plan_bubble_fill,
    predicted_variance_difference,
    toy_filled_iterations,
    truncated_part1_depths,
)
from eepipe.errors import ConfigError


def test_plan_capacity_formula_examples():
    plan = plan_bubble_fill(4, 0.5)
    assert plan.k_part1 == 2  # floor(3 / 1.5)
    assert plan.part2_bwd_depths == (2, 1)  # floor(4 - 1.5), floor(4 - 3)
    assert plan_bubble_fill(4, 3.0).empty  # f/b >= P - 1
    assert plan_bubble_fill(8, 0.25).k_part1 == 5


def test_plan_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        plan_bubble_fill(1, 0.5)
    with pytest.raises(ConfigError):
        plan_bubble_fill(4, 0.0)


def test_part1_truncation_to_deepest_exit_stage():
    plan = plan_bubble_fill(4, 0.5)  # untruncated depths (2, 1)
    assert truncated_part1_depths(plan, [2, 3]) == [2, None]
    assert truncated_part1_depths(plan, [1]) == [1, 1]
    assert truncated_part1_depths(plan, []) == [None, None]


def test_sample_counts_and_rescale():
    plan = plan_bubble_fill(4, 0.5)
    # exits on stages 1 and 2: fill 1 reaches stage 2, fill 2 stage 1
    m = part1_loss_sample_counts(plan, [1, 2])
    assert m == {1: 2, 2: 1}
    n = part2_stage_sample_counts(plan)
    assert n == {3: 1, 4: 2}
    rs = fill_rescale(plan, [1, 2], num_microbatches=4)
    assert rs.weight_scale_for(1) == pytest.approx(4 / 6)
    assert rs.weight_scale_for(2) == pytest.approx(4 / 5)
    assert rs.grad_scale_for(4) == pytest.approx(4 / 6)
    assert rs.grad_scale_for(1) == 1.0
    assert not has_rescale_overlap(plan, [1, 2])


def test_overlap_detection():
    # Part-2 coverage reaching a Part-1-affected loss stage
    plan = FillPlan(4, 0.5, 1, 1, (2,), (3,))
    assert has_rescale_overlap(plan, [2])
    assert not has_rescale_overlap(plan, [])


# ---------------------------------------------------------------------------
# Monte Carlo estimator statistics
# ---------------------------------------------------------------------------


def test_predicted_difference_closed_form():
    assert predicted_variance_difference(4, 1.0, 0.0) == pytest.approx(1 / 20)
    assert predicted_variance_difference(4, 1.0, -0.5) == 0.0
    assert predicted_variance_difference(4, 1.0, -1.0) < 0


def test_estimator_stats_independent_case():
    out = estimator_stats(200_000, 4, var_a=1.0, var_b=1.0, cov_ab=0.0, seed=0)
    assert abs(out["e_mean"] - out["target"]) < 3 * out["e_mean_se"]
    assert abs(out["ep_mean"] - out["target"]) < 3 * out["ep_mean_se"]
    assert out["predicted_diff"] == pytest.approx(0.05)
    assert abs(out["var_diff"] - out["predicted_diff"]) < 3 * out["var_diff_se"]


def test_estimator_stats_cancellation_case():
    out = estimator_stats(200_000, 4, var_a=1.0, var_b=1.0, cov_ab=-0.5, seed=1)
    assert out["predicted_diff"] == 0.0
    assert abs(out["var_diff"]) < 3 * out["var_diff_se"]


def test_estimator_stats_negative_correlation_increases_variance():
    out = estimator_stats(200_000, 4, var_a=1.0, var_b=1.5, cov_ab=-1.0, seed=2)
    assert out["predicted_diff"] < 0
    assert abs(out["var_diff"] - out["predicted_diff"]) < 3 * out["var_diff_se"]
    assert out["var_diff"] < 0  # the extra sample makes things worse here


def test_estimator_stats_rejects_degenerate_spec():
    with pytest.raises(ConfigError):
        estimator_stats(200_000, 4, var_a=1.0, var_b=1.0, cov_ab=2.0)
    with pytest.raises(ConfigError):
        estimator_stats(10_000, 4)


# ---------------------------------------------------------------------------
# Linear-Gaussian toy end-to-end
# ---------------------------------------------------------------------------


def test_toy_filled_mean_matches_plain_within_3_se():
    plan = plan_bubble_fill(4, 0.5)
    out = toy_filled_iterations(plan, exit_stages=[1, 2], num_microbatches=4,
                                iterations=3000, seed=5)
    se = np.sqrt(out["plain_se"] ** 2 + out["filled_se"] ** 2)
    assert np.all(np.abs(out["filled_mean"] - out["plain_mean"]) < 3 * se)


def test_toy_variance_drops_on_part2_stages():
    """Positively correlated loss-term contributions: extra Part-2 samples
    reduce per-coordinate variance on the covered stages."""
    plan = FillPlan(4, 0.5, 0, 2, (), (2, 1))
    out = toy_filled_iterations(plan, exit_stages=[2], num_microbatches=4,
                                iterations=4000, seed=7)
    for s in out["part2_stages"]:
        assert np.all(out["filled_var"][s - 1] < out["plain_var"][s - 1])
