"""Pipeline executor tests: auxiliary-loss backprop, scheduling protocol,
bubble filling, and the single-device gradient oracle."""

import numpy as np
import pytest

from eepipe import schedule as sched
from eepipe.autodiff import Tape, Tensor, dot_const, matmul
from eepipe.bubblefill import FillPlan, plan_bubble_fill
from eepipe.errors import ConfigError, QueueProtocolError, ShapeError
from eepipe.model import ExitSpec, ModelConfig, build_model, partition
from eepipe.pipeline import (
    GradientMessage,
    IterationOptions,
    WeightSchedule,
    _TaggedQueue,
    apply_fill,
    backward_send,
    compute_aux_loss,
    run_iteration_1f1b,
    single_device_gradients,
    sync_tied,
    weight_at_step,
)

VOCAB = 64


def make_setup(num_layers, exits, tie, seed, rows=8, seq=8):
    cfg = ModelConfig(num_layers, 32, 4, VOCAB, 16, exits=exits, tie_embeddings=tie)
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    batch = rng.integers(0, VOCAB, size=(rows, seq + 1))
    weights = [e.loss_weight for e in sorted(exits, key=lambda e: e.layer_index)] + [1.0]
    return model, batch, weights


def max_rel_err(a, b):
    worst = 0.0
    for name in a:
        err = np.max(np.abs(a[name] - b[name]) / (np.abs(a[name]) + 1e-12))
        worst = max(worst, float(err))
    return worst


CONFIGS = [
    # (layers, exits, tie, P)
    (4, (), False, 2),
    (4, (ExitSpec(1, loss_weight=0.25), ExitSpec(2, loss_weight=0.5)), False, 4),
    (4, (ExitSpec(0, loss_weight=0.3),), False, 4),
    (4, (ExitSpec(1, loss_weight=0.25), ExitSpec(2, loss_weight=0.5)), True, 2),
    (6, (ExitSpec(0, loss_weight=0.2), ExitSpec(3, "norm+embed", 0.4)), True, 3),
    (8, (ExitSpec(2, loss_weight=0.25), ExitSpec(4, "mlp+embed", 0.5),
         ExitSpec(8, loss_weight=0.1)), False, 4),
    (4, (ExitSpec(2, "layer+embed", 0.5),), False, 2),
]


@pytest.mark.parametrize("layers,exits,tie,num_stages", CONFIGS)
def test_gradient_equivalence(layers, exits, tie, num_stages):
    """Pipeline gradients match the monolithic single-device oracle."""
    model, batch, weights = make_setup(layers, exits, tie, seed=layers * 10 + num_stages)
    oracle, oracle_losses = single_device_gradients(model, batch, weights, 2)
    part = partition(model, num_stages)
    grads, report = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
    assert set(grads) == set(oracle)
    assert max_rel_err(oracle, grads) < 1e-9
    for key, val in report.per_exit_losses.items():
        assert val == pytest.approx(oracle_losses[key], rel=1e-12)


def test_p1_reduces_bitwise():
    model, batch, weights = make_setup(
        4, (ExitSpec(1, loss_weight=0.25), ExitSpec(2, loss_weight=0.5)), True, seed=3
    )
    oracle, _ = single_device_gradients(model, batch, weights, 2)
    part = partition(model, 1)
    grads, _ = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
    for name in oracle:
        assert np.array_equal(grads[name], oracle[name]), name


def test_eager_and_deferred_identical_gradients():
    model, batch, _ = make_setup(
        4, (ExitSpec(1, loss_weight=0.25), ExitSpec(2, loss_weight=0.5)), False, seed=8
    )
    part = partition(model, 4)
    g_def, r_def = run_iteration_1f1b(
        part, batch, IterationOptions(microbatch_size=2, defer_exit_forward=True)
    )
    g_eag, r_eag = run_iteration_1f1b(
        part, batch, IterationOptions(microbatch_size=2, defer_exit_forward=False)
    )
    for name in g_def:
        assert np.array_equal(g_def[name], g_eag[name]), name
    # identical gradients, different peak-memory accounting
    assert [m.peak_logit_copies for m in r_def.memory] == [0, 1, 1, 0]
    assert [m.peak_logit_copies for m in r_eag.memory] == [0, 3, 2, 0]


def test_in_flight_bound():
    model, batch, _ = make_setup(
        4, (ExitSpec(1, loss_weight=0.5),), False, seed=4, rows=12
    )
    for p in (2, 4):
        part = partition(model, p)
        _, report = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
        for mem in report.memory:
            assert mem.peak_stored_microbatches <= p - mem.stage + 1


def test_message_counts_and_replay():
    model, batch, _ = make_setup(
        4, (ExitSpec(1, loss_weight=0.5), ExitSpec(2, loss_weight=0.5)), False, seed=5
    )
    part = partition(model, 4)
    _, report = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
    m = batch.shape[0] // 2
    for s in range(1, 4):
        assert report.activation_messages[s] == m
        assert report.gradient_messages[s + 1] == m
    assert sched.verify_against_replay(report.timeline, report) == []


def test_replay_detects_mismatched_variant():
    model, batch, _ = make_setup(4, (ExitSpec(1, loss_weight=0.5),), False, seed=6)
    part = partition(model, 2)
    _, report = run_iteration_1f1b(
        part, batch, IterationOptions(microbatch_size=2, defer_exit_forward=True)
    )
    wrong = sched.simulate(report.timeline.cost, "eager-exit")
    assert sched.verify_against_replay(wrong, report) != []


def test_determinism_semantic_state():
    model, batch, _ = make_setup(4, (ExitSpec(2, loss_weight=0.5),), True, seed=7)
    part = partition(model, 2)
    opts = IterationOptions(microbatch_size=2)
    _, r1 = run_iteration_1f1b(part, batch, opts)
    _, r2 = run_iteration_1f1b(part, batch, opts)
    assert r1.semantic_state() == r2.semantic_state()


# ---------------------------------------------------------------------------
# Auxiliary-loss mechanics on a hand-derived two-stage linear toy
# ---------------------------------------------------------------------------


def test_aux_loss_two_stage_hand_derived():
    """L1 = c1·theta1·x, L2 = c2·theta2·theta1·x; stage-1 grads must equal the
    hand-derived d(L1+L2)/d(theta)."""
    x, c1, c2, t1, t2 = 1.7, 0.9, -1.3, 0.6, 2.0
    theta1 = Tensor([[t1]], requires_grad=True)
    theta2 = Tensor([[t2]], requires_grad=True)

    # stage 2 first: aux2 = L2, emits g1 = dL2/dx1
    with Tape() as tape2:
        x1_leaf = Tensor([[t1 * x]], requires_grad=True)
        y = matmul(x1_leaf, theta2)
        loss2 = dot_const(y, np.array([[c2]]))
        aux2 = compute_aux_loss(loss2, None, None)
    grads2, g1 = backward_send(tape2, aux2, x1_leaf)
    assert g1.data[0, 0] == pytest.approx(c2 * t2, rel=1e-15)
    assert grads2[theta2][0, 0] == pytest.approx(c2 * t1 * x, rel=1e-15)

    # stage 1: aux1 = L1 + <g1, x1>
    with Tape() as tape1:
        x_in = Tensor([[x]])
        x1 = matmul(x_in, theta1)
        loss1 = dot_const(x1, np.array([[c1]]))
        aux1 = compute_aux_loss(loss1, GradientMessage(("mb", 1), g1.data), x1)
    grads1, none_msg = backward_send(tape1, aux1, None)
    assert none_msg is None
    hand = c1 * x + c2 * t2 * x  # d(L1 + L2)/d(theta1)
    assert grads1[theta1][0, 0] == pytest.approx(hand, rel=1e-14)


def test_aux_loss_passthrough_stage():
    """A stage with no local exits: aux = <g, x> alone, pure chain rule."""
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    g = rng.normal(size=(2, 3))
    with Tape() as tape:
        x_in = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x_out = matmul(x_in, w)
        aux = compute_aux_loss(None, GradientMessage(("mb", 1), g), x_out)
    grads, g_prev = backward_send(tape, aux, x_in)
    np.testing.assert_allclose(g_prev.data, g @ w.data.T, rtol=1e-15)


def test_aux_loss_gradient_linear_in_g():
    """g is a constant: perturbing it shifts parameter gradients linearly."""
    rng = np.random.default_rng(1)
    w_data = rng.normal(size=(3, 3))
    g = rng.normal(size=(2, 3))
    delta = rng.normal(size=(2, 3))

    def run(gval):
        w = Tensor(w_data, requires_grad=True)
        with Tape() as tape:
            x_in = Tensor(np.ones((2, 3)), requires_grad=True)
            x_out = matmul(x_in, w)
            aux = compute_aux_loss(None, GradientMessage(("mb", 1), gval), x_out)
        grads, _ = backward_send(tape, aux, x_in)
        return grads[w]

    lhs = run(g + delta) - run(g)
    rhs = run(delta) - run(np.zeros_like(g))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


def test_aux_loss_shape_mismatch():
    with Tape():
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with pytest.raises(ShapeError):
            compute_aux_loss(None, GradientMessage(("mb", 1), np.ones((3, 2))), x)


def test_sync_tied_identity_and_linearity():
    a = {"w1": np.ones(3), "shared": np.full(2, 2.0)}
    b = {"w2": np.ones(3), "shared": np.full(2, 5.0)}
    merged = sync_tied([a, b])
    np.testing.assert_array_equal(merged["shared"], np.full(2, 7.0))
    np.testing.assert_array_equal(merged["w1"], a["w1"])
    # zeroing one replica removes exactly that summand
    b0 = dict(b, shared=np.zeros(2))
    np.testing.assert_array_equal(sync_tied([a, b0])["shared"], a["shared"])


# ---------------------------------------------------------------------------
# Weight schedules
# ---------------------------------------------------------------------------


def test_weight_schedule_constant():
    ws = WeightSchedule("constant", early=(0.25, 0.5))
    for step in (0, 17, 10**6):
        assert weight_at_step(ws, step) == (0.25, 0.5, 1.0)


def test_weight_schedule_linear_midpoint_and_clamp():
    ws = WeightSchedule("linear", early=(0.0,), early_end=(0.5,), span_steps=100)
    assert weight_at_step(ws, 50) == (0.25, 1.0)
    assert weight_at_step(ws, 100) == (0.5, 1.0)
    assert weight_at_step(ws, 10**4) == (0.5, 1.0)


def test_weight_schedule_rejects_negatives():
    with pytest.raises(ConfigError):
        WeightSchedule("constant", early=(-0.1,))


# ---------------------------------------------------------------------------
# Bubble filling in the executor
# ---------------------------------------------------------------------------


def _fill_setup(seed=11):
    cfg = ModelConfig(
        8, 32, 4, VOCAB, 16,
        exits=(ExitSpec(2, loss_weight=0.3), ExitSpec(4, loss_weight=0.6)),
    )
    model = build_model(cfg, seed)
    part = partition(model, 4)
    rng = np.random.default_rng(seed + 1)
    return model, part, rng


def test_part2_gradient_touches_only_last_stages():
    """An inserted Part-2 microbatch contributes zero on uncovered stages and
    the full-loss gradient on covered ones."""
    model, part, rng = _fill_setup()
    weights = [0.3, 0.6, 1.0]
    batch = rng.integers(0, VOCAB, size=(8, 9))
    fill_rows = rng.integers(0, VOCAB, size=(2, 9))
    plan = FillPlan(4, 0.5, 0, 1, (), (2,))  # one Part-2 microbatch, depth 2

    plain, _ = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
    filled, _ = run_iteration_1f1b(part, batch, IterationOptions(
        microbatch_size=2, fill_plan=plan, fill_batch=fill_rows))
    fill_oracle, _ = single_device_gradients(model, fill_rows, weights, 2)

    b = 4
    covered = {n for st in part.stages if st.index >= 3 for n in st.params}
    for name in plain:
        if name in covered:
            want = (plain[name] + fill_oracle[name]) * (b / (b + 1))
            np.testing.assert_allclose(filled[name], want, rtol=1e-12, atol=1e-15)
        else:
            np.testing.assert_array_equal(filled[name], plain[name])


def test_part2_rescale_recovers_mean_over_extra_sample():
    """B=4 plus one insertion: scaling covered stages by 4/5 equals the plain
    mean over all 5 microbatches."""
    model, part, rng = _fill_setup(seed=13)
    weights = [0.3, 0.6, 1.0]
    batch = rng.integers(0, VOCAB, size=(8, 9))
    fill_rows = rng.integers(0, VOCAB, size=(2, 9))
    plan = FillPlan(4, 0.5, 0, 1, (), (4,))  # full-depth backward

    filled, _ = run_iteration_1f1b(part, batch, IterationOptions(
        microbatch_size=2, fill_plan=plan, fill_batch=fill_rows))
    all_rows = np.concatenate([batch, fill_rows], axis=0)
    oracle_all, _ = single_device_gradients(model, all_rows, weights, 2)
    for name in filled:
        np.testing.assert_allclose(filled[name] / 4.0, oracle_all[name] / 5.0,
                                   rtol=1e-12, atol=1e-15)


def test_full_fill_plan_runs_and_matches_replay():
    model, part, rng = _fill_setup(seed=17)
    plan = plan_bubble_fill(4, 0.5)
    depths, rescale = apply_fill(plan, part, 4)
    n_extra = sum(1 for d in depths if d is not None) + plan.k_part2
    batch = rng.integers(0, VOCAB, size=(8, 9))
    fill_rows = rng.integers(0, VOCAB, size=(n_extra * 2, 9))
    grads, report = run_iteration_1f1b(part, batch, IterationOptions(
        microbatch_size=2, fill_plan=plan, fill_batch=fill_rows))
    assert report.microbatches == 4 + n_extra
    assert sched.verify_against_replay(report.timeline, report) == []
    unfilled = sched.simulate(report.timeline.cost, "deferred-exit")
    assert report.timeline.span <= unfilled.span + 1e-9


def test_fill_rejects_tied_parameters():
    cfg = ModelConfig(4, 32, 4, VOCAB, 16, exits=(ExitSpec(1), ExitSpec(2)),
                      tie_embeddings=True)
    part = partition(build_model(cfg, 0), 4)
    with pytest.raises(ConfigError):
        apply_fill(plan_bubble_fill(4, 0.5), part, 4)


def test_fill_rejects_stage_mismatch():
    cfg = ModelConfig(4, 32, 4, VOCAB, 16, exits=(ExitSpec(1),))
    part = partition(build_model(cfg, 0), 2)
    with pytest.raises(ConfigError):
        apply_fill(plan_bubble_fill(4, 0.5), part, 4)


def test_empty_plan_is_plain_1f1b():
    model, batch, _ = make_setup(4, (ExitSpec(1, loss_weight=0.5),), False, seed=19)
    part = partition(model, 2)
    plain, _ = run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=2))
    empty, _ = run_iteration_1f1b(part, batch, IterationOptions(
        microbatch_size=2, fill_plan=plan_bubble_fill(2, 0.5)))
    for name in plain:
        assert np.array_equal(plain[name], empty[name])


# ---------------------------------------------------------------------------
# Queue protocol
# ---------------------------------------------------------------------------


def test_tagged_queue_rejects_out_of_order_regular_ids():
    q = _TaggedQueue(8)
    q.put(GradientMessage(("mb", 2), np.zeros(1)))
    q.put(GradientMessage(("mb", 1), np.zeros(1)))
    q.get(("mb", 2))
    with pytest.raises(QueueProtocolError):
        q.get(("mb", 1))


def test_tagged_queue_stashes_fills():
    q = _TaggedQueue(8)
    q.put(GradientMessage(("mb", 1), np.zeros(1)))
    q.put(GradientMessage(("p1", 1), np.ones(1)))
    q.put(GradientMessage(("mb", 2), np.zeros(1)))
    assert q.get(("p1", 1)).data[0] == 1.0
    assert q.get(("mb", 1)).mb == ("mb", 1)
    assert q.get(("mb", 2)).mb == ("mb", 2)


def test_batch_must_divide_into_microbatches():
    model, batch, _ = make_setup(4, (), False, seed=23, rows=6)
    part = partition(model, 2)
    with pytest.raises(ConfigError):
        run_iteration_1f1b(part, batch, IterationOptions(microbatch_size=4))
