"""1F1B pipeline-parallel training over concurrent stage workers.

Each stage runs in its own thread and follows a precomputed action list (the
per-stage event order of the simulated timeline), communicating over ordered
point-to-point queues: activations forward, gradients backward.  A stage's
backward step builds the local surrogate loss

    aux = sum_e w_e * ce_e  +  <g, x_sent>

where g is the gradient received from the next stage, treated as a constant;
backpropagating aux reproduces the gradients of all downstream losses, so the
accumulated iteration gradient matches single-device training of the weighted
multi-exit objective.  Tied parameters are handled by the two-step procedure:
per-stage gradients as if untied, then a summed synchronization of replicas.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue

import numpy as np

from . import schedule as sched
from .autodiff import Tape, Tensor, cross_entropy, dot_const, add, scale
from .bubblefill import FillPlan, fill_rescale, truncated_part1_depths
from .errors import ConfigError, NonFiniteError, QueueProtocolError, ShapeError
from .model import StagePartition, StageSpec, run_head, stage_forward

_RECV_TIMEOUT = 120.0


@dataclass
class ActivationMessage:
    mb: tuple  # ("mb", k) | ("p1", i) | ("p2", i)
    data: np.ndarray


@dataclass
class GradientMessage:
    mb: tuple
    data: np.ndarray


@dataclass(frozen=True)
class WeightSchedule:
    """Per-exit loss weights over training steps.

    ``constant`` returns ``early`` forever; ``linear`` interpolates from
    ``early`` to ``early_end`` over ``span_steps`` and clamps afterwards.
    The final exit's weight stays fixed.
    """

    kind: str = "constant"
    early: tuple = ()
    early_end: tuple = ()
    span_steps: int = 0
    final_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ConfigError(f"unknown weight schedule kind {self.kind!r}")
        if any(w < 0 for w in self.early + self.early_end) or self.final_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.kind == "linear" and (
            len(self.early_end) != len(self.early) or self.span_steps <= 0
        ):
            raise ConfigError("linear schedule needs matching end weights and a span")


def weight_at_step(schedule: WeightSchedule, step: int):
    """Full per-exit weight vector (early exits in depth order, final last)."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    if schedule.kind == "constant" or not schedule.early:
        early = schedule.early
    else:
        t = min(step / schedule.span_steps, 1.0)
        early = tuple(
            a + (b - a) * t for a, b in zip(schedule.early, schedule.early_end)
        )
    return tuple(early) + (schedule.final_weight,)


class _TaggedQueue:
    """Bounded FIFO queue with tag-addressed receive.

    Messages arrive in sender order; the receiver may consume them slightly
    out of order (fills interleave with steady-phase traffic), so popped
    messages are stashed until their tag is requested.  Regular microbatch
    ids must arrive strictly increasing, which is asserted on arrival.
    """

    def __init__(self, maxsize):
        self.q = Queue(maxsize=maxsize)
        self.stash = {}
        self.last_regular = 0
        self.count = 0

    def put(self, msg):
        self.q.put(msg)

    def get(self, tag):
        if tag in self.stash:
            return self.stash.pop(tag)
        while True:
            try:
                msg = self.q.get(timeout=_RECV_TIMEOUT)
            except Empty:
                raise QueueProtocolError(f"timed out waiting for message {tag}")
            self.count += 1
            if msg.mb[0] == "mb":
                if msg.mb[1] <= self.last_regular:
                    raise QueueProtocolError(
                        f"microbatch ids out of order: {msg.mb[1]} after {self.last_regular}"
                    )
                self.last_regular = msg.mb[1]
            if msg.mb == tag:
                return msg
            self.stash[msg.mb] = msg


@dataclass
class StageMemoryCounters:
    stage: int
    peak_stored_microbatches: int = 0
    peak_fill_stored: int = 0
    peak_logit_copies: int = 0


@dataclass
class TrainStepReport:
    per_exit_losses: dict
    grad_norms: dict
    wall_clock: dict
    memory: list
    microbatches: int
    event_log: list
    activation_messages: dict
    gradient_messages: dict
    weights_used: tuple
    timeline: object = None

    def semantic_state(self):
        """Everything that must be bitwise reproducible under a fixed seed
        and schedule (wall-clock excluded)."""
        return (
            tuple(sorted(self.per_exit_losses.items())),
            tuple(sorted(self.grad_norms.items())),
            tuple(
                (m.stage, m.peak_stored_microbatches, m.peak_fill_stored, m.peak_logit_copies)
                for m in self.memory
            ),
            self.microbatches,
            tuple(tuple(log) for log in self.event_log),
            tuple(sorted(self.activation_messages.items())),
            tuple(sorted(self.gradient_messages.items())),
            self.weights_used,
        )


@dataclass
class IterationOptions:
    microbatch_size: int
    defer_exit_forward: bool = True
    fill_plan: FillPlan | None = None
    fill_batch: np.ndarray | None = None
    weight_schedule: WeightSchedule | None = None
    step: int = 0
    cost: sched.CostModel | None = None  # overrides the schedule-cost preset


class DeferredExitForward:
    """Deferred closure: exit logits are generated in the matching backward
    step, used by the local losses, and discarded with it."""

    def __init__(self, stage_spec, heads_with_taps, num_heads):
        self._stage = stage_spec
        self._items = heads_with_taps  # [(HeadDesc, tap Tensor)]
        self._num_heads = num_heads
        self._consumed = False

    def __call__(self):
        if self._consumed:
            raise RuntimeError("deferred exit forward invoked twice")
        self._consumed = True
        return [
            (hd, run_head(self._stage.params, hd, tap, self._num_heads))
            for hd, tap in self._items
        ]


def compute_aux_loss(local_loss, grad_msg, sent_activation):
    """Stage-local surrogate: local losses plus <g, x> for the sent hidden
    states.  The last stage passes ``grad_msg=None``; a stage with no local
    exits passes ``local_loss=None``."""
    if grad_msg is None:
        if local_loss is None:
            raise ConfigError("a stage must have a local loss or a received gradient")
        return local_loss
    if sent_activation is None:
        raise ConfigError("received a gradient but sent no activation")
    if grad_msg.data.shape != sent_activation.data.shape:
        raise ShapeError(
            f"gradient shape {grad_msg.data.shape} does not match activation "
            f"{sent_activation.data.shape}"
        )
    linear = dot_const(sent_activation, grad_msg.data)
    return linear if local_loss is None else add(local_loss, linear)


def backward_send(tape, aux_loss, x_in):
    """Backward over the stage tape; returns (grad map, GradientMessage or
    None for the first stage)."""
    grads = tape.backward(aux_loss)
    if x_in is None:
        return grads, None
    g = grads.pop(x_in, None)
    if g is None:
        raise ConfigError("stored input activation received no gradient")
    return grads, g


def sync_tied(per_stage_grads, tied_replicas=None):
    """Merge per-stage gradient maps; replicas of tied parameters sum.

    Stage maps are keyed by canonical parameter name, so the merge is an
    identity pass-through for untied models and a sum for tied replicas.
    """
    merged: dict[str, np.ndarray] = {}
    for stage_map in per_stage_grads:
        for name, g in stage_map.items():
            if name in merged:
                if merged[name].shape != g.shape:
                    raise ShapeError(f"replica shape mismatch for {name}")
                merged[name] = merged[name] + g
            else:
                merged[name] = g
    return merged


def apply_fill(plan: FillPlan, part: StagePartition, num_microbatches: int):
    """Validate a fill plan against a partition and derive its rescalings.

    Bubble filling assumes no tied parameter spans stages; any tied replica
    rejects the plan.  Returns (part-1 truncated depths, FillRescale).
    """
    if part.tied_replicas:
        raise ConfigError(
            "bubble filling requires untied parameters across stages; "
            f"tied: {sorted(part.tied_replicas)}"
        )
    if plan.num_stages != part.num_stages:
        raise ConfigError("fill plan stage count does not match the partition")
    exit_stages = part.exit_stages()
    depths = truncated_part1_depths(plan, exit_stages)
    return depths, fill_rescale(plan, exit_stages, num_microbatches)


def cost_model_from_partition(part: StagePartition, num_microbatches: int,
                              microbatch_size: int, seq_len: int,
                              base: sched.CostModel | None = None) -> sched.CostModel:
    cfg = part.config
    counts = [0] * part.num_stages
    for st in part.stages:
        counts[st.index - 1] = sum(1 for _, hd in st.heads if not hd.is_final)
    kw = dict(
        num_stages=part.num_stages,
        num_microbatches=num_microbatches,
        exit_counts=tuple(counts),
        seq_len=seq_len,
        microbatch_size=microbatch_size,
        vocab_size=cfg.vocab_size,
        hidden_dim=cfg.hidden_dim,
        layers_per_stage=cfg.num_layers // part.num_stages,
    )
    if base is not None:
        kw.update(
            fwd_time=base.fwd_time, bwd_time=base.bwd_time,
            exit_fwd_time=base.exit_fwd_time, exit_bwd_time=base.exit_bwd_time,
            embed_fwd_time=base.embed_fwd_time, p2p_latency=base.p2p_latency,
        )
    return sched.CostModel(**kw)


class _StoredState:
    __slots__ = ("tape", "x_in", "x_out", "taps", "deferred", "logits", "targets")

    def __init__(self, tape, x_in, taps, targets):
        self.tape = tape
        self.x_in = x_in
        self.x_out = None
        self.taps = taps
        self.deferred = None  # DeferredExitForward when exits are deferred
        self.logits = []  # [(HeadDesc, Tensor)] computed at forward time
        self.targets = targets


class _StageWorker:
    """One pipeline stage: executes its action list over the queues."""

    def __init__(self, spec: StageSpec, part: StagePartition, actions,
                 fwd_in, fwd_out, bwd_in, bwd_out, data, ctx):
        self.spec = spec
        self.part = part
        self.cfg = part.config
        self.actions = actions
        self.fwd_in = fwd_in
        self.fwd_out = fwd_out
        self.bwd_in = bwd_in
        self.bwd_out = bwd_out
        self.data = data  # tag -> (inputs, targets); only stage 1 uses inputs
        self.ctx = ctx  # shared iteration context
        self.name_of = {id(t): n for n, t in spec.params.items()}
        self.stored: dict = {}
        self.grad_accum: dict[str, np.ndarray] = {}
        self.loss_sums: dict[str, float] = {}
        self.event_log: list = []
        self.mem = StageMemoryCounters(spec.index)
        self._stored_reg = 0
        self._stored_fill = 0
        self._logit_live = 0
        self.sent_act = 0
        self.sent_grad = 0
        self.fwd_seconds = 0.0
        self.bwd_seconds = 0.0
        self.exception: BaseException | None = None

    # -- bookkeeping ------------------------------------------------------

    def _bump(self, attr, delta):
        val = getattr(self, attr) + delta
        setattr(self, attr, val)
        if attr == "_stored_reg":
            self.mem.peak_stored_microbatches = max(self.mem.peak_stored_microbatches, val)
        elif attr == "_stored_fill":
            self.mem.peak_fill_stored = max(self.mem.peak_fill_stored, val)
        else:
            self.mem.peak_logit_copies = max(self.mem.peak_logit_copies, val)

    @property
    def early_heads(self):
        return [(pos, hd) for pos, hd in self.spec.heads if not hd.is_final]

    @property
    def is_last(self):
        return self.spec.index == self.part.num_stages

    # -- forward / backward bodies ----------------------------------------

    def _run_forward(self, tag, record, upto=None):
        """Backbone forward for one microbatch; returns stored state or None."""
        if self.spec.has_embedding:
            x_in = None
            inp = self.data[tag][0]
        else:
            msg = self.fwd_in.get(tag)
            x_in = Tensor(msg.data, requires_grad=True) if record else Tensor(msg.data)
            inp = x_in
        if not record:
            x, taps = stage_forward(self.spec, inp, self.cfg, upto)
            return None, x
        tape = Tape()
        with tape:
            x, taps = stage_forward(self.spec, inp, self.cfg, upto)
        return _StoredState(tape, x_in, taps, self.data[tag][1]), x

    def _attach_heads(self, state, eager, include_final=True):
        """Compute (eager) or defer the local exit heads on stored taps.

        The final head is never deferred; head order follows model depth
        order so the tape matches the single-device oracle arithmetic.
        """
        heads = self.spec.heads if include_final else self.early_heads
        items = [(hd, state.taps[pos]) for pos, hd in heads]
        earlies = [(hd, tap) for hd, tap in items if not hd.is_final]
        now = items if eager else [(hd, tap) for hd, tap in items if hd.is_final]
        state.logits = []
        if now:
            with state.tape:
                state.logits = [
                    (hd, run_head(self.spec.params, hd, tap, self.cfg.num_heads))
                    for hd, tap in now
                ]
        if earlies:
            if eager:
                self._bump("_logit_live", 1)
            else:
                state.deferred = DeferredExitForward(self.spec, earlies, self.cfg.num_heads)

    def _local_loss(self, state, record_losses):
        """Weighted sum of local exit losses in depth order (final last)."""
        produced = list(state.logits or [])
        if state.deferred is not None:
            with state.tape:
                produced = state.deferred() + produced
                if self.early_heads:
                    self._bump("_logit_live", 1)
                    self._bump("_logit_live", -1)
        produced.sort(key=lambda p: (p[0].layer_index, p[0].is_final))
        total = None
        with state.tape:
            for hd, logits in produced:
                ce = cross_entropy(logits, state.targets)
                if record_losses:
                    self.loss_sums[hd.key] = self.loss_sums.get(hd.key, 0.0) + ce.item()
                w = self.ctx.head_weights[hd.key]
                term = scale(ce, w)
                total = term if total is None else add(total, term)
        return total

    def _backward(self, tag, state, recv_grad, send_grad, record_losses):
        grad_msg = self.bwd_in.get(tag) if recv_grad else None
        local = self._local_loss(state, record_losses)
        with state.tape:
            aux = compute_aux_loss(local, grad_msg, state.x_out if recv_grad else None)
        if not np.isfinite(aux.data):
            raise NonFiniteError(f"non-finite loss on stage {self.spec.index}")
        grads, g_in = backward_send(state.tape, aux, state.x_in)
        for tensor, g in grads.items():
            name = self.name_of[id(tensor)]
            if name in self.grad_accum:
                self.grad_accum[name] += g
            else:
                self.grad_accum[name] = g.copy()
        if send_grad:
            if g_in is None:
                raise ConfigError("cannot send a gradient from the first stage")
            self.bwd_out.put(GradientMessage(tag, g_in))
            self.sent_grad += 1

    # -- actions ------------------------------------------------------------

    def _act_forward(self, mb):
        tag = ("mb", mb)
        state, x = self._run_forward(tag, record=True)
        state.x_out = None if self.is_last else x
        self._attach_heads(state, eager=not self.ctx.defer)
        if not self.is_last:
            self.fwd_out.put(ActivationMessage(tag, x.data))
            self.sent_act += 1
        self.stored[tag] = state
        self._bump("_stored_reg", 1)

    def _act_backward(self, mb):
        tag = ("mb", mb)
        state = self.stored.pop(tag)
        self._backward(tag, state, recv_grad=not self.is_last,
                       send_grad=self.spec.index > 1, record_losses=True)
        self._bump("_stored_reg", -1)
        if state.logits is not None and any(not hd.is_final for hd, _ in state.logits):
            self._bump("_logit_live", -1)

    def _act_fill1_fwd(self, i):
        tag = ("p1", i)
        depth = self.ctx.part1_depths[i - 1]
        state, x = self._run_forward(tag, record=True)
        state.x_out = None if self.spec.index == depth else x
        self._attach_heads(state, eager=False, include_final=False)
        if self.spec.index < depth:
            self.fwd_out.put(ActivationMessage(tag, x.data))
            self.sent_act += 1
        self.stored[tag] = state
        self._bump("_stored_fill", 1)

    def _act_fill1_bwd(self, i):
        tag = ("p1", i)
        depth = self.ctx.part1_depths[i - 1]
        state = self.stored.pop(tag)
        self._backward(tag, state, recv_grad=self.spec.index < depth,
                       send_grad=self.spec.index > 1, record_losses=False)
        self._bump("_stored_fill", -1)

    def _act_fill2_fwd(self, i):
        tag = ("p2", i)
        covered = self.spec.index in self.ctx.part2_covered[i - 1]
        state, x = self._run_forward(tag, record=covered)
        self._bump("_stored_fill", 1)
        if covered:
            state.x_out = None if self.is_last else x
            self._attach_heads(state, eager=False)
            self.stored[tag] = state
        if not self.is_last:
            self.fwd_out.put(ActivationMessage(tag, x.data))
            self.sent_act += 1
        if not covered:
            self._bump("_stored_fill", -1)

    def _act_fill2_bwd(self, i):
        tag = ("p2", i)
        state = self.stored.pop(tag)
        deepest_covered = min(self.ctx.part2_covered[i - 1])
        self._backward(tag, state, recv_grad=not self.is_last,
                       send_grad=self.spec.index > deepest_covered,
                       record_losses=False)
        self._bump("_stored_fill", -1)

    _DISPATCH = {
        sched.FWD: ("fwd", _act_forward),
        sched.BWD: ("bwd", _act_backward),
        sched.FILL1_FWD: ("fwd", _act_fill1_fwd),
        sched.FILL1_BWD: ("bwd", _act_fill1_bwd),
        sched.FILL2_FWD: ("fwd", _act_fill2_fwd),
        sched.FILL2_BWD: ("bwd", _act_fill2_bwd),
    }

    def run(self):
        try:
            for kind, mb in self.actions:
                phase, fn = self._DISPATCH[kind]
                t0 = time.perf_counter()
                fn(self, mb)
                dt = time.perf_counter() - t0
                if phase == "fwd":
                    self.fwd_seconds += dt
                else:
                    self.bwd_seconds += dt
                self.event_log.append((kind, mb))
            if self.stored:
                raise QueueProtocolError(
                    f"stage {self.spec.index} finished with unconsumed activations"
                )
        except BaseException as exc:  # propagated by the coordinator
            self.exception = exc


@dataclass
class _IterationContext:
    defer: bool
    head_weights: dict
    part1_depths: list
    part2_covered: list


def run_iteration_1f1b(part: StagePartition, batch, options: IterationOptions):
    """Execute one 1F1B training iteration.

    Returns (gradient map, TrainStepReport).  Gradients are raw sums over
    microbatches (fill contributions rescaled), keyed by canonical parameter
    name; they match the single-device gradients of the weighted multi-exit
    loss on the same batch.
    """
    batch = np.asarray(batch)
    mbs = options.microbatch_size
    if batch.ndim != 2 or batch.shape[0] % mbs:
        raise ConfigError(
            f"batch of {batch.shape[0]} rows does not divide into microbatches of {mbs}"
        )
    num_mb = batch.shape[0] // mbs
    seq_len = batch.shape[1] - 1
    p = part.num_stages

    cost = cost_model_from_partition(part, num_mb, mbs, seq_len, options.cost)
    variant = "deferred-exit" if options.defer_exit_forward else "eager-exit"
    timeline = sched.simulate(cost, variant, options.fill_plan)

    model_heads = [hd for st in part.stages for _, hd in st.heads]
    model_heads.sort(key=lambda hd: (hd.layer_index, hd.is_final))
    weights = _resolve_weights(model_heads, options)

    depths, part2_covered, head_weights, rescale = [], [], {}, None
    data = {}
    for k in range(num_mb):
        rows = batch[k * mbs:(k + 1) * mbs]
        data[("mb", k + 1)] = (rows[:, :-1], rows[:, 1:])
    if options.fill_plan is not None and not options.fill_plan.empty:
        depths, rescale = apply_fill(options.fill_plan, part, num_mb)
        for i, r in enumerate(options.fill_plan.part2_bwd_depths, 1):
            part2_covered.append(set(range(p - r + 1, p + 1)))
        _assign_fill_data(data, batch.shape[1], options, depths)
    for i, hd in enumerate(model_heads):
        w = weights[i]
        if rescale is not None and not hd.is_final:
            w *= rescale.weight_scale_for(part.stage_of_head(hd.key))
        head_weights[hd.key] = w
    ctx = _IterationContext(options.defer_exit_forward, head_weights, depths, part2_covered)

    qsize = p + 2 * (len(depths) + len(part2_covered)) + 2
    fwd_q = [_TaggedQueue(qsize) for _ in range(p - 1)]
    bwd_q = [_TaggedQueue(qsize) for _ in range(p - 1)]
    workers = []
    for st in part.stages:
        s = st.index
        workers.append(_StageWorker(
            st, part, timeline.order(s),
            fwd_in=fwd_q[s - 2] if s > 1 else None,
            fwd_out=fwd_q[s - 1] if s < p else None,
            bwd_in=bwd_q[s - 1] if s < p else None,
            bwd_out=bwd_q[s - 2] if s > 1 else None,
            data=data, ctx=ctx,
        ))

    t_start = time.perf_counter()
    threads = [
        threading.Thread(target=w.run, daemon=True, name=f"stage-{w.spec.index}")
        for w in workers
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t_start
    for w in workers:
        if w.exception is not None:
            raise w.exception

    per_stage = []
    for w in workers:
        g = w.grad_accum
        if rescale is not None:
            gs = rescale.grad_scale_for(w.spec.index)
            if gs != 1.0:
                g = {name: arr * gs for name, arr in g.items()}
        per_stage.append(g)
    merged = sync_tied(per_stage, part.tied_replicas)

    per_exit = {}
    for hd in model_heads:
        total = sum(w.loss_sums.get(hd.key, 0.0) for w in workers)
        per_exit[hd.key] = total / num_mb
    report = TrainStepReport(
        per_exit_losses=per_exit,
        grad_norms={
            w.spec.index: float(np.sqrt(sum(
                float(np.sum(g * g)) for g in per_stage[i].values()
            )))
            for i, w in enumerate(workers)
        },
        wall_clock={
            "forward": sum(w.fwd_seconds for w in workers),
            "backward": sum(w.bwd_seconds for w in workers),
            "total": elapsed,
        },
        memory=[w.mem for w in workers],
        microbatches=num_mb + sum(1 for d in depths if d is not None) + len(part2_covered),
        event_log=[w.event_log for w in workers],
        activation_messages={w.spec.index: w.sent_act for w in workers},
        gradient_messages={w.spec.index: w.sent_grad for w in workers},
        weights_used=tuple(weights),
        timeline=timeline,
    )
    return merged, report


def _resolve_weights(model_heads, options: IterationOptions):
    if options.weight_schedule is not None:
        weights = weight_at_step(options.weight_schedule, options.step)
        if len(weights) != len(model_heads):
            raise ConfigError(
                f"schedule yields {len(weights)} weights for {len(model_heads)} exits"
            )
        return list(weights)
    return [hd.loss_weight for hd in model_heads]


def _assign_fill_data(data, row_len, options: IterationOptions, depths):
    plan = options.fill_plan
    executed_p1 = [i for i, d in enumerate(depths, 1) if d is not None]
    needed = len(executed_p1) + len(plan.part2_bwd_depths)
    fb = options.fill_batch
    if fb is None and needed:
        raise ConfigError("fill plan is active but no fill_batch was provided")
    fb = np.asarray(fb) if fb is not None else np.empty((0, row_len), dtype=int)
    if fb.shape[0] != needed * options.microbatch_size or fb.shape[1] != row_len:
        raise ConfigError(
            f"fill_batch must hold {needed} microbatches of the batch row length"
        )
    k = 0
    for i in executed_p1:
        rows = fb[k * options.microbatch_size:(k + 1) * options.microbatch_size]
        data[("p1", i)] = (rows[:, :-1], rows[:, 1:])
        k += 1
    for i in range(1, len(plan.part2_bwd_depths) + 1):
        rows = fb[k * options.microbatch_size:(k + 1) * options.microbatch_size]
        data[("p2", i)] = (rows[:, :-1], rows[:, 1:])
        k += 1


def single_device_gradients(model, batch, weights, microbatch_size):
    """Single-device oracle: microbatched gradient accumulation over the
    monolithic model, same microbatch split and accumulation order as the
    pipeline.  Returns (gradient map by name, per-exit mean losses)."""
    from .model import weighted_loss

    batch = np.asarray(batch)
    if batch.shape[0] % microbatch_size:
        raise ConfigError("batch does not divide into microbatches")
    num_mb = batch.shape[0] // microbatch_size
    name_of = {id(t): n for n, t in model.params.items()}
    accum: dict[str, np.ndarray] = {}
    loss_sums = [0.0] * len(model.heads)
    for k in range(num_mb):
        rows = batch[k * microbatch_size:(k + 1) * microbatch_size]
        with Tape() as tape:
            loss, per_exit = weighted_loss(model, rows, weights)
        grads = tape.backward(loss)
        for tensor, g in grads.items():
            name = name_of[id(tensor)]
            if name in accum:
                accum[name] += g
            else:
                accum[name] = g.copy()
        for i, v in enumerate(per_exit):
            loss_sums[i] += v
    per_exit = {
        hd.key: loss_sums[i] / num_mb for i, hd in enumerate(model.heads)
    }
    return accum, per_exit
