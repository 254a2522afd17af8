"""Discrete-event model of the 1F1B pipeline schedule.

One iteration has a warm-up phase (min(P-s, M) forwards on stage s), a steady
one-forward-one-backward phase, and a cool-down phase of trailing backwards.
The simulator assigns start/end times to a structural per-stage action list,
so the span it reports is the true longest path; the analytic decomposition
(first-microbatch forwards + last-stage steady phase + last-microbatch
backwards) is computed alongside and a flag records when exit computation no
longer fits the implicit bubbles and the true span exceeds it.

Variants:
  standard       no early exits (the final head still runs on the last stage)
  eager-exit     exit-head forward inside the forward step
  deferred-exit  exit-head forward moved into the matching backward step

Bubble filling (Part-1 / Part-2 partial microbatches) applies on top of
standard or deferred variants: Part-1 events slot structurally between the
warm-up and steady phases, Part-2 chains are packed into the cool-down idle
gaps of the unfilled timeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .bubblefill import FillPlan, truncated_part1_depths
from .errors import ConfigError

FWD, BWD = "F", "B"
FILL1_FWD, FILL1_BWD = "F1f", "F1b"
FILL2_FWD, FILL2_BWD = "F2f", "F2b"

_FWD_KINDS = (FWD, FILL1_FWD, FILL2_FWD)

VARIANTS = ("standard", "eager-exit", "deferred-exit")

ACT_UNITS_PER_LAYER = 16  # stored activation floats per layer, in units of s*b*h


@dataclass(frozen=True)
class CostModel:
    """Analytic per-unit costs and memory dimensions.

    Times are abstract units; the Fig-3-style preset uses f:b_t = 1:2 and
    backbone:exit forward = 2:1.  ``exit_counts[s-1]`` is the number of early
    exits on stage s; the final head always lives on the last stage and is
    never deferred.  Memory is accounted in floats.
    """

    num_stages: int
    num_microbatches: int
    fwd_time: float = 1.0
    bwd_time: float = 2.0
    exit_fwd_time: float = 0.5
    exit_bwd_time: float = 1.0
    exit_counts: tuple = ()
    seq_len: int = 64
    microbatch_size: int = 4
    vocab_size: int = 256
    hidden_dim: int = 64
    layers_per_stage: int = 2
    embed_fwd_time: float = 0.0
    p2p_latency: float = 0.0

    def __post_init__(self):
        if self.num_stages < 1 or self.num_microbatches < 1:
            raise ConfigError("need at least one stage and one microbatch")
        for t in (self.fwd_time, self.bwd_time, self.exit_fwd_time, self.exit_bwd_time):
            if t <= 0:
                raise ConfigError("all times must be positive")
        counts = tuple(self.exit_counts) or (0,) * self.num_stages
        if len(counts) != self.num_stages:
            raise ConfigError("exit_counts length must equal num_stages")
        object.__setattr__(self, "exit_counts", counts)

    def early_exits_on(self, stage):
        return self.exit_counts[stage - 1]

    def exit_stages(self):
        return [s for s in range(1, self.num_stages + 1) if self.early_exits_on(s)]


def fig3_preset(num_stages=4, num_microbatches=6, exit_counts=(), **kw):
    base = dict(fwd_time=1.0, bwd_time=2.0, exit_fwd_time=0.5, exit_bwd_time=1.0)
    base.update(kw)
    return CostModel(num_stages, num_microbatches, exit_counts=exit_counts, **base)


@dataclass(frozen=True)
class Event:
    kind: str
    mb: int  # regular microbatch id (1-based) or fill insertion index
    stage: int
    start: float = 0.0
    end: float = 0.0

    @property
    def duration(self):
        return self.end - self.start

    def tag(self):
        return (self.kind, self.mb)


@dataclass
class Timeline:
    cost: CostModel
    variant: str
    fill_plan: FillPlan | None
    events: list  # per stage: list[Event] in execution order
    span: float
    busy: list
    decomposition: dict
    bubble_assumption_violated: bool
    part1_depths: list = field(default_factory=list)

    def stage_events(self, stage):
        return self.events[stage - 1]

    def order(self, stage):
        return [e.tag() for e in self.stage_events(stage)]


def _durations(cost: CostModel, variant: str):
    """Map (kind, stage) -> event duration for the chosen variant."""
    p = cost.num_stages

    def fwd(stage, with_exits):
        d = cost.fwd_time
        if stage == 1:
            d += cost.embed_fwd_time
        if with_exits and variant == "eager-exit":
            d += cost.exit_fwd_time * cost.early_exits_on(stage)
        if stage == p:
            d += cost.exit_fwd_time  # final head is computed eagerly
        return d

    def bwd(stage, with_exits):
        d = cost.bwd_time
        if with_exits:
            k = cost.early_exits_on(stage)
            if variant == "eager-exit":
                d += cost.exit_bwd_time * k
            elif variant == "deferred-exit":
                d += (cost.exit_fwd_time + cost.exit_bwd_time) * k
        if stage == p:
            d += cost.exit_bwd_time
        return d

    def dur(kind, stage):
        if kind == FWD:
            return fwd(stage, True)
        if kind == BWD:
            return bwd(stage, True)
        if kind == FILL1_FWD:
            return cost.fwd_time + (cost.embed_fwd_time if stage == 1 else 0.0)
        if kind == FILL1_BWD:
            return cost.bwd_time + (
                (cost.exit_fwd_time + cost.exit_bwd_time) * cost.early_exits_on(stage)
            )
        if kind == FILL2_FWD:
            return fwd(stage, False)
        if kind == FILL2_BWD:
            return bwd(stage, True) if variant == "deferred-exit" else bwd(stage, False)
        raise ValueError(kind)

    return dur


def regular_actions(num_stages: int, num_microbatches: int, stage: int):
    """Structural 1F1B order for one stage: warm-up, steady pairs, cool-down."""
    m = num_microbatches
    warmup = min(num_stages - stage, m)
    acts = [(FWD, k) for k in range(1, warmup + 1)]
    for k in range(1, m - warmup + 1):
        acts.append((FWD, warmup + k))
        acts.append((BWD, k))
    acts.extend((BWD, k) for k in range(m - warmup + 1, m + 1))
    return acts


def build_action_lists(cost: CostModel, variant: str, fill_plan: FillPlan | None):
    """Per-stage structural action lists, with Part-1 fills slotted between
    the warm-up forwards and the first steady forward.  Part-2 fills are
    placed later, cost-aware (see :func:`simulate`).  Returns (lists,
    part1_depths)."""
    p, m = cost.num_stages, cost.num_microbatches
    lists = [regular_actions(p, m, s) for s in range(1, p + 1)]
    depths: list = []
    if fill_plan is not None and not fill_plan.empty:
        if variant == "eager-exit":
            raise ConfigError("bubble filling requires the deferred-exit or standard variant")
        if fill_plan.num_stages != p:
            raise ConfigError("fill plan stage count does not match the cost model")
        if m < p:
            raise ConfigError("bubble filling needs at least P microbatches")
        depths = truncated_part1_depths(fill_plan, cost.exit_stages())
        for s in range(1, p + 1):
            visiting = [i for i, d in enumerate(depths, 1) if d is not None and d >= s]
            if not visiting:
                continue
            inserts = [(FILL1_FWD, i) for i in visiting]
            inserts += [(FILL1_BWD, i) for i in reversed(visiting)]
            # The warm-up explicit bubble on stage s opens after its first
            # steady forward (the in-flight count reaches P - s + 1 there)
            # and closes at its first backward.
            cut = min(p - s, m) + 1
            lists[s - 1] = lists[s - 1][:cut] + inserts + lists[s - 1][cut:]
    return lists, depths


def _dependency(kind, mb, stage, p, part1_depths, part2_depths):
    """The cross-stage event this one waits for, or None."""
    if kind == FWD:
        return (FWD, mb, stage - 1) if stage > 1 else None
    if kind == BWD:
        return (BWD, mb, stage + 1) if stage < p else (FWD, mb, stage)
    if kind == FILL1_FWD:
        return (FILL1_FWD, mb, stage - 1) if stage > 1 else None
    if kind == FILL1_BWD:
        d = part1_depths[mb - 1]
        return (FILL1_BWD, mb, stage + 1) if stage < d else (FILL1_FWD, mb, stage)
    if kind == FILL2_FWD:
        return (FILL2_FWD, mb, stage - 1) if stage > 1 else None
    if kind == FILL2_BWD:
        return (FILL2_BWD, mb, stage + 1) if stage < p else (FILL2_FWD, mb, stage)
    raise ValueError(kind)


def _list_schedule(cost, variant, lists, part1_depths):
    """Earliest-start times for per-stage action lists, respecting list order
    on each stage and forward/backward chains across stages."""
    p = cost.num_stages
    dur = _durations(cost, variant)
    done: dict = {}
    pos = [0] * p
    stage_free = [0.0] * p
    events = [[] for _ in range(p)]
    total = sum(len(l) for l in lists)
    scheduled = 0
    while scheduled < total:
        progressed = False
        for s in range(1, p + 1):
            while pos[s - 1] < len(lists[s - 1]):
                kind, mb = lists[s - 1][pos[s - 1]]
                dep = _dependency(kind, mb, s, p, part1_depths, None)
                if dep is not None and dep not in done:
                    break
                ready = done[dep] + cost.p2p_latency if dep is not None else 0.0
                start = max(ready, stage_free[s - 1])
                end = start + dur(kind, s)
                events[s - 1].append(Event(kind, mb, s, start, end))
                done[(kind, mb, s)] = end
                stage_free[s - 1] = end
                pos[s - 1] += 1
                scheduled += 1
                progressed = True
        if not progressed:
            raise ConfigError("action lists deadlock: unsatisfiable dependency")
    return events


def _stage_gaps(stage_events):
    """Idle intervals [(start, end)] between events, plus the open tail."""
    gaps = []
    t = 0.0
    for e in stage_events:
        if e.start > t:
            gaps.append((t, e.start))
        t = max(t, e.end)
    gaps.append((t, float("inf")))
    return gaps


def _slot_part2(cost, variant, events, plan):
    """Pack Part-2 fill chains into idle gaps without moving existing events.

    Earliest-fit per chain element; a chain may run its forwards through the
    warm-up bubbles of early stages and park until the last stage's cool-down
    bubble opens.  Same-kind ordering per stage is enforced so queue traffic
    stays in insertion order.  When a chain element finds no interior gap it
    lands on the stage's tail, which can extend the span; the simulator
    reports that true, larger span.
    """
    p = cost.num_stages
    dur = _durations(cost, variant)
    prev_same: dict = {}
    for i, r in enumerate(plan.part2_bwd_depths, 1):
        chain = [(FILL2_FWD, s) for s in range(1, p + 1)]
        chain += [(FILL2_BWD, s) for s in range(p, p - r, -1)]
        ready = 0.0
        for kind, s in chain:
            floor = max(ready, prev_same.get((kind, s), 0.0))
            d = dur(kind, s)
            for gs, ge in _stage_gaps(events[s - 1]):
                start = max(gs, floor)
                if start + d <= ge + 1e-9:  # same slack the validator allows
                    break
            ev = Event(kind, i, s, start, start + d)
            events[s - 1].append(ev)
            events[s - 1].sort(key=lambda e: e.start)
            prev_same[(kind, s)] = ev.end
            ready = ev.end + cost.p2p_latency
    return events


def _validate(cost, events, part1_depths):
    p = cost.num_stages
    done = {(e.kind, e.mb, e.stage): e.end for evs in events for e in evs}
    start = {(e.kind, e.mb, e.stage): e.start for evs in events for e in evs}
    for evs in events:
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end - 1e-9:
                raise AssertionError(f"overlapping events on stage {a.stage}")
    for key in done:
        dep = _dependency(key[0], key[1], key[2], p, part1_depths, None)
        if dep is not None and start[key] < done[dep] + cost.p2p_latency - 1e-9:
            raise AssertionError(f"event {key} starts before its dependency {dep}")


def analytic_span(cost: CostModel, variant: str) -> dict:
    """Critical-path decomposition: forwards of the first microbatch, the
    steady phase on the last stage, backwards of the last microbatch."""
    p, m = cost.num_stages, cost.num_microbatches
    dur = _durations(cost, variant)
    part1 = sum(dur(FWD, s) for s in range(1, p + 1))
    part2 = (m - 1) * (dur(FWD, p) + dur(BWD, p)) + dur(BWD, p)
    part3 = sum(dur(BWD, s) for s in range(1, p))
    return {"warmup": part1, "steady": part2, "cooldown": part3,
            "total": part1 + part2 + part3}


def simulate(cost: CostModel, variant: str, fill_plan: FillPlan | None = None) -> Timeline:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "standard":
        cost = replace(cost, exit_counts=(0,) * cost.num_stages)
    lists, part1_depths = build_action_lists(cost, variant, fill_plan)
    events = _list_schedule(cost, variant, lists, part1_depths)
    if fill_plan is not None and fill_plan.part2_bwd_depths:
        events = _slot_part2(cost, variant, events, fill_plan)
    _validate(cost, events, part1_depths)
    span = max(e.end for evs in events for e in evs)
    busy = [sum(e.duration for e in evs) for evs in events]
    decomp = analytic_span(cost, variant)
    violated = span > decomp["total"] + 1e-9 if fill_plan is None else False
    return Timeline(cost, variant, fill_plan, events, span, busy, decomp,
                    violated, list(part1_depths))


def brute_force_span(timeline: Timeline) -> float:
    """Longest path over the dependency DAG, computed independently of the
    incremental scheduler: nodes are events, edges are same-stage order plus
    cross-stage forward/backward chains."""
    cost = timeline.cost
    p = cost.num_stages
    nodes = {}
    preds: dict = {}
    for evs in timeline.events:
        for prev, e in zip([None] + list(evs), evs):
            key = (e.kind, e.mb, e.stage)
            nodes[key] = e.duration
            preds[key] = []
            if prev is not None:
                preds[key].append(((prev.kind, prev.mb, prev.stage), 0.0))
            dep = _dependency(e.kind, e.mb, e.stage, p, timeline.part1_depths, None)
            if dep is not None:
                preds[key].append((dep, cost.p2p_latency))

    finish: dict = {}

    def visit(key):
        if key in finish:
            return finish[key]
        t = max((visit(d) + lat for d, lat in preds[key]), default=0.0)
        finish[key] = t + nodes[key]
        return finish[key]

    return max(visit(k) for k in nodes)


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------


@dataclass
class StageMemory:
    stage: int
    param_units: int
    peak_stored_microbatches: int
    peak_fill_stored: int
    peak_logit_copies: int
    activation_units: int
    logit_units: int
    total_units: int


def _param_units(cost: CostModel, stage: int, variant: str) -> int:
    h, v = cost.hidden_dim, cost.vocab_size
    units = cost.layers_per_stage * (12 * h * h + 2 * h)
    if stage == 1:
        units += v * h + cost.seq_len * h
    if stage == cost.num_stages:
        units += v * h + h
    if variant != "standard":
        units += cost.early_exits_on(stage) * v * h
    return units


def peak_memory(cost: CostModel, variant: str, fill_plan: FillPlan | None = None,
                timeline: Timeline | None = None) -> list:
    """Per-stage peak memory in float units for the simulated schedule.

    Activation memory counts stored microbatches (forward start to backward
    end) at ACT_UNITS_PER_LAYER * s * b * h per layer; exit logits count
    s * b * V per live copy: one per in-flight microbatch at exit-owning
    stages in the eager variant, at most one in the deferred variant.
    """
    if timeline is None:
        timeline = simulate(cost, variant, fill_plan)
    sbh = cost.seq_len * cost.microbatch_size * cost.hidden_dim
    act_per_mb = ACT_UNITS_PER_LAYER * cost.layers_per_stage * sbh
    sbv = cost.seq_len * cost.microbatch_size * cost.vocab_size
    out = []
    for s in range(1, cost.num_stages + 1):
        evs = timeline.stage_events(s)
        spans = _storage_spans(evs, cost, timeline)
        peak_reg, peak_fill, peak_logit = _sweep_peaks(spans)
        act_units = (peak_reg + peak_fill) * act_per_mb
        logit_units = peak_logit * sbv
        out.append(StageMemory(
            stage=s,
            param_units=_param_units(cost, s, timeline.variant),
            peak_stored_microbatches=peak_reg,
            peak_fill_stored=peak_fill,
            peak_logit_copies=peak_logit,
            activation_units=act_units,
            logit_units=logit_units,
            total_units=_param_units(cost, s, timeline.variant) + act_units + logit_units,
        ))
    return out


def _storage_spans(evs, cost, timeline):
    """(category, start, end) storage intervals for one stage's events."""
    variant = timeline.variant
    s = evs[0].stage if evs else 0
    k_exits = cost.early_exits_on(s) if variant != "standard" else 0
    has_logits = k_exits > 0
    start_of: dict = {}
    end_of: dict = {}
    for e in evs:
        start_of[e.tag()] = e.start
        end_of[e.tag()] = e.end
    spans = []
    for e in evs:
        if e.kind == FWD:
            b_end = end_of.get((BWD, e.mb))
            spans.append(("reg", e.start, b_end if b_end is not None else e.end))
            if has_logits and variant == "eager-exit":
                spans.append(("logit", e.start, b_end if b_end is not None else e.end))
        elif e.kind == BWD and has_logits and variant == "deferred-exit":
            spans.append(("logit", e.start, e.end))
        elif e.kind == FILL1_FWD:
            b_end = end_of.get((FILL1_BWD, e.mb), e.end)
            spans.append(("fill", e.start, b_end))
        elif e.kind == FILL1_BWD and has_logits:
            spans.append(("logit", e.start, e.end))
        elif e.kind == FILL2_FWD:
            b_end = end_of.get((FILL2_BWD, e.mb))
            spans.append(("fill", e.start, b_end if b_end is not None else e.end))
        elif e.kind == FILL2_BWD and has_logits and variant == "deferred-exit":
            spans.append(("logit", e.start, e.end))
    return spans


def _sweep_peaks(spans):
    peaks = {"reg": 0, "fill": 0, "logit": 0}
    points = sorted({t for _, a, b in spans for t in (a, b)})
    for t in points:
        live = {"reg": 0, "fill": 0, "logit": 0}
        for cat, a, b in spans:
            if a <= t < b:
                live[cat] += 1
        for cat in peaks:
            peaks[cat] = max(peaks[cat], live[cat])
    return peaks["reg"], peaks["fill"], peaks["logit"]


def further_optimized_span(cost: CostModel, k: int) -> dict:
    """Analytic span if cool-down exit forwards were hoisted ahead of
    communication: the per-iteration exit overhead drops from
    k*(f_EE + b_EE) to k*b_EE.  Not implemented in the executor; modeled only.
    """
    base = analytic_span(cost, "standard")["total"]
    return {
        "standard_span": base,
        "deferred_span": base + k * (cost.exit_fwd_time + cost.exit_bwd_time),
        "optimized_span": base + k * cost.exit_bwd_time,
        "delta_reduction": k * cost.exit_fwd_time,
    }


# ---------------------------------------------------------------------------
# Bubble geometry measured from a timeline (brute-force check of the plan
# formulas)
# ---------------------------------------------------------------------------


def measured_fill_capacity(cost: CostModel) -> dict:
    """Derive fill capacities by measuring bubbles on an unfilled timeline.

    The capacity formulas abstract away exit-layer and embedding costs, so
    the measurement runs on that idealized twin of the cost model (exit times
    shrunk to a negligible epsilon).  Part 1: the idle window on stage 1
    between its last forward-phase event and its first backward; pack
    k*(f+b) into it.  Part 2: the idle tail on the last stage after its final
    backward, within the iteration span; the i-th inserted microbatch leaves
    floor((remaining - f) / b) backward stages.
    """
    cost = replace(cost, exit_fwd_time=1e-12, exit_bwd_time=1e-12,
                   embed_fwd_time=0.0, p2p_latency=0.0)
    tl = simulate(cost, "standard")
    f, b = cost.fwd_time, cost.bwd_time
    s1 = tl.stage_events(1)
    first_bwd = next(e for e in s1 if e.kind == BWD)
    last_fwd_before = max(e.end for e in s1 if e.kind == FWD and e.end <= first_bwd.start)
    part1_bubble = first_bwd.start - last_fwd_before
    k1 = int((part1_bubble + 1e-9) // (f + b))

    last = tl.stage_events(cost.num_stages)
    part2_bubble = tl.span - last[-1].end
    k2 = int((part2_bubble + 1e-9) // (f + b))
    depths = []
    for i in range(1, k2 + 1):
        remaining = part2_bubble - f - (i - 1) * (f + b)
        depths.append(int((remaining + 1e-9) // b))
    return {
        "part1_bubble": part1_bubble,
        "part2_bubble": part2_bubble,
        "k_part1": k1,
        "k_part2": k2,
        "part2_bwd_depths": tuple(depths),
    }


# ---------------------------------------------------------------------------
# Inference latency model
# ---------------------------------------------------------------------------


def inference_latency(exit_stages, stage_times) -> dict:
    """Per-token latency under pipeline-based early-exit inference vs a
    sequential full-model pass per token.

    ``exit_stages[t]`` is the stage whose exit emitted token t.  Pipelined:
    token t starts at stage 1 once token t-1 was emitted, and its pass at
    stage s waits for token t-1's KV fill at stage s; the token is emitted
    when its exit stage finishes; KV fill continues to the last stage in the
    background.  Per-token speedup is bounded by the number of stages.
    """
    p = len(stage_times)
    full = float(sum(stage_times))
    fills = [0.0] * p  # finish time of the previous token's KV fill per stage
    emit_prev = 0.0
    per_token = []
    for e in exit_stages:
        if not 1 <= e <= p:
            raise ConfigError(f"exit stage {e} out of range")
        finish = [0.0] * p
        arrive = emit_prev
        for s in range(1, p + 1):
            start = max(arrive, fills[s - 1])
            finish[s - 1] = start + stage_times[s - 1]
            arrive = finish[s - 1]
        emit = finish[e - 1]
        per_token.append(emit - emit_prev)
        emit_prev = emit
        fills = finish
    total = sum(per_token)
    seq_total = full * len(exit_stages)
    return {
        "pipeline_per_token": per_token,
        "pipeline_total": total,
        "sequential_per_token": [full] * len(exit_stages),
        "sequential_total": seq_total,
        "per_token_speedup": [full / t for t in per_token],
        "total_speedup": seq_total / total if total else 1.0,
    }


# ---------------------------------------------------------------------------
# Executed-iteration replay checking
# ---------------------------------------------------------------------------


def verify_against_replay(timeline: Timeline, report) -> list:
    """Compare a simulated timeline against an executed TrainStepReport.

    Checks per-stage event order, per-queue message counts, and the
    structural memory accounting (peak stored microbatches / fill storage /
    live logit copies).  Returns a list of discrepancy strings; empty means
    the executed iteration matches the simulation exactly.
    """
    issues = []
    p = timeline.cost.num_stages
    for s in range(1, p + 1):
        sim_order = timeline.order(s)
        exe_order = report.event_log[s - 1]
        if sim_order != exe_order:
            issues.append(
                f"stage {s}: event order mismatch (sim {sim_order} vs run {exe_order})"
            )

    sim_act, sim_grad = _expected_message_counts(timeline)
    for s in range(1, p):
        if report.activation_messages.get(s, 0) != sim_act[s]:
            issues.append(
                f"queue {s}->{s + 1}: {report.activation_messages.get(s, 0)} activation "
                f"messages, simulated {sim_act[s]}"
            )
        if report.gradient_messages.get(s + 1, 0) != sim_grad[s + 1]:
            issues.append(
                f"queue {s + 1}->{s}: {report.gradient_messages.get(s + 1, 0)} gradient "
                f"messages, simulated {sim_grad[s + 1]}"
            )

    mem = peak_memory(timeline.cost, timeline.variant, timeline.fill_plan, timeline)
    for s in range(1, p + 1):
        got = report.memory[s - 1]
        want = mem[s - 1]
        for attr in ("peak_stored_microbatches", "peak_fill_stored", "peak_logit_copies"):
            if getattr(got, attr) != getattr(want, attr):
                issues.append(
                    f"stage {s}: {attr} {getattr(got, attr)} vs simulated {getattr(want, attr)}"
                )
    return issues


def _expected_message_counts(timeline: Timeline):
    p = timeline.cost.num_stages
    depths = timeline.part1_depths
    plan = timeline.fill_plan
    act = {s: 0 for s in range(1, p)}
    grad = {s: 0 for s in range(2, p + 1)}
    for evs in timeline.events:
        for e in evs:
            if e.kind == FWD and e.stage < p:
                act[e.stage] += 1
            elif e.kind == FILL1_FWD and e.stage < depths[e.mb - 1]:
                act[e.stage] += 1
            elif e.kind == FILL2_FWD and e.stage < p:
                act[e.stage] += 1
            elif e.kind == BWD and e.stage > 1:
                grad[e.stage] += 1
            elif e.kind == FILL1_BWD and e.stage > 1:
                grad[e.stage] += 1
            elif e.kind == FILL2_BWD and e.stage > 1:
                r = plan.part2_bwd_depths[e.mb - 1]
                if e.stage > p - r + 1:
                    grad[e.stage] += 1
    return act, grad


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_KIND_COLORS = {
    FWD: "#4c78a8", BWD: "#9ecae9",
    FILL1_FWD: "#f58518", FILL1_BWD: "#ffbf79",
    FILL2_FWD: "#54a24b", FILL2_BWD: "#88d27a",
}


def timeline_records(timeline: Timeline) -> list:
    """Flat event records for line-delimited output."""
    recs = []
    for evs in timeline.events:
        for e in evs:
            recs.append({
                "stage": e.stage, "kind": e.kind, "microbatch": e.mb,
                "start": e.start, "end": e.end,
            })
    recs.sort(key=lambda r: (r["stage"], r["start"]))
    return recs


def render_gantt_svg(timeline: Timeline, px_per_unit=20.0, row_height=28) -> str:
    """Stages as rows, one block per event, microbatch index inside."""
    p = timeline.cost.num_stages
    width = timeline.span * px_per_unit + 90
    height = p * row_height + 50
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="4" y="16">{timeline.variant} span={timeline.span:g}</text>',
    ]
    for s in range(1, p + 1):
        y = 30 + (s - 1) * row_height
        parts.append(f'<text x="4" y="{y + row_height / 2 + 4}">S{s}</text>')
        for e in timeline.stage_events(s):
            x = 60 + e.start * px_per_unit
            w = max(e.duration * px_per_unit, 1.0)
            color = _KIND_COLORS[e.kind]
            parts.append(
                f'<rect x="{x:.1f}" y="{y}" width="{w:.1f}" height="{row_height - 6}" '
                f'fill="{color}" stroke="#333" stroke-width="0.5"/>'
            )
            if w > 12:
                parts.append(
                    f'<text x="{x + w / 2:.1f}" y="{y + row_height / 2 + 3}" '
                    f'text-anchor="middle">{e.mb}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts)
