"""Autoregressive generation with confidence-based early exiting.

Two KV-cache-compatible methods produce identical token sequences:

* pipeline mode: stage workers process positions strictly in order; a token
  is emitted at the first exit whose confidence clears the threshold, the
  next token starts at stage 1 immediately, and the emitted token's pass
  continues through the remaining stages to fill its KV entries in parallel.
* KV-recomputation mode: a single worker keeps a list of recent tokens with
  missing deep KV entries and batches them into the current forward pass,
  resuming each from its stored exit-point hidden state; a pass runs to full
  depth whenever the list has reached its cap (the token decision itself
  still follows the usual exit rule, so outputs stay identical).

Both resume computation from the exact hidden state at the exit point (never
re-embedding the emitted token), so they reproduce full-model hidden states
bit for bit.  All dense math in this module reduces along fixed axes in
ascending index order regardless of how many positions are batched together,
which is what makes batched, incremental, and full-prefix passes agree
bitwise.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from queue import Queue

import numpy as np

from . import kernels
from .errors import ConfigError, NonFiniteError, TokenError
from .model import EarlyExitModel, HeadDesc, ModelConfig, StagePartition
from .schedule import inference_latency

_UNSUPPORTED_HEADS = ("layer+embed",)
_EMIT_TIMEOUT = 120.0


class KVCache:
    """Per-layer key/value store with a monotone fill mask.

    A position's entries at a layer are either fully present or absent;
    filling an already-filled slot is an error (entries are never
    overwritten), and reading an unfilled slot is a bug guard.
    """

    def __init__(self, layer_indices, max_positions, num_heads, head_dim):
        self.layers = {
            l: (
                np.zeros((max_positions, num_heads, head_dim)),
                np.zeros((max_positions, num_heads, head_dim)),
            )
            for l in layer_indices
        }
        self.mask = {l: np.zeros(max_positions, dtype=bool) for l in layer_indices}

    def fill(self, layer, position, k, v):
        if self.mask[layer][position]:
            raise ConfigError(f"KV at layer {layer}, position {position} already filled")
        kb, vb = self.layers[layer]
        kb[position] = k
        vb[position] = v
        self.mask[layer][position] = True

    def view(self, layer, upto):
        if not bool(self.mask[layer][:upto].all()):
            raise ConfigError(f"reading unfilled KV at layer {layer} below {upto}")
        kb, vb = self.layers[layer]
        return kb[:upto], vb[:upto]

    def complete(self, upto):
        return all(bool(m[:upto].all()) for m in self.mask.values())


@dataclass
class DeferredToken:
    """A generated token whose deep-layer KV entries are still missing."""

    position: int
    exit_layer: int  # depth of the stored hidden state
    hidden: np.ndarray  # residual-stream state at that depth


@dataclass
class GenerationTrace:
    prompt: list
    threshold: float
    mode: str
    tokens: list = field(default_factory=list)
    exit_layers: list = field(default_factory=list)
    exit_stages: list = field(default_factory=list)
    confidences: list = field(default_factory=list)  # per token: {head_key: float}
    latencies: list = field(default_factory=list)  # modeled, per token
    total_latency: float = 0.0
    baseline_latency: float = 0.0

    @property
    def speedup(self):
        return self.baseline_latency / self.total_latency if self.total_latency else 1.0

    @property
    def mean_exit_layer(self):
        return float(np.mean(self.exit_layers)) if self.exit_layers else 0.0

    def records(self):
        for i, tok in enumerate(self.tokens):
            yield {
                "position": len(self.prompt) + i,
                "token": int(tok),
                "exit_layer": self.exit_layers[i],
                "exit_stage": self.exit_stages[i] if self.exit_stages else None,
                "confidence": self.confidences[i],
                "latency": self.latencies[i] if i < len(self.latencies) else None,
            }


def exit_decision(logits, threshold):
    """Greedy decision at one exit: confidence is the max softmax probability,
    the token is the argmax (lowest index wins ties), and the exit fires only
    on a strict threshold crossing, so threshold 1.0 never exits early."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite exit logits")
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("threshold must lie in (0, 1]")
    m = logits.max()
    e = np.exp(logits - m)
    probs = e / e.sum()
    token = int(np.argmax(probs))
    confidence = float(probs[token])
    should_exit = threshold < 1.0 and confidence > threshold
    return should_exit, token, confidence


# ---------------------------------------------------------------------------
# Row-stable forward math shared by every inference path
# ---------------------------------------------------------------------------


class _InferParams:
    """Raw-array view of (a subset of) the model: layers plus heads.

    Head output matrices are pre-transposed once so each logits call is a
    single row-stable matmul.
    """

    def __init__(self, params, heads, cfg: ModelConfig, layer_indices, has_embedding):
        def arr(n):
            return params[n].data

        self.cfg = cfg
        self.layer_indices = list(layer_indices)
        self.layers = {
            l: {w: arr(f"layer{l}.{w}")
                for w in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")}
            for l in self.layer_indices
        }
        self.tok_emb = arr("tok_emb") if has_embedding else None
        self.pos_emb = arr("pos_emb") if has_embedding else None
        self.heads = []
        for hd in heads:
            if hd.kind in _UNSUPPORTED_HEADS:
                raise ConfigError(
                    f"head kind {hd.kind!r} is not supported for cached inference"
                )
            mats = {"outT": np.ascontiguousarray(arr(hd.param_names["out"]).T)}
            if "norm" in hd.param_names:
                mats["norm"] = arr(hd.param_names["norm"])
            if hd.kind == "mlp+embed":
                mats.update(pre_norm=arr(hd.param_names["pre_norm"]),
                            w1=arr(hd.param_names["w1"]), w2=arr(hd.param_names["w2"]))
            self.heads.append((hd, mats))

    def head_logits(self, hd: HeadDesc, mats, x_row):
        """Logits for a single position's hidden state (h,) -> (V,)."""
        x = x_row[None, :]
        if hd.kind == "mlp+embed":
            h2, _ = kernels.rmsnorm_fwd(x, mats["pre_norm"], 1e-6)
            x = x + kernels.dot_rows(
                kernels.gelu_fwd(kernels.dot_rows(h2, mats["w1"])), mats["w2"]
            )
        if "norm" in mats:
            x, _ = kernels.rmsnorm_fwd(x, mats["norm"], 1e-6)
        return kernels.dot_rows(x, mats["outT"])[0]

    def embed(self, tokens, positions):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise TokenError("token id out of vocabulary range")
        return self.tok_emb[tokens] + self.pos_emb[np.asarray(positions)]


def _attend_rows(q_rows, positions, cache: KVCache, layer, num_heads):
    """Causal attention for a batch of rows against the cache at one layer.

    Each row attends independently over cache positions [0, pos]; the row's
    own K/V must already be written.  Reductions run in ascending index
    order per output element, so results do not depend on the batch width.
    """
    h = q_rows.shape[1]
    dh = h // num_heads
    scale = 1.0 / np.sqrt(dh)
    out = np.empty_like(q_rows)
    for r, pos in enumerate(positions):
        kb, vb = cache.view(layer, pos + 1)
        q = q_rows[r].reshape(num_heads, dh)
        scores = np.einsum("hd,thd->ht", q, kb, optimize=False) * scale
        m = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=1, keepdims=True)
        out[r] = np.einsum("ht,thd->hd", probs, vb, optimize=False).reshape(h)
    return out


def _layer_step(lp, x, positions, cache: KVCache, layer, num_heads):
    """One transformer layer for the given positions, filling KV at `layer`."""
    h1, _ = kernels.rmsnorm_fwd(x, lp["attn_norm"], 1e-6)
    q = kernels.dot_rows(h1, lp["wq"])
    k = kernels.dot_rows(h1, lp["wk"])
    v = kernels.dot_rows(h1, lp["wv"])
    nh = num_heads
    dh = x.shape[1] // nh
    for r, pos in enumerate(positions):
        cache.fill(layer, pos, k[r].reshape(nh, dh), v[r].reshape(nh, dh))
    a = _attend_rows(q, positions, cache, layer, nh)
    x = x + kernels.dot_rows(a, lp["wo"])
    h2, _ = kernels.rmsnorm_fwd(x, lp["mlp_norm"], 1e-6)
    return x + kernels.dot_rows(kernels.gelu_fwd(kernels.dot_rows(h2, lp["w1"])), lp["w2"])


def _check_context(cfg: ModelConfig, needed):
    if needed > cfg.max_seq_len:
        raise TokenError(
            f"context of {needed} positions exceeds max_seq_len {cfg.max_seq_len}"
        )


def default_stage_times(part: StagePartition):
    """Stage forward times for the latency model: one unit per backbone layer
    plus the Fig-3 backbone-to-exit ratio (half a unit per head)."""
    per = part.config.num_layers // part.num_stages
    return [per * 1.0 + 0.5 * len(st.heads) for st in part.stages]


def full_pass_units(cfg: ModelConfig, num_heads_total):
    """Latency units of one full-model pass; matches sum(default_stage_times)."""
    return cfg.num_layers * 1.0 + 0.5 * num_heads_total


# ---------------------------------------------------------------------------
# KV recomputation mode (single worker)
# ---------------------------------------------------------------------------


def generate_kv_recompute(model: EarlyExitModel, prompt, threshold,
                          max_new_tokens, max_deferred=4) -> GenerationTrace:
    """Incremental decoding that batches deferred early-exit tokens into the
    current pass to recompute their missing KV entries.

    A pass normally stops at the current token's chosen exit; once the
    deferred list holds ``max_deferred`` tokens, the next pass runs to full
    depth and clears it.  A final flush pass completes any remaining KV
    entries after the last token.
    """
    if max_deferred < 1:
        raise ConfigError("max_deferred must be at least 1")
    prompt = list(prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    cfg = model.config
    _check_context(cfg, len(prompt) + max_new_tokens)
    num_l = cfg.num_layers
    ip = _InferParams(model.params, model.heads, cfg, range(1, num_l + 1), True)
    cache = KVCache(range(1, num_l + 1), cfg.max_seq_len, cfg.num_heads,
                    cfg.hidden_dim // cfg.num_heads)
    trace = GenerationTrace(prompt, threshold, "recompute")
    conf_log: dict[int, dict] = {}
    deferred: list[DeferredToken] = []
    full_units = full_pass_units(cfg, len(model.heads))
    pass_depths: list[int] = []

    def run_pass(rows_x, rows_pos, rows_entry, decide_pos, forced):
        """Advance rows through the layers.  Returns (decision, depth, rows).

        A row is evaluated at tap t once it newly reaches it (t > entry, or
        t = 0 for a fresh row); the decide row's first firing exit picks the
        token.  ``forced`` suppresses the early stop, not the decision.
        """
        x = rows_x.copy()
        decision = None

        def eval_tap(tap):
            nonlocal decision
            for hd, mats in ip.heads:
                if hd.layer_index != tap:
                    continue
                for r, pos in enumerate(rows_pos):
                    e = rows_entry[r]
                    fresh = tap > e or (tap == 0 and e == 0)
                    wanted = pos == decide_pos or e > 0
                    if not (fresh and wanted):
                        continue
                    logits = ip.head_logits(hd, mats, x[r])
                    fire, token, conf = exit_decision(logits, threshold)
                    conf_log.setdefault(pos, {})[hd.key] = conf
                    if pos == decide_pos and decision is None:
                        if hd.is_final:
                            decision = (token, num_l)
                        elif fire:
                            decision = (token, hd.layer_index)

        eval_tap(0)
        if decision is not None and not forced and decision[1] == 0:
            return decision, 0, x
        for layer in range(1, num_l + 1):
            active = [r for r in range(len(rows_pos)) if rows_entry[r] < layer]
            if active:
                xa = _layer_step(ip.layers[layer], x[active],
                                 [rows_pos[r] for r in active], cache, layer,
                                 cfg.num_heads)
                x[active] = xa
            eval_tap(layer)
            if (decision is not None and not forced
                    and decision[1] == layer and layer < num_l):
                return decision, layer, x
        return decision, num_l, x

    # Prefill: all prompt positions at full depth; the last position's exits
    # decide the first generated token.
    t0 = len(prompt)
    x0 = ip.embed(prompt, range(t0))
    decision, depth, _ = run_pass(x0, list(range(t0)), [0] * t0, t0 - 1, forced=True)
    pass_depths.append(num_l)

    position = t0 - 1
    for i in range(max_new_tokens):
        token, exit_layer = decision
        trace.tokens.append(token)
        trace.exit_layers.append(exit_layer)
        if i == max_new_tokens - 1:
            break
        position += 1
        forced = len(deferred) >= max_deferred
        rows = list(deferred)
        new_row = ip.embed([token], [position])
        rows_x = (
            np.concatenate([np.stack([d.hidden for d in rows]), new_row])
            if rows else new_row
        )
        rows_pos = [d.position for d in rows] + [position]
        rows_entry = [d.exit_layer for d in rows] + [0]
        decision, depth, xs = run_pass(rows_x, rows_pos, rows_entry, position, forced)
        pass_depths.append(depth)
        deferred = []
        if depth < num_l:
            for r, d in enumerate(rows):
                deferred.append(DeferredToken(d.position, max(d.exit_layer, depth),
                                              xs[r].copy()))
            deferred.append(DeferredToken(position, depth, xs[-1].copy()))
        if len(deferred) > max_deferred:
            raise RuntimeError("deferred list overflow")  # internal bug guard

    flush_cost = 0.0
    if deferred:  # complete remaining KV entries and deep-exit confidences
        rows_x = np.stack([d.hidden for d in deferred])
        run_pass(rows_x, [d.position for d in deferred],
                 [d.exit_layer for d in deferred], None, forced=True)
        flush_cost = full_units
        deferred = []

    gen = len(trace.tokens)
    if gen and not cache.complete(t0 + gen - 1):
        raise ConfigError("KV fill mask incomplete after generation")
    trace.confidences = [conf_log.get(t0 - 1 + i, {}) for i in range(gen)]
    # Token i's modeled latency is the depth fraction of the pass that decided
    # it (the first token is decided by the full-depth prefill pass).
    trace.latencies = [full_units * d / num_l for d in pass_depths[:gen]]
    trace.total_latency = sum(trace.latencies) + flush_cost
    trace.baseline_latency = full_units * gen
    return trace


# ---------------------------------------------------------------------------
# Pipeline mode (stage workers)
# ---------------------------------------------------------------------------


@dataclass
class _FwdMsg:
    x: np.ndarray  # (m, h) hidden rows
    positions: list
    decide_pos: int
    emitted: bool
    stop: bool = False


@dataclass
class _EmitMsg:
    position: int
    token: int
    exit_layer: int
    exit_stage: int


class _InferStage:
    """One pipeline stage in inference mode: strict position order, local KV."""

    def __init__(self, spec, cfg, threshold, q_in, q_out, emit_q, conf_log, lock):
        heads = [hd for _, hd in spec.heads]
        self.spec = spec
        self.cfg = cfg
        self.threshold = threshold
        self.ip = _InferParams(spec.params, heads, cfg, spec.layer_indices,
                               spec.has_embedding)
        self.cache = KVCache(spec.layer_indices, cfg.max_seq_len, cfg.num_heads,
                             cfg.hidden_dim // cfg.num_heads)
        self.heads_at: dict[int, list] = {}
        for pos, hd in spec.heads:
            self.heads_at.setdefault(pos, []).append(hd)
        self.mats_of = {hd.key: mats for hd, mats in self.ip.heads}
        self.q_in = q_in
        self.q_out = q_out
        self.emit_q = emit_q
        self.conf_log = conf_log
        self.lock = lock
        self.exception = None

    def _check_heads(self, msg: _FwdMsg, local_pos, x):
        for hd in self.heads_at.get(local_pos, []):
            mats = self.mats_of[hd.key]
            for r, pos in enumerate(msg.positions):
                if pos != msg.decide_pos:
                    continue
                logits = self.ip.head_logits(hd, mats, x[r])
                fire, token, conf = exit_decision(logits, self.threshold)
                with self.lock:
                    self.conf_log.setdefault(pos, {})[hd.key] = conf
                if not msg.emitted and (fire or hd.is_final):
                    self.emit_q.put(
                        _EmitMsg(pos, token, hd.layer_index, self.spec.index)
                    )
                    msg.emitted = True

    def run(self):
        try:
            while True:
                msg: _FwdMsg = self.q_in.get()
                if msg.stop:
                    if self.q_out is not None:
                        self.q_out.put(msg)
                    return
                x = msg.x
                self._check_heads(msg, 0, x)
                for local, layer in enumerate(self.spec.layer_indices, start=1):
                    x = _layer_step(self.ip.layers[layer], x, msg.positions,
                                    self.cache, layer, self.cfg.num_heads)
                    self._check_heads(msg, local, x)
                if self.q_out is not None:
                    self.q_out.put(_FwdMsg(x, msg.positions, msg.decide_pos, msg.emitted))
        except BaseException as exc:
            self.exception = exc
            self.emit_q.put(exc)


def generate_pipeline(part: StagePartition, prompt, threshold,
                      max_new_tokens, stage_times=None) -> GenerationTrace:
    """Pipeline-based early-exit inference over the partition's stage workers.

    Stage s processes positions strictly in order, so a token's forward pass
    observes complete KV for every earlier position; the emitted token's pass
    keeps flowing toward the last stage, filling its KV behind the next
    token's pass.  The shallowest exit that clears the threshold wins.  Trace
    latencies come from the analytic pipeline latency model.
    """
    if part.num_stages < 2:
        raise ConfigError("pipeline inference needs at least 2 stages")
    prompt = list(prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    cfg = part.config
    _check_context(cfg, len(prompt) + max_new_tokens)
    conf_log: dict[int, dict] = {}
    lock = threading.Lock()
    queues = [Queue() for _ in range(part.num_stages)]
    emit_q: Queue = Queue()
    stages = []
    for i, spec in enumerate(part.stages):
        q_out = queues[i + 1] if i + 1 < part.num_stages else None
        stages.append(_InferStage(spec, cfg, threshold, queues[i], q_out,
                                  emit_q, conf_log, lock))
    threads = [
        threading.Thread(target=s.run, daemon=True, name=f"infer-stage-{s.spec.index}")
        for s in stages
    ]
    for t in threads:
        t.start()

    embedder = stages[0].ip
    t0 = len(prompt)
    trace = GenerationTrace(prompt, threshold, "pipeline")
    queues[0].put(_FwdMsg(embedder.embed(prompt, range(t0)), list(range(t0)),
                          t0 - 1, emitted=False))
    position = t0 - 1
    try:
        for i in range(max_new_tokens):
            emit = emit_q.get(timeout=_EMIT_TIMEOUT)
            if isinstance(emit, BaseException):
                raise emit
            trace.tokens.append(emit.token)
            trace.exit_layers.append(emit.exit_layer)
            trace.exit_stages.append(emit.exit_stage)
            if i == max_new_tokens - 1:
                break
            position += 1
            queues[0].put(_FwdMsg(embedder.embed([emit.token], [position]),
                                  [position], position, emitted=False))
    finally:
        queues[0].put(_FwdMsg(np.empty((0, cfg.hidden_dim)), [], -1,
                              emitted=True, stop=True))
        for t in threads:
            t.join(timeout=_EMIT_TIMEOUT)
    for s in stages:
        if s.exception is not None:
            raise s.exception

    gen = len(trace.tokens)
    if gen:
        for s in stages:
            if not s.cache.complete(t0 + gen - 1):
                raise ConfigError("KV fill mask incomplete after generation")

    trace.confidences = [conf_log.get(t0 - 1 + i, {}) for i in range(gen)]
    times = stage_times if stage_times is not None else default_stage_times(part)
    lat = inference_latency(trace.exit_stages, times)
    trace.latencies = lat["pipeline_per_token"]
    trace.total_latency = lat["pipeline_total"]
    trace.baseline_latency = lat["sequential_total"]
    return trace


# ---------------------------------------------------------------------------
# Reference decoding and mode comparison
# ---------------------------------------------------------------------------


def greedy_reference(model: EarlyExitModel, prompt, max_new_tokens):
    """Monolithic full-model greedy decoding with no persistent cache: the
    whole prefix is recomputed for every token.  Independent oracle for the
    threshold-1.0 behaviour of both cached modes."""
    cfg = model.config
    prompt = list(prompt)
    _check_context(cfg, len(prompt) + max_new_tokens)
    final = next(hd for hd in model.heads if hd.is_final)
    ip = _InferParams(model.params, [final], cfg, range(1, cfg.num_layers + 1), True)
    tokens = list(prompt)
    out = []
    for _ in range(max_new_tokens):
        cache = KVCache(range(1, cfg.num_layers + 1), cfg.max_seq_len,
                        cfg.num_heads, cfg.hidden_dim // cfg.num_heads)
        x = ip.embed(tokens, range(len(tokens)))
        positions = list(range(len(tokens)))
        for layer in range(1, cfg.num_layers + 1):
            x = _layer_step(ip.layers[layer], x, positions, cache, layer, cfg.num_heads)
        hd, mats = ip.heads[0]
        _, token, _ = exit_decision(ip.head_logits(hd, mats, x[-1]), 1.0)
        out.append(token)
        tokens.append(token)
    return out


def compare_modes(model: EarlyExitModel, part: StagePartition, prompts,
                  thresholds, max_new_tokens, max_deferred=4):
    """Run both inference methods over the prompt set and check equivalence.

    Returns a report whose ``divergences`` list is empty when the two methods
    agree token for token (exit layers and confidences are compared bitwise
    as well); per-run statistics cover exit depth, modeled latency, and
    speedup against the threshold-1.0 baseline.
    """
    report = {"divergences": [], "runs": []}
    for p_idx, prompt in enumerate(prompts):
        for thr in thresholds:
            pipe = generate_pipeline(part, prompt, thr, max_new_tokens)
            reco = generate_kv_recompute(model, prompt, thr, max_new_tokens,
                                         max_deferred)
            problem = None
            if pipe.tokens != reco.tokens:
                problem = next(
                    i for i, (a, b) in enumerate(zip(pipe.tokens, reco.tokens))
                    if a != b
                )
            elif pipe.exit_layers != reco.exit_layers:
                problem = "exit layers"
            elif pipe.confidences != reco.confidences:
                problem = "confidences"
            if problem is not None:
                report["divergences"].append({
                    "prompt": p_idx, "threshold": thr, "first_diff": problem,
                    "pipeline": pipe.tokens, "recompute": reco.tokens,
                })
                continue
            report["runs"].append({
                "prompt": p_idx,
                "threshold": thr,
                "tokens": list(pipe.tokens),
                "mean_exit_layer": pipe.mean_exit_layer,
                "pipeline_latency": pipe.total_latency,
                "pipeline_speedup": pipe.speedup,
                "recompute_latency": reco.total_latency,
                "recompute_speedup": reco.speedup,
            })
    return report
