"""Early-exit decoder-only transformer and its partition into pipeline stages.

The backbone is a pre-norm GPT: learned token + position embeddings, then
``num_layers`` blocks of (rmsnorm, attention, residual, rmsnorm, mlp,
residual).  Exit heads tap the residual stream between layers: tap index 0 is
the stream right after the embeddings, tap index ``num_layers`` is the input
of the final head.  With ``tie_embeddings`` the input embedding matrix is
shared with every early-exit output matrix (gradients from all uses
accumulate into it); the final head always owns its output matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    causal_attention,
    cross_entropy,
    embedding_lookup,
    gelu,
    matmul,
    rmsnorm,
    scale,
)
from .errors import ConfigError, ShapeError, TokenError

HEAD_KINDS = ("minimalistic", "norm+embed", "mlp+embed", "layer+embed")


@dataclass(frozen=True)
class ExitSpec:
    layer_index: int
    head_kind: str = "minimalistic"
    loss_weight: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    vocab_size: int
    max_seq_len: int
    exits: tuple = ()
    tie_embeddings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "exits", tuple(self.exits))
        if self.num_layers <= 0 or self.hidden_dim <= 0 or self.vocab_size <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.max_seq_len <= 0 or self.num_heads <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads"
            )
        seen = set()
        for e in self.exits:
            if e.layer_index < 0 or e.layer_index > self.num_layers:
                raise ConfigError(f"exit layer index {e.layer_index} out of range")
            if e.layer_index in seen:
                raise ConfigError(f"duplicate exit layer index {e.layer_index}")
            if e.head_kind not in HEAD_KINDS:
                raise ConfigError(f"unknown head kind {e.head_kind!r}")
            if e.loss_weight < 0:
                raise ConfigError("exit loss weights must be non-negative")
            seen.add(e.layer_index)


@dataclass(frozen=True)
class HeadDesc:
    """One output head: an early exit or the final head."""

    key: str
    kind: str
    layer_index: int
    loss_weight: float
    is_final: bool
    param_names: dict = field(default_factory=dict)


class EarlyExitModel:
    """Parameters plus head layout; forward logic lives in module functions."""

    def __init__(self, config: ModelConfig, params: dict, heads: list):
        self.config = config
        self.params = params  # canonical name -> Tensor, each tensor exactly once
        self.heads = heads  # sorted by depth, final last

    @property
    def early_heads(self):
        return [h for h in self.heads if not h.is_final]

    def param_count(self):
        return sum(t.data.size for t in self.params.values())

    def named_arrays(self):
        return {name: t.data for name, t in self.params.items()}


def _head_param_names(key, kind, out_name):
    names = {"out": out_name}
    if kind in ("norm+embed", "mlp+embed", "layer+embed"):
        names["norm"] = f"{key}.norm"
    if kind == "mlp+embed":
        names.update(pre_norm=f"{key}.pre_norm", w1=f"{key}.w1", w2=f"{key}.w2")
    if kind == "layer+embed":
        names.update(
            attn_norm=f"{key}.attn_norm", wq=f"{key}.wq", wk=f"{key}.wk",
            wv=f"{key}.wv", wo=f"{key}.wo",
            mlp_norm=f"{key}.mlp_norm", w1=f"{key}.w1", w2=f"{key}.w2",
        )
    return names


def head_param_size(kind, hidden_dim, vocab_size, tied):
    h, v = hidden_dim, vocab_size
    size = 0 if tied else v * h
    if kind in ("norm+embed", "mlp+embed", "layer+embed"):
        size += h
    if kind == "mlp+embed":
        size += h + 8 * h * h
    if kind == "layer+embed":
        size += 2 * h + 12 * h * h
    return size


def expected_param_count(config: ModelConfig):
    """Closed-form parameter count, tested against enumeration."""
    h, v = config.hidden_dim, config.vocab_size
    backbone = v * h + config.max_seq_len * h + config.num_layers * (12 * h * h + 2 * h)
    final = h + v * h
    exits = sum(
        head_param_size(e.head_kind, h, v, config.tie_embeddings) for e in config.exits
    )
    return backbone + final + exits


def build_model(config: ModelConfig, seed: int) -> EarlyExitModel:
    """Deterministic initialization: same (config, seed) gives bitwise-equal
    parameters.  Backbone and final head are drawn before any exit head, so a
    model with exits shares its backbone bit-for-bit with the exit-free model
    of the same seed.
    """
    h, v = config.hidden_dim, config.vocab_size
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    normal("tok_emb", (v, h))
    normal("pos_emb", (config.max_seq_len, h))
    for i in range(1, config.num_layers + 1):
        pre = f"layer{i}"
        ones(f"{pre}.attn_norm", (h,))
        for w in ("wq", "wk", "wv", "wo"):
            normal(f"{pre}.{w}", (h, h))
        ones(f"{pre}.mlp_norm", (h,))
        normal(f"{pre}.w1", (h, 4 * h))
        normal(f"{pre}.w2", (4 * h, h))
    ones("final.norm", (h,))
    normal("final.out", (v, h))

    def draw_head(key, kind, tied):
        out_name = "tok_emb" if tied else f"{key}.out"
        names = _head_param_names(key, kind, out_name)
        if not tied:
            normal(out_name, (v, h))
        if "norm" in names:
            ones(names["norm"], (h,))
        if kind == "mlp+embed":
            ones(names["pre_norm"], (h,))
            normal(names["w1"], (h, 4 * h))
            normal(names["w2"], (4 * h, h))
        if kind == "layer+embed":
            ones(names["attn_norm"], (h,))
            for w in ("wq", "wk", "wv", "wo"):
                normal(names[w], (h, h))
            ones(names["mlp_norm"], (h,))
            normal(names["w1"], (h, 4 * h))
            normal(names["w2"], (4 * h, h))
        return names

    heads = []
    for e in sorted(config.exits, key=lambda e: e.layer_index):
        key = f"exit_l{e.layer_index}"
        names = draw_head(key, e.head_kind, config.tie_embeddings)
        heads.append(HeadDesc(key, e.head_kind, e.layer_index, e.loss_weight, False, names))
    heads.append(
        HeadDesc(
            "final", "norm+embed", config.num_layers, 1.0, True,
            {"norm": "final.norm", "out": "final.out"},
        )
    )
    heads.sort(key=lambda hd: (hd.layer_index, hd.is_final))
    return EarlyExitModel(config, params, heads)


def run_layer(params: dict, prefix: str, x: Tensor, num_heads: int) -> Tensor:
    h1 = rmsnorm(x, params[f"{prefix}.attn_norm"])
    q = matmul(h1, params[f"{prefix}.wq"])
    k = matmul(h1, params[f"{prefix}.wk"])
    v = matmul(h1, params[f"{prefix}.wv"])
    a = causal_attention(q, k, v, num_heads)
    x = add(x, matmul(a, params[f"{prefix}.wo"]))
    h2 = rmsnorm(x, params[f"{prefix}.mlp_norm"])
    m = matmul(gelu(matmul(h2, params[f"{prefix}.w1"])), params[f"{prefix}.w2"])
    return add(x, m)


def run_head(params: dict, head: HeadDesc, x: Tensor, num_heads: int) -> Tensor:
    """Hidden states (B, S, h) -> logits (B, S, V) for one head."""
    names = head.param_names
    if head.kind == "mlp+embed":
        h2 = rmsnorm(x, params[names["pre_norm"]])
        m = matmul(gelu(matmul(h2, params[names["w1"]])), params[names["w2"]])
        x = add(x, m)
    elif head.kind == "layer+embed":
        x = run_layer(params, head.key, x, num_heads)
    if "norm" in names:
        x = rmsnorm(x, params[names["norm"]])
    return matmul(x, params[names["out"]], transpose_b=True)


def embed_tokens(params: dict, tokens, max_seq_len: int) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    if tokens.shape[1] > max_seq_len:
        raise TokenError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {max_seq_len}"
        )
    emb = embedding_lookup(params["tok_emb"], tokens)
    pos = embedding_lookup(params["pos_emb"], np.arange(tokens.shape[1]))
    return add(emb, pos)


def forward_all_exits(model: EarlyExitModel, tokens) -> list:
    """Logits at every head, ordered by depth with the final head last.

    Exit heads are computed after the full backbone pass; they are read-only
    taps on stored residual-stream states, so the backbone arithmetic is
    identical to the exit-free model.
    """
    cfg = model.config
    taps_wanted = {h.layer_index for h in model.heads}
    x = embed_tokens(model.params, tokens, cfg.max_seq_len)
    taps = {0: x} if 0 in taps_wanted else {}
    for i in range(1, cfg.num_layers + 1):
        x = run_layer(model.params, f"layer{i}", x, cfg.num_heads)
        if i in taps_wanted:
            taps[i] = x
    return [run_head(model.params, hd, taps[hd.layer_index], cfg.num_heads) for hd in model.heads]


def weighted_loss(model: EarlyExitModel, batch, weights):
    """Scalar Σ w_i · (mean next-token cross-entropy at exit i).

    ``batch`` is (B, S+1) token ids; inputs are batch[:, :-1] and targets are
    batch[:, 1:].  Returns (scalar Tensor, per-exit float losses).
    """
    weights = list(weights)
    if len(weights) != len(model.heads):
        raise ShapeError(
            f"{len(weights)} weights for {len(model.heads)} exits (final included)"
        )
    batch = np.asarray(batch)
    logits = forward_all_exits(model, batch[:, :-1])
    targets = batch[:, 1:]
    per_exit = []
    total = None
    for lg, w in zip(logits, weights):
        ce = cross_entropy(lg, targets)
        per_exit.append(ce.item())
        term = scale(ce, w)
        total = term if total is None else add(total, term)
    return total, per_exit


@dataclass
class StageSpec:
    """Everything one pipeline stage owns.

    ``heads`` pairs each local head with the number of local layers applied
    before its tap.  ``params`` are fresh copies so stage tapes never alias
    the monolithic model.
    """

    index: int
    layer_indices: list
    has_embedding: bool
    heads: list  # (local_pos, HeadDesc)
    params: dict  # name -> Tensor (stage-local copies)


@dataclass
class StagePartition:
    config: ModelConfig
    num_stages: int
    stages: list
    tied_replicas: dict  # canonical name -> list of stage indices holding a copy

    def exit_stages(self):
        """Stage index of every early-exit head, in depth order."""
        out = []
        for st in self.stages:
            out.extend(st.index for _, hd in st.heads if not hd.is_final)
        return out

    def stage_of_head(self, key):
        for st in self.stages:
            for _, hd in st.heads:
                if hd.key == key:
                    return st.index
        raise KeyError(key)


def exit_stage_index(layer_index: int, num_layers: int, num_stages: int) -> int:
    """Stage owning the tap at ``layer_index``.

    A tap on a stage boundary attaches to the beginning of the later stage;
    tap 0 lands on stage 1 and tap ``num_layers`` on the last stage.
    """
    per = num_layers // num_stages
    return min(layer_index // per + 1, num_stages)


def partition(model: EarlyExitModel, num_stages: int) -> StagePartition:
    cfg = model.config
    if num_stages <= 0:
        raise ConfigError("stage count must be positive")
    if cfg.num_layers % num_stages:
        raise ConfigError(
            f"{cfg.num_layers} layers not divisible into {num_stages} stages"
        )
    per = cfg.num_layers // num_stages

    stage_heads: dict[int, list] = {s: [] for s in range(1, num_stages + 1)}
    for hd in model.heads:
        s = exit_stage_index(hd.layer_index, cfg.num_layers, num_stages)
        local_pos = hd.layer_index - (s - 1) * per
        stage_heads[s].append((local_pos, hd))
    for lst in stage_heads.values():
        lst.sort(key=lambda t: (t[0], t[1].is_final))

    tied_replicas: dict[str, list] = {}
    stages = []
    for s in range(1, num_stages + 1):
        layer_indices = list(range((s - 1) * per + 1, s * per + 1))
        names = set()
        if s == 1:
            names.update(("tok_emb", "pos_emb"))
        for i in layer_indices:
            names.update(n for n in model.params if n.startswith(f"layer{i}."))
        for _, hd in stage_heads[s]:
            names.update(hd.param_names.values())
        params = {n: Tensor(model.params[n].data.copy(), requires_grad=True) for n in names}
        stages.append(StageSpec(s, layer_indices, s == 1, stage_heads[s], params))

    holders: dict[str, list] = {}
    for st in stages:
        for n in st.params:
            holders.setdefault(n, []).append(st.index)
    for n, hs in holders.items():
        if len(hs) > 1:
            tied_replicas[n] = sorted(hs)

    return StagePartition(cfg, num_stages, stages, tied_replicas)


def stage_forward(stage: StageSpec, x_or_tokens, cfg: ModelConfig, upto_local_layer=None):
    """Run one stage's backbone: embedding (stage 1) then its local layers.

    Returns (output hidden states, taps) where taps maps local head position
    to the residual-stream tensor it reads.  ``upto_local_layer`` truncates
    the stage for partial (bubble-fill) passes.
    """
    n_local = len(stage.layer_indices)
    stop = n_local if upto_local_layer is None else upto_local_layer
    if stage.has_embedding:
        x = embed_tokens(stage.params, x_or_tokens, cfg.max_seq_len)
    else:
        x = x_or_tokens
    taps = {0: x}
    for pos, layer_idx in enumerate(stage.layer_indices[:stop], start=1):
        x = run_layer(stage.params, f"layer{layer_idx}", x, cfg.num_heads)
        taps[pos] = x
    return x, taps
