"""Run configuration: a documented key/value text format.

One `key = value` per line, `#` starts a comment.  Dotted keys group the
model, parallelism, training, inference, and data sections; lists are
comma-separated; exits are `layer:kind:weight` triples.  A full annotated
example lives in docs/example-config.txt.  Parsing then serializing then
parsing again yields an equal configuration.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ExitSpec, ModelConfig
from .pipeline import WeightSchedule


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    stages: int = 4
    microbatch_size: int = 2
    global_batch_size: int = 8
    steps: int = 500
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    weight_kind: str = "constant"  # constant | linear
    weight_start: tuple = ()
    weight_end: tuple = ()
    weight_span: int = 0
    defer_exit_forward: bool = True
    fill_bubbles: bool = False
    fill_f_over_b: float = 0.5
    thresholds: tuple = (1.0, 0.9, 0.8)
    infer_mode: str = "both"  # pipeline | recompute | both
    max_deferred: int = 4
    max_new_tokens: int = 24
    data_kind: str = "markov"  # markov | file
    data_path: str = ""
    data_seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.global_batch_size % self.microbatch_size:
            raise ConfigError(
                f"global batch {self.global_batch_size} not divisible by "
                f"microbatch size {self.microbatch_size}"
            )
        if self.data_seq_len > self.model.max_seq_len:
            raise ConfigError("data.seq_len exceeds model.max_seq_len")
        if self.infer_mode not in ("pipeline", "recompute", "both"):
            raise ConfigError(f"unknown inference mode {self.infer_mode!r}")
        if self.data_kind not in ("markov", "file"):
            raise ConfigError(f"unknown data kind {self.data_kind!r}")
        if self.data_kind == "file" and not os.path.exists(self.data_path):
            raise ConfigError(f"token file {self.data_path!r} does not exist")
        n_early = len(self.model.exits)
        if self.weight_start and len(self.weight_start) != n_early:
            raise ConfigError("weight_start length must match the exit count")

    def weight_schedule(self) -> WeightSchedule:
        early = self.weight_start or tuple(
            e.loss_weight for e in sorted(self.model.exits, key=lambda e: e.layer_index)
        )
        if self.weight_kind == "constant":
            return WeightSchedule("constant", early=early)
        return WeightSchedule("linear", early=early, early_end=self.weight_end,
                              span_steps=self.weight_span)

    def corpus(self):
        from .corpus import MarkovCorpus, TokenFileCorpus

        if self.data_kind == "markov":
            return MarkovCorpus(self.model.vocab_size, self.seed)
        return TokenFileCorpus(self.data_path, self.model.vocab_size)


def _fmt_exits(exits):
    return ", ".join(f"{e.layer_index}:{e.head_kind}:{e.loss_weight!r}" for e in exits)


def _parse_exits(text):
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"bad exit spec {part!r}, want layer:kind:weight")
        out.append(ExitSpec(int(bits[0]), bits[1], float(bits[2])))
    return tuple(out)


def _fmt_floats(xs):
    return ", ".join(repr(float(x)) for x in xs)


def _parse_floats(text):
    return tuple(float(p) for p in text.split(",") if p.strip())


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def serialize(cfg: RunConfig) -> str:
    m = cfg.model
    lines = [
        "# eepipe run configuration",
        f"model.num_layers = {m.num_layers}",
        f"model.hidden_dim = {m.hidden_dim}",
        f"model.num_heads = {m.num_heads}",
        f"model.vocab_size = {m.vocab_size}",
        f"model.max_seq_len = {m.max_seq_len}",
        f"model.exits = {_fmt_exits(m.exits)}",
        f"model.tie_embeddings = {str(m.tie_embeddings).lower()}",
        f"parallel.stages = {cfg.stages}",
        f"parallel.microbatch_size = {cfg.microbatch_size}",
        f"parallel.global_batch_size = {cfg.global_batch_size}",
        f"train.steps = {cfg.steps}",
        f"train.optimizer = {cfg.optimizer}",
        f"train.learning_rate = {cfg.learning_rate!r}",
        f"train.weight_kind = {cfg.weight_kind}",
        f"train.weight_start = {_fmt_floats(cfg.weight_start)}",
        f"train.weight_end = {_fmt_floats(cfg.weight_end)}",
        f"train.weight_span = {cfg.weight_span}",
        f"train.defer_exit_forward = {str(cfg.defer_exit_forward).lower()}",
        f"train.fill_bubbles = {str(cfg.fill_bubbles).lower()}",
        f"train.fill_f_over_b = {cfg.fill_f_over_b!r}",
        f"infer.thresholds = {_fmt_floats(cfg.thresholds)}",
        f"infer.mode = {cfg.infer_mode}",
        f"infer.max_deferred = {cfg.max_deferred}",
        f"infer.max_new_tokens = {cfg.max_new_tokens}",
        f"data.kind = {cfg.data_kind}",
        f"data.path = {cfg.data_path}",
        f"data.seq_len = {cfg.data_seq_len}",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in kv:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value

    def take(key, default=None, conv=str):
        if key not in kv:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            return default
        raw = kv.pop(key)
        try:
            if conv is bool:
                return _BOOLS[raw.lower()]
            return conv(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc

    model = ModelConfig(
        num_layers=take("model.num_layers", conv=int),
        hidden_dim=take("model.hidden_dim", conv=int),
        num_heads=take("model.num_heads", conv=int),
        vocab_size=take("model.vocab_size", conv=int),
        max_seq_len=take("model.max_seq_len", conv=int),
        exits=take("model.exits", default=(), conv=_parse_exits),
        tie_embeddings=take("model.tie_embeddings", default=False, conv=bool),
    )
    cfg = RunConfig(
        model=model,
        stages=take("parallel.stages", 4, int),
        microbatch_size=take("parallel.microbatch_size", 2, int),
        global_batch_size=take("parallel.global_batch_size", 8, int),
        steps=take("train.steps", 500, int),
        optimizer=take("train.optimizer", "adam"),
        learning_rate=take("train.learning_rate", 1e-3, float),
        weight_kind=take("train.weight_kind", "constant"),
        weight_start=take("train.weight_start", (), _parse_floats),
        weight_end=take("train.weight_end", (), _parse_floats),
        weight_span=take("train.weight_span", 0, int),
        defer_exit_forward=take("train.defer_exit_forward", True, bool),
        fill_bubbles=take("train.fill_bubbles", False, bool),
        fill_f_over_b=take("train.fill_f_over_b", 0.5, float),
        thresholds=take("infer.thresholds", (1.0, 0.9, 0.8), _parse_floats),
        infer_mode=take("infer.mode", "both"),
        max_deferred=take("infer.max_deferred", 4, int),
        max_new_tokens=take("infer.max_new_tokens", 24, int),
        data_kind=take("data.kind", "markov"),
        data_path=take("data.path", "", str),
        data_seq_len=take("data.seq_len", 32, int),
        seed=take("seed", 0, int),
    )
    if kv:
        raise ConfigError(f"unknown keys: {sorted(kv)}")
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def desk_scale_config(**overrides) -> RunConfig:
    """The default desk-scale setup: 8 layers, h=64, exits at 1/4 and 1/2
    depth with weights 0.25/0.5, stages=4."""
    model = ModelConfig(
        num_layers=8, hidden_dim=64, num_heads=4, vocab_size=256, max_seq_len=64,
        exits=(ExitSpec(2, "minimalistic", 0.25), ExitSpec(4, "minimalistic", 0.5)),
        tie_embeddings=False,
    )
    base = dict(model=model)
    base.update(overrides)
    return RunConfig(**base)
