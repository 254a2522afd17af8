"""Command-line entry point: train, analyze-schedule, generate, verify."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import schedule as sched
from .bubblefill import plan_bubble_fill
from .errors import ConfigError
from .inference import generate_kv_recompute, generate_pipeline
from .model import partition
from .training import train
from .verify import run_suites


def _load_config(path):
    try:
        return cfgmod.load(path)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found")


def cmd_train(args):
    cfg = _load_config(args.config)
    corpus = cfg.corpus()
    metrics = args.metrics or "metrics.jsonl"

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            losses = " ".join(f"{k}={v:.4f}" for k, v in rec["losses"].items())
            print(f"step {rec['step']:>5d}  {losses}  ({rec['time']:.3f}s)")

    model, _history = train(cfg, corpus, metrics_path=metrics, progress=progress)
    if args.checkpoint:
        ckpt.save_model(args.checkpoint, model)
        print(f"checkpoint written to {args.checkpoint}")
    print(f"metrics written to {metrics}")
    return 0


def _parse_variants(text):
    names = {
        "standard": ("standard", False),
        "eager": ("eager-exit", False),
        "deferred": ("deferred-exit", False),
        "deferred+fill": ("deferred-exit", True),
    }
    out = []
    for part in text.split(","):
        part = part.strip()
        if part not in names:
            raise ConfigError(f"unknown variant {part!r}; choose from {sorted(names)}")
        out.append((part, *names[part]))
    return out


def cmd_analyze(args):
    cfg = _load_config(args.config)
    from .model import build_model
    from .pipeline import cost_model_from_partition

    model = build_model(cfg.model, cfg.seed)
    part = partition(model, cfg.stages)
    num_mb = cfg.global_batch_size // cfg.microbatch_size
    cost = cost_model_from_partition(part, num_mb, cfg.microbatch_size,
                                     cfg.data_seq_len)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    std_span = None
    std_peak = None
    for label, variant, with_fill in _parse_variants(args.variants):
        plan = plan_bubble_fill(cfg.stages, cfg.fill_f_over_b) if with_fill else None
        tl = sched.simulate(cost, variant, plan)
        mem = sched.peak_memory(cost, variant, plan, tl)
        peak = max(m.total_units for m in mem)
        if std_span is None:
            std_span, std_peak = tl.span, peak
        rows.append({
            "variant": label,
            "span": tl.span,
            "span_delta": tl.span - std_span,
            "busy": tl.busy,
            "peak_memory_units": peak,
            "peak_memory_delta": peak - std_peak,
            "per_stage_memory": [m.total_units for m in mem],
            "bubble_assumption_violated": tl.bubble_assumption_violated,
        })
        events_path = out_dir / f"events-{label.replace('+', '-')}.jsonl"
        with open(events_path, "w") as fh:
            for rec in sched.timeline_records(tl):
                fh.write(json.dumps(rec) + "\n")
        if args.svg:
            (out_dir / f"gantt-{label.replace('+', '-')}.svg").write_text(
                sched.render_gantt_svg(tl))

    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'span':>8}  {'d-span':>7}  {'peak mem':>12}  {'d-mem':>10}")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['span']:>8.2f}  {r['span_delta']:>7.2f}  "
              f"{r['peak_memory_units']:>12d}  {r['peak_memory_delta']:>10d}")
    summary = out_dir / "summary.jsonl"
    with open(summary, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    print(f"event records and summary written to {out_dir}")
    return 0


def cmd_generate(args):
    model = ckpt.load_model(args.checkpoint)
    try:
        prompt = [int(t) for t in args.prompt.split()]
    except ValueError:
        raise ConfigError("prompt must be whitespace-separated token ids")
    traces = []
    if args.mode in ("pipeline", "both"):
        part = partition(model, args.stages)
        traces.append(generate_pipeline(part, prompt, args.threshold,
                                        args.max_new_tokens))
    if args.mode in ("recompute", "both"):
        traces.append(generate_kv_recompute(model, prompt, args.threshold,
                                            args.max_new_tokens, args.max_deferred))
    if args.mode == "both" and traces[0].tokens != traces[1].tokens:
        print("ERROR: inference modes diverged", file=sys.stderr)
        return 1

    out = open(args.trace, "w") if args.trace else sys.stdout
    try:
        for tr in traces:
            for rec in tr.records():
                rec["mode"] = tr.mode
                out.write(json.dumps(rec) + "\n")
    finally:
        if args.trace:
            out.close()
    for tr in traces:
        print(f"{tr.mode}: tokens={tr.tokens}", file=sys.stderr)
        print(f"{tr.mode}: mean exit layer {tr.mean_exit_layer:.2f}, "
              f"modeled speedup {tr.speedup:.2f}x", file=sys.stderr)
    return 0


def cmd_verify(args):
    cfg = _load_config(args.config)
    ok, results = run_suites(cfg, sabotage_rescale=args.sabotage_rescale)
    if args.json:
        with open(args.json, "w") as fh:
            for r in results:
                fh.write(json.dumps(r) + "\n")
    return 0 if ok else 1


def cmd_init_config(args):
    cfg = cfgmod.desk_scale_config()
    text = cfgmod.serialize(cfg)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="eepipe",
        description="Early-exit transformer training and inference under "
                    "simulated pipeline parallelism.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model per a run config")
    t.add_argument("--config", required=True, help="run config file")
    t.add_argument("--metrics", help="metrics output path (default metrics.jsonl)")
    t.add_argument("--checkpoint", help="write the final model here")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("analyze-schedule",
                       help="simulate schedule variants and report span/memory")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="standard,eager,deferred,deferred+fill")
    a.add_argument("--out", default="analysis")
    a.add_argument("--svg", action="store_true", help="also render Gantt charts")
    a.set_defaults(fn=cmd_analyze)

    g = sub.add_parser("generate", help="generate tokens from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True, help="whitespace-separated token ids")
    g.add_argument("--threshold", type=float, default=1.0)
    g.add_argument("--mode", choices=("pipeline", "recompute", "both"), default="both")
    g.add_argument("--max-new-tokens", type=int, default=24)
    g.add_argument("--max-deferred", type=int, default=4)
    g.add_argument("--stages", type=int, default=4)
    g.add_argument("--trace", help="write trace records here instead of stdout")
    g.set_defaults(fn=cmd_generate)

    v = sub.add_parser("verify", help="run the oracle self-check suites")
    v.add_argument("--config", required=True)
    v.add_argument("--json", help="also write machine-readable results here")
    v.add_argument("--sabotage-rescale", action="store_true",
                   help="deliberately mis-scale fill gradients (negative test)")
    v.set_defaults(fn=cmd_verify)

    i = sub.add_parser("init-config", help="print or write the desk-scale config")
    i.add_argument("--out")
    i.set_defaults(fn=cmd_init_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
