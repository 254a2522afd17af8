"""Early-exit inference tests: decision rule, KV cache discipline, and the
equivalence of the pipeline and KV-recomputation methods."""

import numpy as np
import pytest

from eepipe.errors import ConfigError, NonFiniteError, TokenError
from eepipe.inference import (
    KVCache,
    compare_modes,
    exit_decision,
    generate_kv_recompute,
    generate_pipeline,
    greedy_reference,
)
from eepipe.model import ExitSpec, ModelConfig, build_model, partition

VOCAB = 64
# An untrained model's confidences hover just above 1/V; thresholds right
# below and well above that floor force both behaviours.
THR_FORCING_EXITS = 0.99 / VOCAB
THR_NO_EXITS = 6.0 / VOCAB


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(8, 32, 4, VOCAB, 48,
                      exits=(ExitSpec(2, loss_weight=0.3), ExitSpec(4, loss_weight=0.6)))
    return build_model(cfg, 7)


@pytest.fixture(scope="module")
def small_part(small_model):
    return partition(small_model, 4)


def prompts_for(model, n, length=6):
    rng = np.random.default_rng(17)
    return [list(rng.integers(0, model.config.vocab_size, size=length)) for _ in range(n)]


# ---------------------------------------------------------------------------
# exit_decision
# ---------------------------------------------------------------------------


def test_exit_decision_uniform():
    fire, token, conf = exit_decision(np.zeros(4), 0.25)
    assert conf == pytest.approx(0.25)
    assert not fire  # strict inequality: 0.25 > 0.25 is false
    assert token == 0  # lowest-index tie break


def test_exit_decision_confident():
    logits = np.zeros(8)
    logits[3] = 30.0
    fire, token, conf = exit_decision(logits, 0.8)
    assert fire and token == 3 and conf > 0.999999


def test_exit_decision_threshold_one_never_fires():
    rng = np.random.default_rng(0)
    for _ in range(20):
        fire, _, _ = exit_decision(rng.normal(size=16) * 50, 1.0)
        assert not fire


def test_exit_decision_errors():
    with pytest.raises(NonFiniteError):
        exit_decision(np.array([np.inf, 0.0]), 0.5)
    with pytest.raises(ConfigError):
        exit_decision(np.zeros(4), 0.0)
    with pytest.raises(ConfigError):
        exit_decision(np.zeros(4), 1.5)


# ---------------------------------------------------------------------------
# KV cache discipline
# ---------------------------------------------------------------------------


def test_kvcache_monotone_fill():
    cache = KVCache([1, 2], max_positions=4, num_heads=2, head_dim=3)
    k = np.ones((2, 3))
    cache.fill(1, 0, k, k)
    with pytest.raises(ConfigError):
        cache.fill(1, 0, k * 2, k * 2)  # never overwritten
    assert not cache.complete(1)
    cache.fill(2, 0, k, k)
    assert cache.complete(1)


def test_kvcache_rejects_unfilled_read():
    cache = KVCache([1], max_positions=4, num_heads=2, head_dim=3)
    cache.fill(1, 0, np.ones((2, 3)), np.ones((2, 3)))
    cache.view(1, 1)
    with pytest.raises(ConfigError):
        cache.view(1, 2)


# ---------------------------------------------------------------------------
# Mode equivalence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("threshold", [1.0, THR_NO_EXITS, THR_FORCING_EXITS])
@pytest.mark.parametrize("max_deferred", [1, 2, 4])
def test_modes_emit_identical_sequences(small_model, small_part, threshold, max_deferred):
    prompt = prompts_for(small_model, 1)[0]
    pipe = generate_pipeline(small_part, prompt, threshold, 12)
    reco = generate_kv_recompute(small_model, prompt, threshold, 12, max_deferred)
    assert pipe.tokens == reco.tokens
    assert pipe.exit_layers == reco.exit_layers
    assert pipe.confidences == reco.confidences  # bitwise


def test_forced_exits_actually_fire(small_model, small_part):
    prompt = prompts_for(small_model, 1)[0]
    pipe = generate_pipeline(small_part, prompt, THR_FORCING_EXITS, 12)
    assert any(e < small_model.config.num_layers for e in pipe.exit_layers)
    assert pipe.speedup > 1.0


def test_threshold_one_matches_uncached_greedy(small_model, small_part):
    for prompt in prompts_for(small_model, 2):
        ref = greedy_reference(small_model, prompt, 10)
        assert generate_pipeline(small_part, prompt, 1.0, 10).tokens == ref
        assert generate_kv_recompute(small_model, prompt, 1.0, 10).tokens == ref


def test_threshold_one_speedup_is_one(small_model, small_part):
    prompt = prompts_for(small_model, 1)[0]
    assert generate_pipeline(small_part, prompt, 1.0, 8).speedup == pytest.approx(1.0)
    assert generate_kv_recompute(small_model, prompt, 1.0, 8).speedup == pytest.approx(1.0)


def test_max_deferred_one_forces_full_fill_next_step(small_model):
    """With a one-slot deferred list, any early exit is followed by a
    full-depth pass on the next step."""
    prompt = prompts_for(small_model, 1)[0]
    tr = generate_kv_recompute(small_model, prompt, THR_FORCING_EXITS, 14,
                               max_deferred=1)
    assert any(e < small_model.config.num_layers for e in tr.exit_layers[1:-1])
    full = max(tr.latencies)
    for i in range(1, len(tr.latencies) - 1):
        if tr.latencies[i] < full:
            assert tr.latencies[i + 1] == full


def test_compare_modes_report(small_model, small_part):
    report = compare_modes(small_model, small_part, prompts_for(small_model, 3),
                           [1.0, THR_FORCING_EXITS], max_new_tokens=8)
    assert report["divergences"] == []
    assert len(report["runs"]) == 6
    base = [r for r in report["runs"] if r["threshold"] == 1.0]
    assert all(r["pipeline_speedup"] == pytest.approx(1.0) for r in base)


def test_mean_exit_depth_monotone_in_threshold(small_model, small_part):
    """While the emitted prefixes agree, a lower threshold exits at the same
    or a shallower layer per token (equal prefixes give equal confidences)."""
    prompt = prompts_for(small_model, 1)[0]
    hi = generate_pipeline(small_part, prompt, THR_NO_EXITS, 12)
    lo = generate_pipeline(small_part, prompt, THR_FORCING_EXITS, 12)
    for t_hi, t_lo, e_hi, e_lo in zip(hi.tokens, lo.tokens, hi.exit_layers, lo.exit_layers):
        assert e_lo <= e_hi
        if t_hi != t_lo:
            break


def test_determinism(small_model, small_part):
    prompt = prompts_for(small_model, 1)[0]
    a = generate_pipeline(small_part, prompt, THR_FORCING_EXITS, 10)
    b = generate_pipeline(small_part, prompt, THR_FORCING_EXITS, 10)
    assert a.tokens == b.tokens and a.confidences == b.confidences
    c = generate_kv_recompute(small_model, prompt, THR_FORCING_EXITS, 10)
    d = generate_kv_recompute(small_model, prompt, THR_FORCING_EXITS, 10)
    assert c.tokens == d.tokens and c.confidences == d.confidences


def test_trace_records(small_model, small_part):
    prompt = prompts_for(small_model, 1)[0]
    tr = generate_pipeline(small_part, prompt, 1.0, 5)
    recs = list(tr.records())
    assert len(recs) == 5
    assert recs[0]["position"] == len(prompt)
    assert set(recs[0]["confidence"]) == {"exit_l2", "exit_l4", "final"}


# ---------------------------------------------------------------------------
# Preconditions and errors
# ---------------------------------------------------------------------------


def test_pipeline_needs_two_stages(small_model):
    part1 = partition(small_model, 1)
    with pytest.raises(ConfigError):
        generate_pipeline(part1, [1, 2, 3], 1.0, 4)


def test_context_overflow(small_model, small_part):
    long_prompt = [0] * small_model.config.max_seq_len
    with pytest.raises(TokenError):
        generate_kv_recompute(small_model, long_prompt, 1.0, 4)
    with pytest.raises(TokenError):
        generate_pipeline(small_part, long_prompt, 1.0, 4)


def test_empty_prompt_rejected(small_model):
    with pytest.raises(ConfigError):
        generate_kv_recompute(small_model, [], 1.0, 4)


def test_bad_max_deferred(small_model):
    with pytest.raises(ConfigError):
        generate_kv_recompute(small_model, [1], 1.0, 4, max_deferred=0)


def test_layer_embed_head_unsupported_in_inference():
    cfg = ModelConfig(4, 32, 4, VOCAB, 32, exits=(ExitSpec(2, "layer+embed", 0.5),))
    model = build_model(cfg, 0)
    with pytest.raises(ConfigError):
        generate_kv_recompute(model, [1, 2], 1.0, 4)


def test_mlp_head_supported_in_inference():
    cfg = ModelConfig(4, 32, 4, VOCAB, 32, exits=(ExitSpec(2, "mlp+embed", 0.5),))
    model = build_model(cfg, 0)
    part = partition(model, 2)
    prompt = [3, 1, 4]
    assert (generate_kv_recompute(model, prompt, 1.0, 6).tokens
            == generate_pipeline(part, prompt, 1.0, 6).tokens
            == greedy_reference(model, prompt, 6))
