import math

import pytest
from hypothesis import given, settings, strategies as st

from hetero_kv.config import ConfigError, LayerGroupSpec, ModelSpec, load_model_config
from hetero_kv.simulator import Engine, EngineConfig, RunGuardError, run_speculative, run_vision, simulate
from hetero_kv.trace import Request, Segment, dynamic_length, load_bundled_trace, long_doc_qa, vision_mmmu_like
from hetero_kv.type_allocator import PageState

GEMMA = load_model_config("gemma2-like").scaled(0.05)
LLAMA = load_model_config("llama-like")
PALI = load_model_config("paligemma2-like").scaled(0.05)


def text_request(rid, n, out, arrival=0, content=None):
    return Request(rid, arrival, (Segment("text", n, content),), out)


# --- accounting ---------------------------------------------------------------------


@pytest.mark.parametrize("model,strategy", [("gemma2-like", s) for s in ("lcm", "uniform", "gcd", "max", "static")]
                         + [("jamba-like", "lcm"), ("paligemma2-like", "lcm")])
def test_census_sums_to_budget(model, strategy):
    spec = load_model_config(model).scaled(0.1)
    trace = dynamic_length(num_requests=12, scale=0.02, seed=3)
    budget = 2_000_000_000 + 12345
    cfg = EngineConfig(memory_bytes=budget, strategy=strategy, chunk_size=64, prefix_caching=True,
                       check_invariants=True)
    report = simulate(spec, trace, cfg)
    assert report.summary["requests"] == 12
    for m in report.steps:
        assert m.used_total + m.evictable + m.wasted + m.unallocated + m.reserved == budget


def test_single_request_unconstrained():
    prompt, out, chunk = 300, 7, 128
    report = simulate(GEMMA, [text_request("r", prompt, out)], EngineConfig(memory_bytes=10**10, chunk_size=chunk))
    assert report.summary["steps"] == math.ceil(prompt / chunk) + out
    assert report.summary["waste_fraction"] == 0.0
    assert report.summary["preemptions"] == 0


def test_empty_trace():
    report = simulate(GEMMA, [], EngineConfig(memory_bytes=10**9))
    assert report.steps == [] and report.summary["requests"] == 0
    assert report.metrics_csv().count("\n") == 1


def test_runs_are_deterministic():
    trace = load_bundled_trace("multi-article")
    cfg = EngineConfig(memory_bytes=int(40e9 * 0.05), chunk_size=128, prefix_caching=True, seed=5)
    a, b = simulate(GEMMA, trace, cfg), simulate(GEMMA, trace, cfg)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.summary_json() == b.summary_json()


def test_run_guard():
    with pytest.raises(RunGuardError):
        simulate(GEMMA, [text_request("r", 100, 50)], EngineConfig(memory_bytes=10**9, max_steps=10))


def test_request_too_large_for_memory_is_a_guard_error():
    with pytest.raises(RunGuardError):
        simulate(LLAMA, [text_request("r", 100, 5)], EngineConfig(memory_bytes=10 * 131072))


def test_bad_config_rejected():
    for kw in (dict(memory_bytes=0), dict(memory_bytes=1, chunk_size=0), dict(memory_bytes=1, vision_mode="x"),
               dict(memory_bytes=1, strategy="best")):
        with pytest.raises((ConfigError, ValueError)):
            EngineConfig(**kw)


# --- behavior ------------------------------------------------------------------------


@pytest.mark.parametrize("spec", [LLAMA, GEMMA], ids=["llama", "gemma"])
def test_replayed_prompts_hit_their_cached_prefix(spec):
    arts = [("A", 300), ("B", 220)]
    first = [text_request(f"{a}1", n, 4, 0, a) for a, n in arts]
    second = [text_request(f"{a}2", n, 4, 200, a) for a, n in arts]
    cfg = EngineConfig(memory_bytes=10**10, chunk_size=128, prefix_caching=True)
    report = simulate(spec, first + second, cfg)
    assert sum(m.hits for m in report.steps if m.step < 200) == 0
    assert sum(m.hits for m in report.steps if m.step >= 200) == 300 + 220
    assert report.summary["hit_tokens"] == 520


def test_caching_off_never_hits():
    trace = [text_request("a", 50, 2, 0, "x"), text_request("b", 50, 2, 20, "x")]
    assert simulate(GEMMA, trace, EngineConfig(memory_bytes=10**9)).summary["hit_tokens"] == 0


def test_homogeneous_model_same_metrics_under_both_strategies():
    trace = long_doc_qa(num_requests=10, scale=0.005, seed=1)
    runs = [simulate(LLAMA, trace, EngineConfig(memory_bytes=400_000_000, strategy=s, chunk_size=64))
            for s in ("lcm", "uniform")]
    assert runs[0].steps == runs[1].steps
    assert runs[0].summary["preemptions"] > 0  # memory actually constrained


def test_more_memory_never_takes_more_steps():
    trace = dynamic_length(num_requests=30, scale=0.03, seed=2)
    steps = [simulate(GEMMA, trace, EngineConfig(memory_bytes=b, chunk_size=128)).summary["steps"]
             for b in (2 * 10**8, 3 * 10**8, 5 * 10**8, 10**9, 10**10)]
    assert steps == sorted(steps, reverse=True)


def test_decoding_requests_hold_every_page_they_read():
    trace = dynamic_length(num_requests=10, scale=0.02, seed=4)
    engine = Engine(GEMMA, EngineConfig(memory_bytes=2 * 10**8, chunk_size=64, prefix_caching=True), trace)
    checked = 0
    while not engine.idle:
        engine.step()
        for r in engine.running:
            if r.prefilling:
                continue
            for name, t in r.tables.items():
                alloc = engine.mem.managed[name].allocator
                lo, hi = t.policy.accessed_ranges(r.computed)[0]
                need = t.blocks_in_range(lo, hi)
                assert all(t.pages[b] is not None for b in need)
                assert all(alloc.record(t.pages[b]).state is PageState.USED for b in need)
                checked += 1
    assert checked > 100


def test_static_partition_loses_to_shared_pool():
    trace = dynamic_length(num_requests=60, scale=0.05, seed=0, arrival_gap=1)
    budget = 800_000_000
    shared = simulate(GEMMA, trace, EngineConfig(memory_bytes=budget, chunk_size=256)).summary
    for f in (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        cfg = EngineConfig(memory_bytes=budget, chunk_size=256, strategy="static",
                           static_ratios={"full": f, "window": 1 - f})
        s = simulate(GEMMA, trace, cfg).summary
        assert s["preemptions"] > shared["preemptions"] or s["waste_fraction"] > shared["waste_fraction"], f


# --- vision embeddings -------------------------------------------------------------------


def test_vision_timeline_on_demand():
    req = Request("r", 0, (Segment("text", 1), Segment("image", 4, "img"), Segment("text", 1)), 2)
    report = run_vision(PALI, [req], EngineConfig(memory_bytes=10**9, chunk_size=3, record_events=True), "on_demand")
    got = [(e.step, e.action, e.positions) for e in report.events]
    assert got == [
        (0, "encode", (1, 2, 3, 4)),
        (0, "prefill", (0, 1, 2)),
        (0, "free_vision", (1, 2)),
        (1, "prefill", (3, 4, 5)),
        (1, "free_vision", (3, 4)),
        (2, "decode", (6,)),
        (3, "decode", (7,)),
        (3, "finish", ()),
    ]


def heavy_vision_model():
    # embedding as large per token as the decoder KV: the tightest case where
    # the one-chunk bound holds (KV only grows, no window to shed)
    return ModelSpec("heavy", (LayerGroupSpec("vision", "vision_embedding", 1, 2 * 4096),
                               LayerGroupSpec("full", "full", 2, 4096)))


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([16, 32, 64]), st.booleans())
def test_on_demand_vision_peak_bounded_by_one_chunk(seed, chunk, heavy):
    spec = heavy_vision_model() if heavy else PALI
    trace = vision_mmmu_like(num_requests=4, scale=0.02, seed=seed)
    vision_bpt = spec.group("vision").bytes_per_token
    cfg = EngineConfig(memory_bytes=10**9, chunk_size=chunk)
    on_demand = run_vision(spec, trace, cfg, "on_demand").summary
    assert 0 <= on_demand["vision_peak_extra_bytes"] <= chunk * vision_bpt
    assert run_vision(spec, trace, cfg, "reuse").summary["vision_peak_extra_bytes"] == 0


def test_heavy_vision_does_add_memory_on_demand():
    trace = vision_mmmu_like(num_requests=3, scale=0.02, seed=1)
    s = run_vision(heavy_vision_model(), trace, EngineConfig(memory_bytes=10**9, chunk_size=64), "on_demand").summary
    assert s["vision_peak_extra_bytes"] > 0


def test_text_only_trace_matches_model_without_vision():
    trace = long_doc_qa(num_requests=4, scale=0.005, seed=0)
    cfg = EngineConfig(memory_bytes=10**9, chunk_size=64)
    with_vision = run_vision(PALI, trace, cfg, "on_demand")
    text_only = ModelSpec("text", PALI.groups[1:])
    plain = simulate(text_only, trace, cfg)
    assert [m.batch for m in with_vision.steps] == [m.batch for m in plain.steps]
    for a, b in zip(with_vision.steps, plain.steps):
        assert a.used == dict(b.used, vision=0)


def test_reuse_refuses_embeddings_larger_than_kv():
    spec = ModelSpec("big", (LayerGroupSpec("vision", "vision_embedding", 1, 10**6),
                             LayerGroupSpec("full", "full", 1, 64)))
    with pytest.raises(ConfigError):
        Engine(spec, EngineConfig(memory_bytes=10**9, vision_mode="reuse"))


# --- speculative decoding -------------------------------------------------------------------

TARGET = ModelSpec("target8b", (LayerGroupSpec("self", "full", 32, 4096),))
DRAFT = ModelSpec("draft1b", (LayerGroupSpec("self", "full", 16, 2048),))
SPEC_TRACE = [text_request("x", 20, 10), text_request("y", 33, 6, 2)]


def test_identical_models_use_identical_memory():
    # every step accepts all k proposals, so no output length clamps the last step
    k = 4
    trace = [text_request("x", 20, 2 * (k + 1)), text_request("y", 33, k + 1, 2)]
    r = run_speculative(TARGET, TARGET, trace, EngineConfig(memory_bytes=10**9, chunk_size=64),
                        propose_k=k, acceptance=1.0)
    per = r.summary["per_model"]
    assert per["draft"] == per["target"]
    assert r.summary["steps"] == 4  # y arrives at step 2, one prefill and one decode each


def test_zero_acceptance_closed_form():
    k = 4
    r = run_speculative(TARGET, DRAFT, SPEC_TRACE, EngineConfig(memory_bytes=10**9, chunk_size=64),
                        propose_k=k, acceptance=0.0)
    prompts = sum(q.prompt_tokens for q in SPEC_TRACE)
    outputs = sum(q.output_tokens for q in SPEC_TRACE)
    per = r.summary["per_model"]
    assert per["target"]["allocated_pages"] == prompts + outputs
    assert per["draft"]["allocated_pages"] == prompts + k * outputs
    assert per["draft"]["allocated_bytes"] == (prompts + k * outputs) * 16 * 2048


def test_per_type_pages_beat_padding_to_the_larger_model():
    cfg = EngineConfig(memory_bytes=10**9, chunk_size=64)
    lcm = run_speculative(TARGET, DRAFT, SPEC_TRACE, cfg, acceptance=0.7).summary
    padded = run_speculative(TARGET, DRAFT, SPEC_TRACE, EngineConfig(memory_bytes=10**9, chunk_size=64,
                                                                       strategy="max"), acceptance=0.7).summary
    assert lcm["peak_allocated_bytes"] < padded["peak_allocated_bytes"]


def test_speculative_rejects_uniform():
    with pytest.raises(ConfigError):
        run_speculative(TARGET, DRAFT, SPEC_TRACE, EngineConfig(memory_bytes=10**9, strategy="uniform"))
