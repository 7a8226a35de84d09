"""Acceptance gate: one test per criterion, each with its runtime bound.

The terminal summary prints a PASS/FAIL line per criterion (see conftest).
"""

import json
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ragprobe import cli
from ragprobe.attention_analysis import (
    aggregate_constraints,
    compute_contributions,
    contribution_vectors,
    knockout_sweep,
    span_positions,
)
from ragprobe.causal_tracing import (
    CATEGORIES,
    TRACE_SITES,
    TraceConfig,
    TraceResult,
    aggregate_aie,
    categorize,
    layer_window,
    run_trace,
)
from ragprobe.client import ReplayClient
from ragprobe.copy_task import toy_responses
from ragprobe.dataset import (
    GenerationFailed,
    dumps_contexts,
    dumps_facts,
    generate_context,
    load_contexts,
    load_known_facts,
    validate_context,
)
from ragprobe.hooks import HookSite
from ragprobe.intervention import InterventionPlan, KnockoutSpec, NoiseSpec, PatchSpec, apply_noise
from ragprobe.model_core import TransformerModel, all_sites, forward

from .conftest import FIXTURES, TINY


def _tokens(rng, n):
    return [int(t) for t in rng.integers(0, TINY.vocab_size, n)]


@pytest.mark.criterion(1, "restoration identity on the tiny random model")
def test_c01_restoration_identity(tiny_model, rng, timer):
    with timer:
        for trial in range(5):
            toks = _tokens(rng, 12)
            sites = all_sites(tiny_model, "residual_post")
            clean = forward(tiny_model, toks, capture=sites)
            noise = NoiseSpec(range(2, 6), seed=trial).resolve(tiny_model)
            corrupt = forward(tiny_model, toks, InterventionPlan(noise=noise))
            assert np.abs(corrupt.next_token_probs - clean.next_token_probs).max() > 1e-4
            patches = tuple(
                PatchSpec(HookSite(s.layer, "residual_post", i), clean.captured[s][i])
                for s in sites for i in range(len(toks))
            )
            restored = forward(tiny_model, toks, InterventionPlan(noise=noise, patches=patches))
            assert np.abs(restored.next_token_probs - clean.next_token_probs).max() <= 1e-5
    assert timer.elapsed < 10


@pytest.mark.criterion(2, "null effect of self-patching")
def test_c02_null_effect(tiny_model, rng, timer):
    with timer:
        toks = _tokens(rng, 10)
        noise = NoiseSpec(range(1, 4), seed=3).resolve(tiny_model)
        plan = InterventionPlan(noise=noise)
        caches = {}
        for site in TRACE_SITES:
            sites = all_sites(tiny_model, site)
            run = forward(tiny_model, toks, plan, capture=sites)
            caches[site] = {s.layer: run.captured[s] for s in sites}
        p_star = forward(tiny_model, toks, plan).next_token_probs
        y = int(np.argmax(p_star))
        for _ in range(100):
            site = TRACE_SITES[rng.integers(len(TRACE_SITES))]
            layer, pos, radius = int(rng.integers(4)), int(rng.integers(10)), int(rng.integers(3))
            patches = tuple(PatchSpec(HookSite(l, site, pos), caches[site][l][pos], source="corrupt")
                            for l in layer_window(layer, radius, 4))
            p = forward(tiny_model, toks, InterventionPlan(noise=noise, patches=patches)).next_token_probs[y]
            assert abs(p - p_star[y]) <= 1e-6
    assert timer.elapsed < 10


def _single_head_model(model, layer, head):
    """Copy of ``model`` whose layer keeps only ``head`` in its output projection, without bias."""
    params = {k: np.array(v) for k, v in model.params.items()}
    w_o = params[f"layers.{layer}.attn.w_o"]
    keep = model.head_slice(head)
    mask = np.zeros(w_o.shape[0], bool)
    mask[keep] = True
    w_o[~mask] = 0.0
    params[f"layers.{layer}.attn.b_o"][:] = 0.0
    return TransformerModel(model.config, params)


@pytest.mark.criterion(3, "per-head contribution decomposition")
def test_c03_decomposition_identity(tiny_model, rng, timer):
    cfg = tiny_model.config
    variants = {(l, h): _single_head_model(tiny_model, l, h)
                for l in range(cfg.n_layers) for h in range(cfg.n_heads)}
    with timer:
        for _ in range(20):
            toks = _tokens(rng, int(rng.integers(3, 20)))
            T = len(toks) - 1
            vecs, _ = contribution_vectors(tiny_model, toks, T)
            for (l, h), m in variants.items():
                site = HookSite(l, "attn_out", T)
                ref = forward(m, toks, capture=[site]).captured[site].astype(np.float64)
                got = vecs[l, h].astype(np.float64).sum(axis=0)
                assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)
    assert timer.elapsed < 30


@st.composite
def _edge_sets(draw):
    S = draw(st.integers(2, 12))
    edges = draw(st.frozensets(
        st.tuples(st.integers(0, TINY.n_layers - 1), st.integers(1, S - 1), st.integers(0, S - 1))
        .filter(lambda e: e[2] < e[1]),
        max_size=40,
    ))
    seed = draw(st.integers(0, 2**16))
    return S, edges, seed


@pytest.mark.criterion(4, "knockout exactness over random edge sets")
def test_c04_knockout_exactness(tiny_model, timer):
    @settings(max_examples=80, deadline=None, suppress_health_check=list(HealthCheck))
    @given(_edge_sets())
    def check(case):
        S, edges, seed = case
        toks = [int(t) for t in np.random.default_rng(seed).integers(0, TINY.vocab_size, S)]
        A = forward(tiny_model, toks, InterventionPlan(knockouts=KnockoutSpec(edges))).attention_weights
        for l, r, c in edges:
            assert np.all(A[l, :, r, c] == 0.0)
        assert np.all(np.abs(A.sum(axis=-1) - 1.0) <= 1e-6)
        assert np.all(np.triu(A, k=1) == 0.0)

    with timer:
        check()
    assert timer.elapsed < 10


@pytest.mark.criterion(5, "copy-task knockout and contribution direction")
def test_c05_finding2_surrogate(copy_model, rag_prompt, timer):
    with timer:
        attr = knockout_sweep(copy_model, rag_prompt, "attribute", window_size=9)
        ctrl = knockout_sweep(copy_model, rag_prompt, "control", window_size=9)
        control = span_positions(rag_prompt, "control")
        assert len(control) == len(rag_prompt.attribute)
        assert not set(control) & (set(rag_prompt.attribute.positions) | set(rag_prompt.subject.positions))
        assert min(o.relative_change_pct for o in attr) <= -90.0
        assert all(abs(o.relative_change_pct) < 5.0 for o in ctrl)

        sources = list(rag_prompt.subject.positions) + list(rag_prompt.attribute.positions)
        recs = compute_contributions(copy_model, rag_prompt.token_ids, sources)
        at = aggregate_constraints(recs, rag_prompt.attribute).per_layer()
        st_ = aggregate_constraints(recs, rag_prompt.subject).per_layer()
        assert np.mean(at) > np.mean(st_)
    assert timer.elapsed < 10


@pytest.mark.criterion(6, "copy-task causal tracing peaks at the attribute")
def test_c06_finding1_surrogate(copy_model, rag_prompt, timer):
    with timer:
        r = run_trace(copy_model, rag_prompt, TraceConfig(site="mlp_out", scenario="rag"))
        layer, pos = np.unravel_index(np.argmax(r.ie_grid), r.ie_grid.shape)
        assert pos in rag_prompt.attribute
        attr_ie = r.ie_grid[layer, pos]
        summary = aggregate_aie([r])
        assert summary.peak("LST") < attr_ie
        # the attribute cell beats every other position outright
        others = np.delete(r.ie_grid, list(rag_prompt.attribute.positions), axis=1)
        assert attr_ie > others.max()
    assert timer.elapsed < 60


def _brute_std(values):
    flat = [float(v) for v in np.asarray(values).ravel()]
    mu = sum(flat) / len(flat)
    return math.sqrt(sum((v - mu) ** 2 for v in flat) / len(flat))


@pytest.mark.criterion(7, "noise statistics and sigma oracle")
def test_c07_noise_contract(tiny_model, timer):
    with timer:
        sigma = tiny_model.embedding_sigma
        assert abs(sigma - _brute_std(tiny_model["embed.tokens"])) <= 1e-6
        spec = NoiseSpec(range(625), seed=11).resolve(tiny_model)
        nu = spec.nu
        assert nu == pytest.approx(3.0 * sigma, rel=1e-12)
        base = np.zeros((625, 16), np.float32)
        delta = apply_noise(base, spec) - base
        n = delta.size
        assert n == 10_000
        assert abs(delta.mean()) <= 3.0 * nu / math.sqrt(n)
        assert abs(delta.std() / nu - 1.0) <= 0.10
    assert timer.elapsed < 10


@pytest.mark.criterion(8, "dataset fixtures, validation and generation loop")
def test_c08_dataset_qa(tmp_path, timer):
    with timer:
        fact_file, ctx_file = FIXTURES / "known_fact_14.json", FIXTURES / "rag_context_14.json"
        (rec,) = load_known_facts(fact_file)
        (ctx,) = load_contexts(ctx_file)
        assert (rec.known_id, rec.subject, rec.attribute, rec.template, rec.relation_id) == (
            14, "Eavan Boland", "Dublin", "{} was born in", "P19")
        verdict = validate_context(rec, ctx.segments)
        assert verdict.ok and verdict.object_count == 1
        assert dumps_facts([rec]).encode() == fact_file.read_bytes()
        assert dumps_contexts([ctx]).encode() == ctx_file.read_bytes()

        mutated = json.loads(ctx_file.read_text())
        mutated[0]["response"][2] += " She left Dublin later."
        (tmp_path / "bad.json").write_text(json.dumps(mutated))
        (bad,) = load_contexts(tmp_path / "bad.json")
        v = validate_context(rec, bad.segments)
        assert not v.ok and "object_count=2" in v.reasons

        good = json.dumps(list(ctx.segments))
        dup = json.dumps(list(bad.segments))
        client = ReplayClient({"14": [dup, good]})
        out = generate_context(client, rec, max_retries=3)
        assert out.attempts == 2 and out.segments == ctx.segments and len(client.requests) == 2

        client = ReplayClient({"14": [dup] * 5})
        with pytest.raises(GenerationFailed) as ei:
            generate_context(client, rec, max_retries=3)
        assert ei.value.attempts == 3 and "object_count=2" in ei.value.reasons
        assert len(client.requests) == 3
    assert timer.elapsed < 5


@pytest.mark.criterion(9, "byte-identical CLI reruns")
def test_c09_reproducibility(tmp_path, timer, capsys):
    fixtures = tmp_path / "responses.json"
    fixtures.write_text(json.dumps(toy_responses()))
    commands = [
        ["trace", "--scenario", "both", "--sample", "4", "--seed", "5"],
        ["contrib", "--scenario", "both"],
        ["knockout", "--scenario", "both", "--window", "1"],
        ["dataset", "generate", "--fixtures", str(fixtures)],
    ]
    with timer:
        for argv in commands:
            outputs = []
            for run, workers in (("a", "1"), ("b", "3")):
                out = tmp_path / f"{argv[0]}_{run}"
                assert cli.main(argv + ["--out", str(out), "--workers", workers]) == 0
                outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                                if p.suffix in (".csv", ".json") and p.name != "manifest.json"})
            assert outputs[0] and outputs[0] == outputs[1], argv
        assert cli.main(["dataset", "validate", "--contexts", str(FIXTURES / "rag_context_14.json")]) == 0
    capsys.readouterr()
    assert timer.elapsed < 60


def _oracle_aie(results):
    """Per prompt and category, mean over that category's cells; then mean over prompts."""
    table = {}
    for r in results:
        for c in CATEGORIES:
            cols = [i for i, cat in enumerate(r.categories) if cat == c]
            if not cols:
                continue
            for l in range(r.ie_grid.shape[0]):
                total = 0.0
                for i in cols:
                    total += float(r.ie_grid[l, i])
                table.setdefault((l, c), []).append(total / len(cols))
    return {k: sum(v) / len(v) for k, v in table.items()}


@pytest.mark.criterion(10, "AIE arithmetic against a brute-force oracle")
def test_c10_aie_arithmetic(rng, timer):
    with timer:
        for _ in range(20):
            L = int(rng.integers(1, 6))
            results = []
            for pid in range(int(rng.integers(1, 11))):
                S = int(rng.integers(2, 15))
                s0 = int(rng.integers(0, S - 1))
                s1 = int(rng.integers(s0 + 1, S))
                grid = rng.normal(size=(L, S))
                results.append(TraceResult(pid, "rag", "mlp_out", 0, 0.5, 0.1, grid,
                                           tuple(categorize(S, s0, s1))))
            got = aggregate_aie(results)
            want = _oracle_aie(results)
            assert set(got.aie) == set(want)
            for k, v in want.items():
                assert abs(got.aie[k] - v) <= 1e-9
    assert timer.elapsed < 5
