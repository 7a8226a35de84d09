import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragprobe.attention_analysis import (
    ContributionRecord,
    aggregate_constraints,
    compute_contributions,
    contribution_rows,
    contribution_vectors,
    contributions_csv,
    control_positions,
    knockout_sweep,
    knockouts_csv,
    run_knockout_experiment,
    sliding_windows,
    top_fraction,
    top_fraction_mean,
)
from ragprobe.hooks import HookSite
from ragprobe.model_core import ModelConfig, TransformerModel, attention_input, expected_shapes, forward, init_random
from ragprobe.tokenization import TokenSpan

CFG1 = ModelConfig(n_layers=2, n_heads=1, d_model=8, d_head=8, d_mlp=8, vocab_size=12, max_seq_len=10)


def _spiky_model():
    """One head that puts all its weight on token 3 (exactly zero elsewhere)."""
    p = {k: np.zeros(s, np.float32) for k, s in expected_shapes(CFG1).items()}
    rng = np.random.default_rng(0)
    p["embed.tokens"] = rng.normal(size=(12, 8)).astype(np.float32)
    p["embed.tokens"][3, 0] = 50.0
    for l in range(2):
        for ln in ("ln1", "ln2"):
            p[f"layers.{l}.{ln}.scale"][:] = 1.0
        p[f"layers.{l}.ln1.bias"][7] = 1.0
        p[f"layers.{l}.attn.w_q"][7, 0] = 40.0
        p[f"layers.{l}.attn.w_k"][0, 0] = 40.0
        p[f"layers.{l}.attn.w_v"] = np.eye(8, dtype=np.float32)
        p[f"layers.{l}.attn.w_o"] = np.eye(8, dtype=np.float32)
    p["final_ln.scale"][:] = 1.0
    p["unembed.w"] = rng.normal(size=(8, 12)).astype(np.float32)
    return TransformerModel(CFG1, p)


def test_zero_attention_gives_zero_norm():
    m = _spiky_model()
    toks = [1, 3, 5, 6, 7]
    recs = compute_contributions(m, toks, range(5))
    zero = [r for r in recs if r.attention == 0.0]
    assert zero, "expected sources with exactly zero attention"
    assert all(r.norm == 0.0 and r.layer_norm == 0.0 for r in zero)
    assert all(r.norm >= 0 for r in recs)


def test_single_head_norm_matches_matmul():
    m = init_random(CFG1, 3)
    toks = [2, 4, 6, 8, 10]
    T = 4
    site = HookSite(1, "residual_pre")
    run = forward(m, toks, capture=[site])
    x = attention_input(m, 1, run.captured[site]).astype(np.float64)
    recs = {(r.layer, r.source): r for r in compute_contributions(m, toks, range(5), T)}
    for c in range(5):
        A = float(run.attention_weights[1, 0, T, c])
        want = np.linalg.norm(A * (x[c] @ m["layers.1.attn.w_v"]) @ m["layers.1.attn.w_o"])
        assert recs[(1, c)].norm == pytest.approx(want, rel=1e-5)
        assert recs[(1, c)].attention == pytest.approx(A)


def test_head_sum_reconstructs_attn_out(tiny_model):
    toks = [5, 17, 40, 2, 66, 9]
    vecs, _ = contribution_vectors(tiny_model, toks)
    for l in range(tiny_model.config.n_layers):
        site = HookSite(l, "attn_out", 5)
        ref = forward(tiny_model, toks, capture=[site]).captured[site] - tiny_model[f"layers.{l}.attn.b_o"]
        got = vecs[l].sum(axis=(0, 1))
        assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


def test_contributions_errors_and_order_invariance(tiny_model):
    toks = [1, 2, 3, 4]
    with pytest.raises(ValueError, match="causal"):
        compute_contributions(tiny_model, toks, [3], target=2)
    with pytest.raises(ValueError):
        contribution_vectors(tiny_model, toks, 9)
    a = compute_contributions(tiny_model, toks, [0, 2])
    b = compute_contributions(tiny_model, toks, [2, 0])
    key = lambda r: (r.layer, r.head, r.source)
    assert sorted(a, key=key) == sorted(b, key=key)
    span = compute_contributions(tiny_model, toks, TokenSpan(0, 3, 0, 0))
    assert {r.source for r in span} == {0, 1, 2}


def _rec(l, h, c, a, n, ln=None):
    return ContributionRecord(l, h, c, 9, a, n, n if ln is None else ln)


def test_aggregate_max_rule():
    recs = [_rec(0, 0, 1, 0.1, 2.0), _rec(0, 0, 2, 0.4, 5.0), _rec(0, 0, 3, 0.2, 3.0)]
    agg = aggregate_constraints(recs, [1, 2, 3])
    assert agg.norm[(0, 0)] == 5.0 and agg.attention[(0, 0)] == 0.4
    single = aggregate_constraints(recs, [3])
    assert single.norm[(0, 0)] == 3.0 and single.attention[(0, 0)] == 0.2
    assert agg.layer_sum[0] == 10.0 and agg.per_layer("sum") == [10.0]
    with pytest.raises(ValueError):
        aggregate_constraints(recs, [])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sets(st.integers(0, 7), min_size=1))
def test_aggregate_matches_brute_force(seed, C):
    rng = np.random.default_rng(seed)
    recs = [_rec(l, h, c, float(rng.random()), float(rng.random() * 10), float(rng.random() * 20))
            for l in range(3) for h in range(2) for c in range(8)]
    agg = aggregate_constraints(recs, sorted(C))
    for l in range(3):
        for h in range(2):
            best_n, best_a = -1.0, -1.0
            for r in recs:
                if r.layer == l and r.head == h and r.source in C:
                    best_n = r.norm if r.norm > best_n else best_n
                    best_a = r.attention if r.attention > best_a else best_a
            assert agg.norm[(l, h)] == best_n and agg.attention[(l, h)] == best_a
        members = [r for r in recs if r.layer == l and r.source in C]
        assert all(agg.layer_max[l] >= r.layer_norm for r in members)


def test_top_fraction_examples():
    assert len(top_fraction(list(range(40)), 0.05)) == 2
    vals = [3.0, 1.0, 2.0]
    assert top_fraction(vals, 1.0) == [(0, 3.0), (2, 2.0), (1, 1.0)]
    assert {v for _, v in top_fraction(list(range(1, 101)), 0.05)} == {100, 99, 98, 97, 96}
    assert top_fraction([1.0, 5.0, 5.0, 2.0], 0.25) == [(1, 5.0)]
    assert top_fraction([1.0], 0.01) == [(0, 1.0)]
    assert top_fraction_mean([1.0, 2.0, 3.0, 4.0], 0.5) == 3.5
    with pytest.raises(ValueError):
        top_fraction([], 0.1)
    with pytest.raises(ValueError):
        top_fraction([1.0], 0.0)
    with pytest.raises(ValueError):
        top_fraction([1.0], 1.5)


def test_sliding_windows():
    assert sliding_windows(4, 9) == [(0, 1, 2, 3)]
    assert sliding_windows(5, 3) == [(0, 1, 2), (1, 2, 3), (2, 3, 4)]
    assert sliding_windows(5, 0) == []


def test_empty_window_is_identity(copy_model, rag_prompt):
    o = run_knockout_experiment(copy_model, rag_prompt, "attribute", [])
    assert o.p_knocked == o.p_base and o.relative_change_pct == 0.0


def test_copy_layer_knockouts(copy_model, rag_prompt):
    attr = run_knockout_experiment(copy_model, rag_prompt, "attribute", [1])
    assert attr.relative_change_pct <= -90.0
    unrelated = run_knockout_experiment(copy_model, rag_prompt, "control", [1])
    assert abs(unrelated.relative_change_pct) < 5.0
    assert attr.relative_change_pct < unrelated.relative_change_pct
    assert attr.p_base == pytest.approx(forward(copy_model, rag_prompt.token_ids)
                                        .next_token_probs[rag_prompt.answer_token])


def test_vanilla_subject_knockout_on_answer_in_subject(copy_model, copy_vocab):
    from ragprobe.copy_task import toy_facts
    from ragprobe.dataset import build_prompt

    rec = next(f for f in toy_facts() if f.known_id == 106)
    p = build_prompt(rec, None, "vanilla", copy_vocab)
    outs = knockout_sweep(copy_model, p, "subject")
    assert outs[-1].window_start == "all"
    assert min(o.relative_change_pct for o in outs) <= -90.0
    ctrl = knockout_sweep(copy_model, p, "control")
    assert all(abs(o.relative_change_pct) < 5.0 for o in ctrl)


def test_control_positions_avoid_spans(rag_prompt):
    pos = control_positions(rag_prompt, 4)
    assert len(pos) == 4
    assert all(p < rag_prompt.last and p not in rag_prompt.subject and p not in rag_prompt.attribute for p in pos)


def test_zero_base_probability_is_flagged():
    m = _spiky_model()
    params = dict(m.params)
    # constant final stream, so token 0's logit is -1000 and its probability underflows to 0
    params["final_ln.scale"] = np.zeros(8, np.float32)
    params["final_ln.bias"] = np.eye(8, dtype=np.float32)[0]
    w = np.zeros((8, 12), np.float32)
    w[0, 0] = -1000.0
    params["unembed.w"] = w
    sharp = TransformerModel(CFG1, params)
    p = type("P", (), {})()
    p.prompt_id, p.token_ids, p.last = 5, (1, 3, 5), 2
    p.subject, p.attribute = TokenSpan(1, 2, 0, 0), None
    assert forward(sharp, p.token_ids).next_token_probs[0] == 0.0
    o = run_knockout_experiment(sharp, p, "subject", [0], token=0)
    assert o.excluded and o.relative_change_pct == 0.0


def test_csv_writers(copy_model, rag_prompt):
    sources = list(rag_prompt.subject.positions)
    agg = aggregate_constraints(compute_contributions(copy_model, rag_prompt.token_ids, sources),
                                rag_prompt.subject)
    rows = contribution_rows(14, "ST", agg, 1)
    text = contributions_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "prompt_id,layer,head,source_label,norm"
    assert len(lines) == 1 + 2 * 3
    assert {l.split(",")[3] for l in lines[1:]} == {"ST", "ST_sum"}
    k = knockouts_csv(knockout_sweep(copy_model, rag_prompt, "attribute"))
    assert k.split("\n")[0] == "prompt_id,span_label,window_start,p_base,p_knocked,change_pct"
    assert k.count("\n") == 3
