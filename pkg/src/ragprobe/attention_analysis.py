"""Attention contributions into a target position, and attention knockouts.

The contribution of source token c through head h of layer l into target T is

    a[l, h, c, T] = A[l, h, T, c] * (x_c W_V[h]) W_O[h]

where x_c is the normalized stream the attention block reads (the LN1 output
in this pre-norm model) and A the post-softmax weight, both taken from the
model's own forward pass. Summing over c <= T reproduces head h's share of
the attention output at T, before the output bias.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .hooks import HookSite
from .intervention import InterventionPlan, KnockoutSpec
from .model_core import TransformerModel, all_sites, attention_input, forward
from .tokenization import TokenSpan


@dataclass(frozen=True)
class ContributionRecord:
    layer: int
    head: int
    source: int
    target: int
    attention: float
    norm: float  # ||a[l, h, c, T]||
    layer_norm: float  # ||sum_h a[l, h, c, T]||


def _as_positions(sources) -> Tuple[int, ...]:
    if isinstance(sources, TokenSpan):
        return tuple(sources.positions)
    if isinstance(sources, (int, np.integer)):
        return (int(sources),)
    return tuple(int(s) for s in sources)


def contribution_vectors(model: TransformerModel, tokens: Sequence[int], target: Optional[int] = None):
    """Per-head contribution vectors into ``target`` from every source.

    Returns ``(vectors, attention)`` with shapes [L, H, seq, d_model] and
    [L, H, seq]; entries for sources after the target are zero.
    """
    cfg = model.config
    S = len(tokens)
    T = S - 1 if target is None else int(target)
    if not 0 <= T < S:
        raise ValueError(f"target {T} outside sequence of length {S}")
    sites = all_sites(model, "residual_pre")
    run = forward(model, tokens, capture=sites)
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    vecs = np.zeros((cfg.n_layers, H, S, D), dtype=np.float32)
    att = np.zeros((cfg.n_layers, H, S), dtype=np.float32)
    for l, site in enumerate(sites):
        x = attention_input(model, l, run.captured[site])
        v = x @ model[f"layers.{l}.attn.w_v"]  # [S, D]
        w_o = model[f"layers.{l}.attn.w_o"]
        for h in range(H):
            hs = model.head_slice(h)
            a = run.attention_weights[l, h, T, : T + 1]
            att[l, h, : T + 1] = a
            vecs[l, h, : T + 1] = a[:, None] * (v[: T + 1, hs] @ w_o[hs, :])
    return vecs, att


def compute_contributions(
    model: TransformerModel,
    tokens: Sequence[int],
    sources: Union[TokenSpan, Iterable[int], int],
    target: Optional[int] = None,
) -> List[ContributionRecord]:
    S = len(tokens)
    T = S - 1 if target is None else int(target)
    positions = _as_positions(sources)
    bad = [c for c in positions if c > T or c < 0]
    if bad:
        raise ValueError(f"source positions {bad} are not causal predecessors of target {T}")
    vecs, att = contribution_vectors(model, tokens, T)
    head_norms = np.linalg.norm(vecs.astype(np.float64), axis=-1)  # [L, H, S]
    layer_norms = np.linalg.norm(vecs.astype(np.float64).sum(axis=1), axis=-1)  # [L, S]
    out = []
    for l in range(model.config.n_layers):
        for h in range(model.config.n_heads):
            for c in positions:
                out.append(ContributionRecord(l, h, c, T, float(att[l, h, c]),
                                              float(head_norms[l, h, c]), float(layer_norms[l, c])))
    return out


@dataclass
class ConstraintAggregate:
    """Max-over-constraint-tokens aggregates of attention and contribution norms."""

    positions: Tuple[int, ...]
    attention: Dict[Tuple[int, int], float] = field(default_factory=dict)  # (layer, head)
    norm: Dict[Tuple[int, int], float] = field(default_factory=dict)  # (layer, head)
    layer_max: Dict[int, float] = field(default_factory=dict)  # max_c ||a[l, c]||
    layer_sum: Dict[int, float] = field(default_factory=dict)  # sum_c ||a[l, c]||

    def per_layer(self, pooling: str = "max") -> List[float]:
        d = self.layer_max if pooling == "max" else self.layer_sum
        return [d[l] for l in sorted(d)]


def aggregate_constraints(records: Sequence[ContributionRecord], C) -> ConstraintAggregate:
    positions = _as_positions(C)
    if not positions:
        raise ValueError("constraint token set is empty")
    wanted = set(positions)
    agg = ConstraintAggregate(positions)
    seen_layer_src = set()
    for r in records:
        if r.source not in wanted:
            continue
        key = (r.layer, r.head)
        agg.attention[key] = max(agg.attention.get(key, -math.inf), r.attention)
        agg.norm[key] = max(agg.norm.get(key, -math.inf), r.norm)
        agg.layer_max[r.layer] = max(agg.layer_max.get(r.layer, -math.inf), r.layer_norm)
        if (r.layer, r.source) not in seen_layer_src:
            seen_layer_src.add((r.layer, r.source))
            agg.layer_sum[r.layer] = agg.layer_sum.get(r.layer, 0.0) + r.layer_norm
    if not agg.norm:
        raise ValueError(f"no records for constraint positions {positions}")
    return agg


def top_fraction(values: Sequence[float], fraction: float = 0.05) -> List[Tuple[int, float]]:
    """The ceil(fraction * n) largest values as (index, value), largest first;
    ties go to the lower index."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(values)
    if n == 0:
        raise ValueError("no values to select from")
    k = max(1, math.ceil(round(fraction * n, 9)))
    order = sorted(range(n), key=lambda i: (-float(values[i]), i))
    return [(i, float(values[i])) for i in order[:k]]


def top_fraction_mean(values: Sequence[float], fraction: float = 0.05) -> float:
    return float(np.mean([v for _, v in top_fraction(values, fraction)]))


# --- knockouts ---------------------------------------------------------------

@dataclass(frozen=True)
class KnockoutOutcome:
    prompt_id: int
    span_label: str
    layers: Tuple[int, ...]
    window_start: Union[int, str]
    p_base: float
    p_knocked: float
    relative_change_pct: float
    excluded: bool = False


def span_positions(prompt, span_label: str) -> Tuple[int, ...]:
    if span_label == "subject":
        return tuple(prompt.subject.positions)
    if span_label == "attribute":
        if prompt.attribute is None:
            raise ValueError(f"prompt {prompt.prompt_id} has no attribute span")
        return tuple(prompt.attribute.positions)
    if span_label == "control":
        n = len(prompt.attribute) if prompt.attribute is not None else len(prompt.subject)
        return control_positions(prompt, n)
    raise ValueError(f"unknown span label {span_label!r}")


def control_positions(prompt, length: int) -> Tuple[int, ...]:
    """``length`` positions nearest before the last token that lie outside the
    subject and attribute spans and are not BOS."""
    taken = set(prompt.subject.positions)
    if prompt.attribute is not None:
        taken.update(prompt.attribute.positions)
    out = []
    for i in range(prompt.last - 1, -1, -1):
        if len(out) == length:
            break
        if i in taken or (i == 0 and prompt.token_ids[0] == 0):
            continue
        out.append(i)
    return tuple(sorted(out))


def run_knockout_experiment(
    model: TransformerModel,
    prompt,
    span_label: str,
    window: Sequence[int],
    target: Optional[int] = None,
    token: Optional[int] = None,
    positions: Optional[Sequence[int]] = None,
    window_start: Union[int, str, None] = None,
) -> KnockoutOutcome:
    """Block ``target`` (default: last token) from attending to the span at
    every layer in ``window`` and measure the tracked token's probability."""
    T = prompt.last if target is None else int(target)
    y = prompt.answer_token if token is None else int(token)
    src = tuple(positions) if positions is not None else span_positions(prompt, span_label)
    layers = tuple(sorted(set(int(l) for l in window)))
    base = forward(model, prompt.token_ids)
    p_base = float(base.next_token_probs[y])
    spec = KnockoutSpec.from_window(layers, T, src)
    knocked = forward(model, prompt.token_ids, InterventionPlan(knockouts=spec))
    p_knocked = float(knocked.next_token_probs[y])
    start = window_start if window_start is not None else (layers[0] if layers else 0)
    if p_base == 0.0:
        return KnockoutOutcome(prompt.prompt_id, span_label, layers, start, p_base, p_knocked, 0.0, True)
    change = 100.0 * (p_knocked - p_base) / p_base
    return KnockoutOutcome(prompt.prompt_id, span_label, layers, start, p_base, p_knocked, change)


def sliding_windows(n_layers: int, size: int) -> List[Tuple[int, ...]]:
    if size <= 0:
        return []
    if size >= n_layers:
        return [tuple(range(n_layers))]
    return [tuple(range(s, s + size)) for s in range(n_layers - size + 1)]


def knockout_sweep(
    model: TransformerModel,
    prompt,
    span_label: str,
    window_size: int = 9,
    include_all: bool = True,
) -> List[KnockoutOutcome]:
    """Sliding-window knockouts across layers, plus one all-layers run."""
    out = [run_knockout_experiment(model, prompt, span_label, w, window_start=w[0])
           for w in sliding_windows(model.config.n_layers, window_size)]
    if include_all:
        out.append(run_knockout_experiment(model, prompt, span_label, range(model.config.n_layers),
                                           window_start="all"))
    return out


# --- CSV ---------------------------------------------------------------------

CONTRIB_COLUMNS = ("prompt_id", "layer", "head", "source_label", "norm")
KNOCKOUT_COLUMNS = ("prompt_id", "span_label", "window_start", "p_base", "p_knocked", "change_pct")


def contribution_rows(prompt_id: int, label: str, agg: ConstraintAggregate, n_heads: int):
    """CSV rows: per (layer, head) max-rule norms, then per-layer head-summed
    rows (head "all") under ``label`` (max over span) and ``label_sum`` (sum
    over span)."""
    rows = []
    for l in sorted(agg.layer_max):
        for h in range(n_heads):
            rows.append((prompt_id, l, h, label, agg.norm[(l, h)]))
        rows.append((prompt_id, l, "all", label, agg.layer_max[l]))
        rows.append((prompt_id, l, "all", f"{label}_sum", agg.layer_sum[l]))
    return rows


def contributions_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONTRIB_COLUMNS)
    for pid, l, h, label, norm in rows:
        w.writerow((pid, l, h, label, repr(float(norm))))
    return buf.getvalue()


def knockouts_csv(outcomes: Sequence[KnockoutOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(KNOCKOUT_COLUMNS)
    for o in outcomes:
        w.writerow((o.prompt_id, o.span_label, o.window_start, repr(o.p_base), repr(o.p_knocked),
                    repr(o.relative_change_pct)))
    return buf.getvalue()
