"""Causal tracing: clean, corrupted and corrupted-with-restoration runs.

For every (layer, position) cell the corrupted run is re-executed with the
clean activations at ``cfg.site`` patched back in at that position, for a
window of layers around the cell's layer. The indirect effect of the cell is
the restored answer probability minus the corrupted one.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .hooks import HookSite
from .intervention import InterventionPlan, NoiseSpec, PatchSpec
from .model_core import TransformerModel, all_sites, forward

CATEGORIES = ("FST", "MST", "LST", "FSST", "FT", "LT")
# reported alongside the partition; overlaps FT in rag prompts
ATTRIBUTE_CATEGORY = "AT"
SUMMARY_CATEGORIES = CATEGORIES + (ATTRIBUTE_CATEGORY,)
TRACE_SITES = ("mlp_out", "attn_out", "residual_post")
SCENARIOS = ("vanilla", "rag")
ANSWER_POLICIES = ("clean_argmax", "dataset_attribute")


def categorize(seq_len: int, subject_start: int, subject_end: int) -> List[str]:
    """Position category for each of ``seq_len`` tokens.

    The final token is LT. A one-token subject is reported as LST. The token
    right after the subject is FSST; every other token, including anything
    before the subject, is FT.
    """
    if not 0 <= subject_start < subject_end <= seq_len:
        raise ValueError(f"subject span [{subject_start}, {subject_end}) invalid for length {seq_len}")
    cats = ["FT"] * seq_len
    for i in range(subject_start, subject_end):
        cats[i] = "MST"
    cats[subject_start] = "FST"
    cats[subject_end - 1] = "LST"
    if subject_end < seq_len:
        cats[subject_end] = "FSST"
    cats[seq_len - 1] = "LT"
    return cats


def categorize_positions(prompt) -> Dict[int, str]:
    if prompt.subject is None:
        raise ValueError(f"prompt {prompt.prompt_id}: subject span missing")
    cats = categorize(len(prompt), prompt.subject.start, prompt.subject.end)
    return dict(enumerate(cats))


@dataclass(frozen=True)
class TraceConfig:
    site: str = "mlp_out"
    window_radius: Optional[int] = None
    scenario: str = "vanilla"
    noise_seed: int = 0
    answer_policy: str = "clean_argmax"
    std_multiplier: float = 3.0

    def __post_init__(self):
        if self.site not in TRACE_SITES:
            raise ValueError(f"trace site must be one of {TRACE_SITES}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.answer_policy not in ANSWER_POLICIES:
            raise ValueError(f"answer_policy must be one of {ANSWER_POLICIES}")
        if self.window_radius is not None and self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")

    @property
    def radius(self) -> int:
        """Explicit radius, else 5 for MLP/attention sites and 0 for the residual."""
        if self.window_radius is not None:
            return self.window_radius
        return 0 if self.site == "residual_post" else 5


def layer_window(layer: int, radius: int, n_layers: int) -> range:
    return range(max(0, layer - radius), min(n_layers, layer + radius + 1))


@dataclass
class TraceResult:
    prompt_id: int
    scenario: str
    site: str
    answer_token: int
    p_clean: float
    p_corrupt: float
    ie_grid: np.ndarray  # [n_layers, seq_len]
    categories: Tuple[str, ...]
    corrupted_positions: Tuple[int, ...] = ()
    attribute_positions: Tuple[int, ...] = ()
    flipped: bool = False
    excluded: bool = False
    exclude_reason: str = ""

    @property
    def n_layers(self) -> int:
        return self.ie_grid.shape[0]


def corruption_positions(prompt, scenario: str) -> Tuple[int, ...]:
    """Subject span for vanilla; context plus subject for rag."""
    pos = set(prompt.subject.positions)
    if scenario == "rag":
        if prompt.context is None:
            raise ValueError(f"prompt {prompt.prompt_id}: rag scenario needs a resolved context span")
        pos.update(prompt.context.positions)
    return tuple(sorted(pos))


def restoration_probability(
    model: TransformerModel,
    tokens: Sequence[int],
    noise: NoiseSpec,
    clean: Dict[int, np.ndarray],
    site: str,
    layers: Sequence[int],
    positions: Sequence[int],
    answer: int,
) -> float:
    """Answer probability of the corrupted run with ``clean[layer][positions]``
    restored at ``site`` for each listed layer."""
    patches = []
    for l in layers:
        for i in positions:
            patches.append(PatchSpec(HookSite(l, site, int(i)), clean[l][i], source="clean"))
    out = forward(model, tokens, InterventionPlan(noise=noise, patches=tuple(patches)))
    return float(out.next_token_probs[answer])


def run_trace(model: TransformerModel, prompt, cfg: TraceConfig) -> TraceResult:
    tokens = prompt.token_ids
    L = model.config.n_layers
    if len(tokens) > model.config.max_seq_len:
        raise ValueError(
            f"prompt {prompt.prompt_id} has {len(tokens)} tokens; model context is {model.config.max_seq_len}"
        )
    cats = tuple(categorize(len(tokens), prompt.subject.start, prompt.subject.end))

    capture = all_sites(model, cfg.site)
    clean_run = forward(model, tokens, capture=capture)
    clean = {s.layer: clean_run.captured[s] for s in capture}
    if cfg.answer_policy == "clean_argmax":
        y = int(np.argmax(clean_run.next_token_probs))
    else:
        y = int(prompt.answer_token)
    p_clean = float(clean_run.next_token_probs[y])

    positions = corruption_positions(prompt, cfg.scenario)
    noise = NoiseSpec(positions, seed=cfg.noise_seed, std_multiplier=cfg.std_multiplier).resolve(model)
    corrupt_run = forward(model, tokens, InterventionPlan(noise=noise))
    p_corrupt = float(corrupt_run.next_token_probs[y])

    result = TraceResult(
        prompt.prompt_id, cfg.scenario, cfg.site, y, p_clean, p_corrupt,
        np.zeros((L, len(tokens))), cats, positions,
        attribute_positions=tuple(prompt.attribute.positions) if prompt.attribute is not None else (),
        flipped=int(np.argmax(corrupt_run.next_token_probs)) != y,
    )
    if cfg.answer_policy == "dataset_attribute" and p_clean == 0.0:
        result.excluded = True
        result.exclude_reason = "p_clean=0 for the dataset attribute token"
        return result

    r = cfg.radius
    for l in range(L):
        window = layer_window(l, r, L)
        for i in range(len(tokens)):
            p = restoration_probability(model, tokens, noise, clean, cfg.site, window, (i,), y)
            result.ie_grid[l, i] = p - p_corrupt
    return result


@dataclass
class AieSummary:
    """Mean indirect effect per (layer, category) and the number of prompts behind it."""

    site: str
    n_layers: int
    aie: Dict[Tuple[int, str], float] = field(default_factory=dict)
    n: Dict[Tuple[int, str], int] = field(default_factory=dict)

    def get(self, layer: int, category: str) -> float:
        return self.aie[(layer, category)]

    def _layers(self, category: str) -> List[float]:
        return [self.aie[(l, category)] for l in range(self.n_layers) if (l, category) in self.aie]

    def categories(self) -> List[str]:
        return [c for c in SUMMARY_CATEGORIES if any((l, c) in self.aie for l in range(self.n_layers))]

    def argmax(self) -> Tuple[int, str]:
        """(layer, category) of the largest AIE."""
        return max(self.aie, key=lambda k: (self.aie[k], -k[0]))

    def peak(self, category: str) -> float:
        """Max over layers; NaN when no prompt has the category."""
        vals = self._layers(category)
        return max(vals) if vals else float("nan")

    def layer_mean(self, category: str) -> float:
        vals = self._layers(category)
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        for l in range(self.n_layers):
            for c in SUMMARY_CATEGORIES:
                if (l, c) in self.aie:
                    yield l, c, self.aie[(l, c)], self.n[(l, c)]


def aggregate_aie(results: Sequence[TraceResult], include_attribute: bool = True) -> AieSummary:
    """Average IE per (layer, category): positions sharing a category within
    a prompt are averaged first, then prompts are averaged. Excluded results
    are skipped.

    With ``include_attribute`` an extra "AT" category averages the attribute
    span of prompts that have one.
    """
    used = [r for r in results if not r.excluded]
    if not used:
        raise ValueError("no trace results to aggregate")
    L, site = used[0].n_layers, used[0].site
    for r in used:
        if r.n_layers != L or r.site != site:
            raise ValueError("trace results disagree on layer count or site")
    sums: Dict[Tuple[int, str], float] = defaultdict(float)
    counts: Dict[Tuple[int, str], int] = defaultdict(int)
    for r in used:
        cats = np.asarray(r.categories)
        groups = [(c, np.flatnonzero(cats == c)) for c in CATEGORIES]
        if include_attribute and r.attribute_positions:
            groups.append((ATTRIBUTE_CATEGORY, np.asarray(r.attribute_positions)))
        for c, cols in groups:
            if cols.size == 0:
                continue
            per_layer = r.ie_grid[:, cols].mean(axis=1)
            for l in range(L):
                sums[(l, c)] += float(per_layer[l])
                counts[(l, c)] += 1
    summary = AieSummary(site, L)
    for key, s in sums.items():
        summary.aie[key] = s / counts[key]
        summary.n[key] = counts[key]
    return summary


# --- CSV ---------------------------------------------------------------------

TRACE_COLUMNS = ("prompt_id", "layer", "position", "category", "site", "ie")
AIE_COLUMNS = ("layer", "category", "aie", "n")


def _num(x: float) -> str:
    return repr(float(x))


def trace_csv(results: Sequence[TraceResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in sorted(results, key=lambda r: r.prompt_id):
        if r.excluded:
            continue
        for l in range(r.n_layers):
            for i, c in enumerate(r.categories):
                w.writerow((r.prompt_id, l, i, c, r.site, _num(r.ie_grid[l, i])))
    return buf.getvalue()


def aie_csv(summary: AieSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AIE_COLUMNS)
    for l, c, a, n in summary.rows():
        w.writerow((l, c, _num(a), n))
    return buf.getvalue()


def read_trace_csv(text: str) -> List[TraceResult]:
    """Rebuild IE grids (answer/probability fields are not stored and come back as 0)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    by_prompt: Dict[int, list] = defaultdict(list)
    for row in rows:
        by_prompt[int(row["prompt_id"])].append(row)
    out = []
    for pid, rs in sorted(by_prompt.items()):
        L = 1 + max(int(r["layer"]) for r in rs)
        S = 1 + max(int(r["position"]) for r in rs)
        grid = np.zeros((L, S))
        cats = [""] * S
        for r in rs:
            grid[int(r["layer"]), int(r["position"])] = float(r["ie"])
            cats[int(r["position"])] = r["category"]
        out.append(TraceResult(pid, "", rs[0]["site"], 0, 0.0, 0.0, grid, tuple(cats)))
    return out
