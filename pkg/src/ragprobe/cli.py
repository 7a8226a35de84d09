"""Command-line runner: ``ragprobe dataset|trace|contrib|knockout|export-copy-task``.

Settings come from, in increasing priority: built-in defaults, a flat
``key = value`` config file (``--config``), and command-line flags. Config
keys are the long flag names with ``-`` or ``_`` (``max-retries``,
``answer_policy``); ``#`` starts a comment. Recognised keys:

    model, vocab, facts, contexts, fixtures, out, scenario, sample, seed,
    site, window, workers, fraction, max_retries, answer_policy,
    strict_first_segment, word_boundary

``model = copy-task`` (the default) selects the built-in handcrafted model
with its vocabulary and toy facts/contexts. Any other value is a weight
manifest path and then needs ``vocab``.

Every data-producing command writes CSVs plus ``manifest.json`` into
``--out``. CSVs hold no timestamps, so identical settings give identical
bytes; wall-clock times live only in the manifest.

Exit codes: 0 success, 1 validation or data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attention_analysis import (
    aggregate_constraints,
    compute_contributions,
    contribution_rows,
    contributions_csv,
    knockouts_csv,
    run_knockout_experiment,
    sliding_windows,
    top_fraction_mean,
)
from .causal_tracing import (
    ANSWER_POLICIES,
    SCENARIOS,
    SUMMARY_CATEGORIES,
    TRACE_SITES,
    TraceConfig,
    aggregate_aie,
    aie_csv,
    run_trace,
    trace_csv,
)
from .dataset import (
    DatasetError,
    FactRecord,
    GenerationFailed,
    RagContext,
    build_prompt,
    dumps_contexts,
    load_contexts,
    load_known_facts,
    generate_context,
    validate_segments,
)
from .model_core import ModelLoadError, TransformerModel, forward

log = logging.getLogger("ragprobe")

COPY_TASK = "copy-task"
EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2
DEFAULT_KNOCKOUT_WINDOW = 9


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = COPY_TASK
    vocab: Optional[str] = None
    facts: Optional[str] = None
    contexts: Optional[str] = None
    fixtures: Optional[str] = None
    out: str = "ragprobe-out"
    scenario: str = "both"
    sample: Optional[int] = None  # None = every available prompt
    seed: int = 0
    site: str = "mlp_out"
    window: Optional[int] = None  # trace: restoration radius; knockout: window size
    workers: int = 1
    fraction: float = 0.05
    max_retries: int = 3
    answer_policy: str = "clean_argmax"
    strict_first_segment: bool = True
    word_boundary: bool = False

    def scenarios(self) -> Tuple[str, ...]:
        return SCENARIOS if self.scenario == "both" else (self.scenario,)

    def check(self) -> None:
        if self.scenario not in SCENARIOS + ("both",):
            raise ConfigError(f"scenario must be vanilla, rag or both, not {self.scenario!r}")
        if self.site not in TRACE_SITES:
            raise ConfigError(f"site must be one of {', '.join(TRACE_SITES)}")
        if self.answer_policy not in ANSWER_POLICIES:
            raise ConfigError(f"answer_policy must be one of {', '.join(ANSWER_POLICIES)}")
        if self.sample is not None and self.sample < 0:
            raise ConfigError("sample must be >= 0")
        if self.window is not None and self.window < 0:
            raise ConfigError("window must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must be in (0, 1]")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        if self.model != COPY_TASK and not self.vocab:
            raise ConfigError("a model manifest needs --vocab")
        for name in ("model", "vocab", "facts", "contexts", "fixtures"):
            value = getattr(self, name)
            if value and value != COPY_TASK and not Path(value).is_file():
                raise ConfigError(f"{name} file not found: {value}")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if raw.lower() in ("", "none") and "Optional" in kind:
        return None
    try:
        if "bool" in kind:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path) -> Dict[str, object]:
    """Parse a flat ``key = value`` file into ExperimentConfig field values."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _FIELD_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = ExperimentConfig(**values)
    cfg.check()
    return cfg


# --- inputs ------------------------------------------------------------------

@dataclass
class Inputs:
    model: Optional[TransformerModel]
    vocab: object
    facts: List[FactRecord]
    contexts: Dict[int, RagContext]


def load_inputs(cfg: ExperimentConfig, need_model: bool = True) -> Inputs:
    from . import copy_task
    from .tokenization import Vocabulary
    from .weights import load_model

    model = None
    if cfg.model == COPY_TASK:
        if need_model:
            model = copy_task.construct_copy_task_model()
        vocab = copy_task.copy_task_vocabulary() if not cfg.vocab else Vocabulary.load(cfg.vocab)
    else:
        if need_model:
            model = load_model(cfg.model)
        vocab = Vocabulary.load(cfg.vocab)
    if model is not None and vocab.size != model.config.vocab_size:
        raise ConfigError(f"vocabulary has {vocab.size} tokens but the model expects {model.config.vocab_size}")
    facts = load_known_facts(cfg.facts) if cfg.facts else copy_task.toy_facts()
    if cfg.contexts:
        ctxs = load_contexts(cfg.contexts)
    elif cfg.facts:
        ctxs = []
    else:
        ctxs = copy_task.toy_contexts()
    return Inputs(model, vocab, facts, {c.index: c for c in ctxs})


def sample_records(records: Sequence, n: Optional[int], seed: int) -> list:
    """Seeded sample without replacement, returned in known_id order.

    The draw is ``numpy.random.default_rng(seed).permutation(len(records))``
    over the records sorted by ``known_id``, keeping the first ``n`` indices.
    """
    ordered = sorted(records, key=lambda r: r.known_id)
    if n is None:
        return ordered
    if n > len(ordered):
        raise ConfigError(f"sample size {n} exceeds the {len(ordered)} available records")
    picked = np.random.default_rng(seed).permutation(len(ordered))[:n]
    return [ordered[i] for i in sorted(picked)]


# --- manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    version: str = __version__
    prompts: List[dict] = field(default_factory=list)
    stages: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    partial: bool = False

    def record(self, prompt_id: int, scenario: Optional[str], reason: Optional[str] = None) -> None:
        entry = {"prompt_id": prompt_id, "status": "ok" if reason is None else "skipped"}
        if scenario is not None:
            entry["scenario"] = scenario
        if reason is not None:
            entry["reason"] = reason
        self.prompts.append(entry)

    def counts(self, scenario: Optional[str] = None) -> Dict[str, int]:
        sel = [p for p in self.prompts if scenario is None or p.get("scenario") == scenario]
        ok = sum(p["status"] == "ok" for p in sel)
        return {"ok": ok, "skipped": len(sel) - ok}

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path


class _Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.stages[self.name] = round(time.perf_counter() - self.t0, 6)


def _write(out: Path, name: str, text: str, manifest: RunManifest) -> None:
    (out / name).write_text(text, encoding="utf-8")
    manifest.outputs.append(name)


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- per-prompt runs ---------------------------------------------------------

def _prepare(inputs: Inputs, rec: FactRecord, scenario: str):
    """(prompt, None) or (None, skip reason)."""
    ctx = None
    if scenario == "rag":
        ctx = inputs.contexts.get(rec.known_id)
        if ctx is None:
            return None, "no context for record"
    try:
        prompt = build_prompt(rec, ctx, scenario, inputs.vocab)
    except (LookupError, ValueError) as e:
        return None, f"prompt construction failed: {e}"
    limit = inputs.model.config.max_seq_len
    if len(prompt) > limit:
        return None, f"prompt has {len(prompt)} tokens; model context is {limit}"
    return prompt, None


def _sweep(cfg: ExperimentConfig, inputs: Inputs, records, scenario: str, work: Callable, manifest: RunManifest):
    """Run ``work(prompt)`` for every record, in parallel when asked, and
    return results ordered by prompt id. Failures become skips."""

    def one(rec):
        prompt, reason = _prepare(inputs, rec, scenario)
        if prompt is None:
            return rec.known_id, None, reason
        try:
            return rec.known_id, work(prompt), None
        except (ValueError, LookupError, FloatingPointError) as e:
            return rec.known_id, None, f"{type(e).__name__}: {e}"

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    done = []
    for pid, value, reason in results:
        if reason is None and isinstance(value, tuple) and value and value[0] is _SKIP:
            reason, value = value[1], None
        manifest.record(pid, scenario, reason)
        if reason is None:
            done.append(value)
    return done


_SKIP = object()


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


# --- commands ----------------------------------------------------------------

def cmd_trace(cfg: ExperimentConfig, out=sys.stdout) -> int:
    manifest = RunManifest("trace", asdict(cfg))
    with _Stage(manifest, "load"):
        inputs = load_inputs(cfg)
        records = sample_records(inputs.facts, cfg.sample, cfg.seed)
    dest = _outdir(cfg)
    summaries = {}
    for scenario in cfg.scenarios():
        tcfg = TraceConfig(site=cfg.site, window_radius=cfg.window, scenario=scenario,
                           noise_seed=cfg.seed, answer_policy=cfg.answer_policy)

        def work(prompt, tcfg=tcfg):
            r = run_trace(inputs.model, prompt, tcfg)
            return (_SKIP, r.exclude_reason) if r.excluded else r

        with _Stage(manifest, f"trace_{scenario}"):
            results = _sweep(cfg, inputs, records, scenario, work, manifest)
        _write(dest, f"trace_{scenario}.csv", trace_csv(results), manifest)
        if results:
            summary = aggregate_aie(results)
            summaries[scenario] = summary
            _write(dest, f"aie_{scenario}.csv", aie_csv(summary), manifest)
            _print_aie(summary, scenario, out)
        else:
            _write(dest, f"aie_{scenario}.csv", aie_csv_empty(), manifest)
            print(f"[{scenario}] no traced prompts", file=out)
    if "vanilla" in summaries and "rag" in summaries:
        v, r = summaries["vanilla"], summaries["rag"]
        print(f"LST AIE vanilla/rag ratio: peak {_ratio(v.peak('LST'), r.peak('LST'))}, "
              f"layer-mean {_ratio(v.layer_mean('LST'), r.layer_mean('LST'))}", file=out)
    manifest.write(dest)
    return EXIT_OK


def aie_csv_empty() -> str:
    from .causal_tracing import AIE_COLUMNS

    return ",".join(AIE_COLUMNS) + "\n"


def _ratio(a: float, b: float) -> str:
    if a != a or b != b:
        return "nan"
    if b == 0:
        return "inf" if a else "nan"
    return f"{a / b:.4f}"


def _print_aie(summary, scenario: str, out) -> None:
    cats = summary.categories()
    print(f"[{scenario}] AIE at {summary.site} (rows: layer)", file=out)
    print("layer " + " ".join(f"{c:>8}" for c in cats), file=out)
    for l in range(summary.n_layers):
        vals = [summary.aie.get((l, c), float("nan")) for c in cats]
        print(f"{l:>5} " + " ".join(f"{_fmt(v):>8}" for v in vals), file=out)
    layer, cat = summary.argmax()
    print(f"[{scenario}] max AIE {_fmt(summary.aie[(layer, cat)])} at layer {layer}, category {cat}", file=out)


def cmd_contrib(cfg: ExperimentConfig, out=sys.stdout) -> int:
    manifest = RunManifest("contrib", asdict(cfg))
    with _Stage(manifest, "load"):
        inputs = load_inputs(cfg)
        records = sample_records(inputs.facts, cfg.sample, cfg.seed)
    dest = _outdir(cfg)
    H = inputs.model.config.n_heads
    means = []
    for scenario in cfg.scenarios():

        def work(prompt):
            spans = [("ST", prompt.subject)]
            if prompt.attribute is not None:
                spans.append(("AT", prompt.attribute))
            sources = sorted({p for _, s in spans for p in s.positions})
            recs = compute_contributions(inputs.model, prompt.token_ids, sources, prompt.last)
            return prompt.prompt_id, {label: aggregate_constraints(recs, span) for label, span in spans}

        with _Stage(manifest, f"contrib_{scenario}"):
            results = _sweep(cfg, inputs, records, scenario, work, manifest)
        rows = []
        for pid, aggs in results:
            for label, agg in aggs.items():
                rows.extend(contribution_rows(pid, label, agg, H))
        _write(dest, f"contributions_{scenario}.csv", contributions_csv(rows), manifest)
        for label in ("ST", "AT"):
            for pooling in ("max", "sum"):
                per_prompt = [top_fraction_mean(aggs[label].per_layer(pooling), cfg.fraction)
                              for _, aggs in results if label in aggs]
                if per_prompt:
                    means.append((label, scenario, pooling, cfg.fraction, len(per_prompt),
                                  float(np.mean(per_prompt))))
    lines = ["span_label,scenario,pooling,fraction,n_prompts,mean"]
    lines += [f"{a},{b},{c},{d!r},{n},{m!r}" for a, b, c, d, n, m in means]
    _write(dest, "contrib_means.csv", "\n".join(lines) + "\n", manifest)
    print("span  scenario pooling  n      mean", file=out)
    for label, scenario, pooling, _, n, m in means:
        print(f"{label:<5} {scenario:<8} {pooling:<7} {n:>3} {m:>9.4f}", file=out)
    manifest.write(dest)
    return EXIT_OK


def cmd_knockout(cfg: ExperimentConfig, out=sys.stdout) -> int:
    manifest = RunManifest("knockout", asdict(cfg))
    with _Stage(manifest, "load"):
        inputs = load_inputs(cfg)
        records = sample_records(inputs.facts, cfg.sample, cfg.seed)
    dest = _outdir(cfg)
    size = DEFAULT_KNOCKOUT_WINDOW if cfg.window is None else cfg.window
    L = inputs.model.config.n_layers
    windows = [(w, w[0]) for w in sliding_windows(L, size)]
    if windows:
        windows.append((tuple(range(L)), "all"))
    else:
        windows = [((), "none")]
    summary = []
    for scenario in cfg.scenarios():

        def work(prompt):
            labels = ["subject"] + (["attribute"] if prompt.attribute is not None else []) + ["control"]
            outs = []
            for label in labels:
                for layers, start in windows:
                    o = run_knockout_experiment(inputs.model, prompt, label, layers, window_start=start)
                    if o.excluded:
                        return (_SKIP, "p_base=0 for the tracked token")
                    outs.append(o)
            return outs

        with _Stage(manifest, f"knockout_{scenario}"):
            results = _sweep(cfg, inputs, records, scenario, work, manifest)
        flat = [o for outs in results for o in outs]
        _write(dest, f"knockouts_{scenario}.csv", knockouts_csv(flat), manifest)
        for label in ("subject", "attribute", "control"):
            sel = [o for o in flat if o.span_label == label]
            if not sel:
                continue
            max_drop = max(0.0, -min(o.relative_change_pct for o in sel))
            mean_all = [o.relative_change_pct for o in sel if o.window_start in ("all", "none")]
            summary.append((scenario, label, len({o.prompt_id for o in sel}), max_drop,
                            float(np.mean(mean_all)) if mean_all else 0.0))
    lines = ["scenario,span_label,n_prompts,max_drop_pct,mean_change_all_pct"]
    lines += [f"{s},{l},{n},{d!r},{m!r}" for s, l, n, d, m in summary]
    _write(dest, "knockout_summary.csv", "\n".join(lines) + "\n", manifest)
    print("scenario span       n  max drop %  mean change % (all layers)", file=out)
    for s, l, n, d, m in summary:
        print(f"{s:<8} {l:<9} {n:>3} {d:>10.2f} {m:>14.2f}", file=out)
    manifest.write(dest)
    return EXIT_OK


def cmd_dataset_validate(cfg: ExperimentConfig, out=sys.stdout) -> int:
    from . import copy_task

    ctxs = load_contexts(cfg.contexts) if cfg.contexts else copy_task.toy_contexts()
    n_ok = 0
    for i, c in enumerate(ctxs):
        v = validate_segments(c.user_query, c.object, c.segments, cfg.strict_first_segment, cfg.word_boundary)
        n_ok += v.ok
        status = "ok" if v.ok else "invalid: " + ", ".join(v.reasons)
        print(f"record {i} (index {c.index}): {status}", file=out)
    print(f"valid: {n_ok}/{len(ctxs)}", file=out)
    return EXIT_OK if n_ok == len(ctxs) else EXIT_DATA


def cmd_dataset_generate(cfg: ExperimentConfig, out=sys.stdout) -> int:
    from . import copy_task
    from .client import HttpChatClient, ReplayClient

    manifest = RunManifest("dataset generate", asdict(cfg))
    facts = load_known_facts(cfg.facts) if cfg.facts else copy_task.toy_facts()
    records = sample_records(facts, cfg.sample, cfg.seed)
    if cfg.fixtures:
        client = ReplayClient.from_file(cfg.fixtures)
    else:
        try:
            client = HttpChatClient.from_env(max_in_flight=cfg.workers)
        except RuntimeError as e:
            raise ConfigError(str(e)) from None
    dest = _outdir(cfg)

    def one(rec):
        try:
            return generate_context(client, rec, cfg.max_retries, cfg.strict_first_segment, cfg.word_boundary), None
        except GenerationFailed as e:
            return None, f"retries exhausted after {e.attempts} attempts: {', '.join(e.reasons)}"
        except RuntimeError as e:
            return None, f"client error: {e}"

    with _Stage(manifest, "generate"):
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(one, records))
        else:
            results = [one(r) for r in records]
    made = []
    for rec, (ctx, reason) in zip(records, results):
        manifest.record(rec.known_id, None, reason)
        if ctx is not None:
            made.append(ctx)
            print(f"record {rec.known_id}: ok after {ctx.attempts} attempt(s)", file=out)
        else:
            print(f"record {rec.known_id}: skipped ({reason})", file=out)
    manifest.partial = len(made) < len(records)
    _write(dest, "contexts.json", dumps_contexts(made), manifest)
    manifest.write(dest)
    print(f"generated: {len(made)}/{len(records)}", file=out)
    return EXIT_DATA if manifest.partial else EXIT_OK


def cmd_export_copy_task(cfg: ExperimentConfig, out=sys.stdout) -> int:
    """Write the built-in model, vocabulary and toy data as ordinary files."""
    from . import copy_task
    from .weights import save_model

    dest = _outdir(cfg)
    save_model(copy_task.construct_copy_task_model(), dest / "model.txt")
    copy_task.copy_task_vocabulary().save(dest / "vocab.txt")
    facts = [f.to_dict() for f in copy_task.toy_facts()]
    (dest / "facts.json").write_text(json.dumps(facts, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (dest / "contexts.json").write_text(dumps_contexts(copy_task.toy_contexts()), encoding="utf-8")
    (dest / "responses.json").write_text(
        json.dumps(copy_task.toy_responses(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote copy-task assets to {dest}", file=out)
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------

def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--model", help=f"weight manifest path, or {COPY_TASK!r} (default)")
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument("--facts", help="known-facts JSON")
    p.add_argument("--contexts", help="contexts JSON")
    p.add_argument("--fixtures", help="offline completions JSON for dataset generate")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scenario", help="vanilla, rag or both")
    p.add_argument("--sample", type=int, help="number of records to sample (default: all)")
    p.add_argument("--seed", type=int)
    p.add_argument("--site", help=f"trace site: {', '.join(TRACE_SITES)}")
    p.add_argument("--window", type=int, help="trace restoration radius, or knockout window size")
    p.add_argument("--workers", type=int, help="parallel prompts")
    p.add_argument("--fraction", type=float, help="top fraction of layers for contribution means")
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--answer-policy", dest="answer_policy", help=", ".join(ANSWER_POLICIES))
    p.add_argument("--lenient-first-segment", dest="strict_first_segment", action="store_const", const=False,
                   help="accept the attribute in any segment")
    p.add_argument("--word-boundary", dest="word_boundary", action="store_const", const=True,
                   help="count attribute occurrences at word boundaries only")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    parser = argparse.ArgumentParser(prog="ragprobe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"ragprobe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    ds = sub.add_parser("dataset", help="validate or generate contexts")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    ds_sub.add_parser("validate", parents=[shared]).set_defaults(func=cmd_dataset_validate)
    ds_sub.add_parser("generate", parents=[shared]).set_defaults(func=cmd_dataset_generate)
    sub.add_parser("trace", parents=[shared], help="causal tracing sweep").set_defaults(func=cmd_trace)
    sub.add_parser("contrib", parents=[shared], help="attention contributions").set_defaults(func=cmd_contrib)
    sub.add_parser("knockout", parents=[shared], help="attention knockout sweep").set_defaults(func=cmd_knockout)
    sub.add_parser("export-copy-task", parents=[shared],
                   help="write the built-in model and toy data to --out").set_defaults(func=cmd_export_copy_task)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg, sys.stdout)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ModelLoadError, ValueError, LookupError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
