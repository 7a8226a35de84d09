"""Interpretability probes for retrieval-augmented prompts on small decoder transformers.

The package bundles a numpy transformer with hook sites, activation patching
and attention knockouts, causal tracing, attention-contribution analysis, the
context dataset tooling, and a command-line runner.
"""

__version__ = "0.1.0"

from .attention_analysis import (
    ConstraintAggregate,
    ContributionRecord,
    KnockoutOutcome,
    aggregate_constraints,
    compute_contributions,
    knockout_sweep,
    run_knockout_experiment,
    top_fraction,
)
from .causal_tracing import AieSummary, TraceConfig, TraceResult, aggregate_aie, categorize, run_trace
from .dataset import FactRecord, PromptInstance, RagContext, build_prompt, generate_context, validate_segments
from .hooks import SITES, HookSite
from .intervention import InterventionPlan, KnockoutSpec, NoiseSpec, PatchSpec
from .model_core import ModelConfig, RunOutcome, TransformerModel, forward, init_random
from .tokenization import Encoding, TokenSpan, Vocabulary, decode, encode, find_span
from .weights import load_model, save_model

__all__ = [
    "__version__",
    "AieSummary", "ConstraintAggregate", "ContributionRecord", "Encoding", "FactRecord", "HookSite",
    "InterventionPlan", "KnockoutOutcome", "KnockoutSpec", "ModelConfig", "NoiseSpec", "PatchSpec",
    "PromptInstance", "RagContext", "RunOutcome", "SITES", "TokenSpan", "TraceConfig", "TraceResult",
    "TransformerModel", "Vocabulary", "aggregate_aie", "aggregate_constraints", "build_prompt", "categorize",
    "compute_contributions", "decode", "encode", "find_span", "forward", "generate_context", "init_random",
    "knockout_sweep", "load_model", "run_knockout_experiment", "run_trace", "save_model", "top_fraction",
    "validate_segments",
]
