"""Hand-weighted copy-task surrogate model and its toy world.

A two-layer, one-head model over a word-level vocabulary. City names are
"attribute-class" tokens. Residual dims are laid out as:

    0..31   random token embedding
    32..39  content code, one dim per city
    40      attribute flag
    41      constant (LayerNorm bias 1, scale 0) acting as a bias input

Layer 0's MLP recognises city tokens and writes the flag and the city's
content code at that position. Layer 1's head queries on the constant dim
and keys on the flag, so every position (in particular the last one) attends
to the city token and copies its content code; the unembedding turns the code
into the " <City>" token. Layer 0 attention and layer 1 MLP are zero.
"""

from __future__ import annotations

import functools
import json
from importlib import resources
from typing import List, Tuple

import numpy as np

from .dataset import FactRecord, PromptInstance, RagContext, build_prompt, load_contexts, load_known_facts
from .model_core import ModelConfig, TransformerModel, expected_shapes, layer_norm
from .tokenization import Vocabulary, words_to_vocabulary

CITIES = ("Dublin", "Seattle", "Paris", "Rome", "Kyoto", "Bonn", "Berlin", "Madrid")
COPY_LAYER = 1
CANONICAL_ID = 14

D_MODEL = 64
TOKEN_DIMS = slice(0, 32)
CONTENT0 = 32
FLAG = 40
CONST = 41

EMBED_SEED = 0
DETECT_GAIN = 4.0
DETECT_THRESHOLD = 0.8  # fraction of the clean self-match score
WRITE_GAIN = 16.0  # MLP unit -> flag/content magnitude
QK_GAIN = 32.0  # product of query and key gains
COPY_GAIN = 10.0
UNEMBED_GAIN = 3.0


def _data_path(name: str):
    return resources.files("ragprobe") / "data" / name


def toy_facts() -> List[FactRecord]:
    with resources.as_file(_data_path("toy_facts.json")) as p:
        return load_known_facts(p)


def toy_contexts() -> List[RagContext]:
    with resources.as_file(_data_path("toy_contexts.json")) as p:
        return load_contexts(p)


def toy_responses() -> dict:
    return json.loads(_data_path("toy_responses.json").read_text(encoding="utf-8"))


@functools.lru_cache(maxsize=None)
def copy_task_vocabulary() -> Vocabulary:
    from .dataset import BRIDGE, CONTEXT_DIVIDER, CONTEXT_HEADER

    corpus = [CONTEXT_HEADER, BRIDGE, *CITIES]
    for f in toy_facts():
        corpus.append(f.prompt)
    for c in toy_contexts():
        corpus.extend(c.segments)
    return words_to_vocabulary(corpus, extra=[CONTEXT_DIVIDER])


def _city_tokens(vocab: Vocabulary) -> List[Tuple[int, int]]:
    """(token id, city index) for every spelling of every city."""
    out = []
    for ci, city in enumerate(CITIES):
        for spelling in (city, " " + city):
            out.append((vocab.token_to_id(spelling), ci))
    return out


def construct_copy_task_model() -> TransformerModel:
    vocab = copy_task_vocabulary()
    cities = _city_tokens(vocab)
    V, D = vocab.size, D_MODEL
    cfg = ModelConfig(n_layers=2, n_heads=1, d_model=D, d_head=D, d_mlp=len(cities),
                      vocab_size=V, max_seq_len=512)
    p = {name: np.zeros(shape, np.float32) for name, shape in expected_shapes(cfg).items()}

    rng = np.random.default_rng(EMBED_SEED)
    p["embed.tokens"][:, TOKEN_DIMS] = rng.normal(0.0, 1.0, (V, TOKEN_DIMS.stop))

    ln_scale = np.ones(D, np.float32)
    ln_scale[CONST] = 0.0
    ln_bias = np.zeros(D, np.float32)
    ln_bias[CONST] = 1.0
    for l in range(cfg.n_layers):
        for ln in ("ln1", "ln2"):
            p[f"layers.{l}.{ln}.scale"] = ln_scale.copy()
            p[f"layers.{l}.{ln}.bias"] = ln_bias.copy()
    p["final_ln.scale"] = ln_scale.copy()

    # layer 0 MLP: one detector unit per city spelling
    w_in = p["layers.0.mlp.w_in"]
    w_out = p["layers.0.mlp.w_out"]
    for j, (tid, ci) in enumerate(cities):
        h = layer_norm(p["embed.tokens"][tid], ln_scale, ln_bias, cfg.ln_eps)
        h[CONST] = 0.0
        match = float(np.linalg.norm(h))
        w_in[:, j] = DETECT_GAIN * h / match
        w_in[CONST, j] = -DETECT_GAIN * DETECT_THRESHOLD * match
        w_out[j, FLAG] = WRITE_GAIN
        w_out[j, CONTENT0 + ci] = WRITE_GAIN

    # layer 1 attention: attend to the flag, copy the content code
    p["layers.1.attn.w_q"][CONST, 0] = np.sqrt(QK_GAIN)
    p["layers.1.attn.w_k"][FLAG, 0] = np.sqrt(QK_GAIN)
    for ci in range(len(CITIES)):
        p["layers.1.attn.w_v"][CONTENT0 + ci, CONTENT0 + ci] = 1.0
        p["layers.1.attn.w_o"][CONTENT0 + ci, CONTENT0 + ci] = COPY_GAIN
        p["unembed.w"][CONTENT0 + ci, vocab.token_to_id(" " + CITIES[ci])] = UNEMBED_GAIN
    return TransformerModel(cfg, p)


def canonical_prompt(scenario: str = "rag") -> PromptInstance:
    """The sample record (Eavan Boland / Dublin) with its context."""
    rec = next(f for f in toy_facts() if f.known_id == CANONICAL_ID)
    ctx = next(c for c in toy_contexts() if c.index == CANONICAL_ID)
    return build_prompt(rec, ctx if scenario == "rag" else None, scenario, copy_task_vocabulary())
