"""A small pre-norm decoder-only transformer in numpy with hook sites.

All activations are float32. The forward pass is a pure function of
(weights, tokens, intervention plan); noise comes from the plan's seed.

Block layout, per layer::

    h     = LN1(x)
    attn  = sum_h softmax(mask(q_h k_h^T / sqrt(d_head))) v_h W_O[h] + b_O
    x     = x + attn
    x     = x + W_out gelu(W_in LN2(x))

followed by a final LayerNorm and the unembedding.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .hooks import HookSite
from .intervention import (
    NEG_SENTINEL,
    InterventionPlan,
    PlanError,
    apply_noise,
    knockout_scores,
    softmax_rows,
)

POSITIONAL_SCHEMES = ("learned-absolute", "rotary")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int
    positional_scheme: str = "learned-absolute"
    ln_eps: float = 1e-5
    rotary_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) * d_head ({self.d_head})"
            )
        if self.positional_scheme not in POSITIONAL_SCHEMES:
            raise ValueError(f"positional_scheme must be one of {POSITIONAL_SCHEMES}")
        if self.positional_scheme == "rotary" and self.d_head % 2:
            raise ValueError("rotary embeddings need an even d_head")

    def to_dict(self) -> dict:
        return asdict(self)


def expected_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Every tensor a model with ``cfg`` must carry, with its shape."""
    D, V, M = cfg.d_model, cfg.vocab_size, cfg.d_mlp
    shapes = {"embed.tokens": (V, D)}
    if cfg.positional_scheme == "learned-absolute":
        shapes["embed.positions"] = (cfg.max_seq_len, D)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{w}"] = (D, D)
        shapes[f"{p}.attn.b_o"] = (D,)
        shapes[f"{p}.mlp.w_in"] = (D, M)
        shapes[f"{p}.mlp.w_out"] = (M, D)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.scale"] = (D,)
            shapes[f"{p}.{ln}.bias"] = (D,)
    shapes["final_ln.scale"] = (D,)
    shapes["final_ln.bias"] = (D,)
    shapes["unembed.w"] = (D, V)
    return shapes


class ModelLoadError(ValueError):
    pass


class TransformerModel:
    """Configuration plus named float32 tensors. Weights are read-only."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        want = expected_shapes(config)
        missing = [k for k in want if k not in params]
        if missing:
            raise ModelLoadError(f"missing tensor {missing[0]!r}")
        extra = sorted(set(params) - set(want))
        if extra:
            raise ModelLoadError(f"unexpected tensor {extra[0]!r}")
        frozen = {}
        for name, shape in want.items():
            arr = np.array(params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ModelLoadError(
                    f"shape mismatch for {name!r}: expected {list(shape)}, got {list(arr.shape)}"
                )
            arr.setflags(write=False)
            frozen[name] = arr
        self.params: Dict[str, np.ndarray] = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    @functools.cached_property
    def embedding_sigma(self) -> float:
        """Population std of the full token-embedding table (the 'auto' sigma)."""
        return float(self.params["embed.tokens"].astype(np.float64).std())

    def head_slice(self, head: int) -> slice:
        dh = self.config.d_head
        return slice(head * dh, (head + 1) * dh)


@dataclass
class RunOutcome:
    logits: np.ndarray  # [seq, vocab]
    next_token_probs: np.ndarray  # [vocab], float64
    captured: Dict[HookSite, np.ndarray]
    attention_weights: np.ndarray  # [layers, heads, seq, seq]


def layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + np.float32(eps))) * scale + bias


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    c = np.float32(np.sqrt(2.0 / np.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x ** 3)))


def _rotary(x: np.ndarray, base: float) -> np.ndarray:
    """Rotate [H, seq, d_head] by position, half-split convention."""
    _, seq, dh = x.shape
    half = dh // 2
    inv = 1.0 / (base ** (np.arange(half, dtype=np.float64) / half))
    ang = np.arange(seq, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def attention_input(model: TransformerModel, layer: int, resid_pre: np.ndarray) -> np.ndarray:
    """The normalized stream attention reads at ``layer``."""
    p = f"layers.{layer}"
    return layer_norm(resid_pre, model[f"{p}.ln1.scale"], model[f"{p}.ln1.bias"], model.config.ln_eps)


def init_random(config: ModelConfig, seed: int) -> TransformerModel:
    """Random weights for testing.

    Matrices are N(0, 1/fan_in); embeddings N(0, 1); attention output bias
    N(0, 0.02^2); LayerNorm scale 1 and bias 0.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".scale"):
            params[name] = np.ones(shape, np.float32)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, np.float32)
        elif name.startswith("embed."):
            params[name] = rng.normal(0.0, 1.0, shape).astype(np.float32)
        elif name.endswith(".b_o"):
            params[name] = rng.normal(0.0, 0.02, shape).astype(np.float32)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape).astype(np.float32)
    return TransformerModel(config, params)


class _Sites:
    """Per-run capture and patch bookkeeping."""

    def __init__(self, plan: InterventionPlan, capture: Iterable[HookSite], seq_len: int):
        self.seq_len = seq_len
        self.patches: Dict[tuple, list] = {}
        for p in plan.patches:
            self.patches.setdefault((p.site.layer, p.site.site), []).append(p)
        self.capture: Dict[tuple, list] = {}
        for s in capture:
            self.capture.setdefault((s.layer, s.site), []).append(s)
        self.captured: Dict[HookSite, np.ndarray] = {}

    def visit(self, layer: int, site: str, act: np.ndarray) -> np.ndarray:
        key = (layer, site)
        if key in self.patches:
            act = act.copy()
            for p in self.patches[key]:
                sel = p.site.selector(self.seq_len)
                target_shape = act[sel].shape
                if p.value.shape != target_shape:
                    raise PlanError(
                        f"patch at {p.site} has shape {p.value.shape}, activation slice is {target_shape}"
                    )
                act[sel] = p.value
        for s in self.capture.get(key, ()):
            if site == "attn_scores":
                self.captured[s] = act[:, s.selector(self.seq_len)].copy()
            else:
                self.captured[s] = act[s.selector(self.seq_len)].copy()
        return act


def forward(
    model: TransformerModel,
    tokens: Sequence[int],
    plan: Optional[InterventionPlan] = None,
    capture: Iterable[HookSite] = (),
) -> RunOutcome:
    """Run the model on one token sequence under an intervention plan."""
    cfg = model.config
    plan = plan or InterventionPlan()
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    S = int(toks.size)
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        bad = int(toks[(toks < 0) | (toks >= cfg.vocab_size)][0])
        raise ValueError(f"token id {bad} out of range [0, {cfg.vocab_size})")
    capture = list(capture)
    for s in capture:
        if s.layer >= cfg.n_layers:
            raise PlanError(f"capture layer {s.layer} out of range")
        hi = s.max_position()
        if hi is not None and hi >= S:
            raise PlanError(f"capture position {s.position} beyond sequence length {S}")
    plan.validate(S, cfg.n_layers)
    sites = _Sites(plan, capture, S)
    H, dh, eps = cfg.n_heads, cfg.d_head, cfg.ln_eps

    x = model["embed.tokens"][toks].copy()
    if plan.noise is not None:
        x = apply_noise(x, plan.noise.resolve(model))
    if cfg.positional_scheme == "learned-absolute":
        x = x + model["embed.positions"][:S]
    x = sites.visit(0, "embedding", x)

    causal = np.tril(np.ones((S, S), dtype=bool))
    scale = np.float32(1.0 / np.sqrt(dh))
    attn_weights = np.empty((cfg.n_layers, H, S, S), dtype=np.float32)

    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        x = sites.visit(l, "residual_pre", x)
        h = layer_norm(x, model[f"{p}.ln1.scale"], model[f"{p}.ln1.bias"], eps)
        q = (h @ model[f"{p}.attn.w_q"]).reshape(S, H, dh).transpose(1, 0, 2)
        k = (h @ model[f"{p}.attn.w_k"]).reshape(S, H, dh).transpose(1, 0, 2)
        v = (h @ model[f"{p}.attn.w_v"]).reshape(S, H, dh).transpose(1, 0, 2)
        if cfg.positional_scheme == "rotary":
            q = _rotary(q, cfg.rotary_base)
            k = _rotary(k, cfg.rotary_base)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores = np.where(causal, scores, NEG_SENTINEL)
        scores = knockout_scores(scores, plan.knockouts, l)
        sites.visit(l, "attn_scores", scores)
        A = softmax_rows(scores)
        attn_weights[l] = A
        z = A @ v  # [H, S, dh]
        w_o = model[f"{p}.attn.w_o"].reshape(H, dh, cfg.d_model)
        attn_out = np.einsum("hsd,hdm->sm", z, w_o) + model[f"{p}.attn.b_o"]
        attn_out = sites.visit(l, "attn_out", attn_out.astype(np.float32))
        x = x + attn_out
        h2 = layer_norm(x, model[f"{p}.ln2.scale"], model[f"{p}.ln2.bias"], eps)
        mlp_out = gelu(h2 @ model[f"{p}.mlp.w_in"]) @ model[f"{p}.mlp.w_out"]
        mlp_out = sites.visit(l, "mlp_out", mlp_out.astype(np.float32))
        x = x + mlp_out
        x = sites.visit(l, "residual_post", x)

    xf = layer_norm(x, model["final_ln.scale"], model["final_ln.bias"], eps)
    logits = (xf @ model["unembed.w"]).astype(np.float32)
    last = logits[-1].astype(np.float64)
    e = np.exp(last - last.max())
    probs = e / e.sum()
    return RunOutcome(logits, probs, sites.captured, attn_weights)


def all_sites(model: TransformerModel, site: str) -> list:
    """One whole-sequence HookSite per layer for ``site``."""
    if site == "embedding":
        return [HookSite(0, "embedding")]
    return [HookSite(l, site) for l in range(model.config.n_layers)]
