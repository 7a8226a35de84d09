"""Declarative intervention plans: embedding corruption, activation patches and
attention-edge knockouts.

A plan is an immutable value; :func:`ragprobe.model_core.forward` executes it in
a fixed order: corruption of the token embeddings, then knockout masks inside
each attention layer, then activation patches at their sites. Plans serialize
to JSON (see :func:`plan_to_json`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .hooks import HookSite

if TYPE_CHECKING:
    from .model_core import TransformerModel

# Stand-in for -inf on masked attention scores. exp() of it underflows to
# exactly 0 after max-subtraction, without the NaNs a true -inf row produces.
NEG_SENTINEL = np.float32(np.finfo(np.float32).min)


class PlanError(ValueError):
    """An intervention plan that cannot be applied to a given run."""


def _positions(spans) -> Tuple[int, ...]:
    out = set()
    for s in spans:
        if isinstance(s, (int, np.integer)):
            out.add(int(s))
        elif hasattr(s, "start") and hasattr(s, "end"):
            out.update(range(s.start, s.end))
        else:
            start, end = s
            out.update(range(int(start), int(end)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian corruption of token embeddings at ``positions``.

    The noise std is ``std_multiplier * base_sigma``. ``base_sigma="auto"``
    defers to the model's full-table embedding std at forward time.
    """

    positions: Tuple[int, ...]
    seed: int = 0
    std_multiplier: float = 3.0
    base_sigma: Union[float, str] = "auto"

    def __post_init__(self):
        object.__setattr__(self, "positions", _positions(self.positions))
        if isinstance(self.base_sigma, str):
            if self.base_sigma != "auto":
                raise PlanError(f"base_sigma must be a number or 'auto', got {self.base_sigma!r}")
        elif not self.std_multiplier * float(self.base_sigma) > 0:
            raise PlanError(
                f"noise std must be > 0 (std_multiplier={self.std_multiplier}, sigma={self.base_sigma})"
            )

    @classmethod
    def over_spans(cls, spans: Iterable, **kwargs) -> "NoiseSpec":
        """Build from token spans (objects with start/end, or (start, end) pairs)."""
        return cls(positions=_positions(spans), **kwargs)

    @property
    def resolved(self) -> bool:
        return not isinstance(self.base_sigma, str)

    @property
    def nu(self) -> float:
        if not self.resolved:
            raise PlanError("noise sigma is unresolved ('auto'); call resolve() with a model")
        return float(self.std_multiplier * self.base_sigma)

    def resolve(self, model: "TransformerModel") -> "NoiseSpec":
        if self.resolved:
            return self
        return NoiseSpec(self.positions, self.seed, self.std_multiplier, model.embedding_sigma)


@dataclass(frozen=True, eq=False)
class PatchSpec:
    """Overwrite the activation at ``site`` with ``value``.

    ``source`` names the run the value was captured from; it is recorded for
    reproducibility only.
    """

    site: HookSite
    value: np.ndarray
    source: str = "clean"

    def __post_init__(self):
        v = np.array(self.value, dtype=np.float32)
        v.setflags(write=False)
        object.__setattr__(self, "value", v)
        if self.site.site == "attn_scores":
            raise PlanError("attn_scores is capture-only; patching it would bypass knockout masks")


@dataclass(frozen=True)
class KnockoutSpec:
    """Edges ``(layer, r, c)``: position r may not attend to position c at
    that layer, in every head."""

    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        edges = frozenset((int(l), int(r), int(c)) for l, r, c in self.edges)
        for l, r, c in edges:
            if c > r:
                raise PlanError(f"anti-causal knockout edge (layer={l}, r={r}, c={c}); need c <= r")
            if min(l, r, c) < 0:
                raise PlanError(f"negative index in knockout edge {(l, r, c)}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_window(cls, layers: Iterable[int], target: int, sources: Iterable[int]) -> "KnockoutSpec":
        return cls(frozenset((l, target, c) for l in layers for c in sources))

    def for_layer(self, layer: int):
        return [(r, c) for l, r, c in self.edges if l == layer]


@dataclass(frozen=True)
class InterventionPlan:
    """Everything done to one forward pass. The empty plan is a clean run."""

    noise: Optional[NoiseSpec] = None
    patches: Tuple[PatchSpec, ...] = ()
    knockouts: Optional[KnockoutSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        seen = {}
        for p in self.patches:
            key = (p.site.layer, p.site.site)
            pos = p.site.position
            claimed = seen.setdefault(key, [])
            for other in claimed:
                if _overlaps(pos, other):
                    raise PlanError(
                        f"conflicting patches at layer {key[0]} site {key[1]}: positions {other} and {pos}"
                    )
            claimed.append(pos)

    def validate(self, seq_len: int, n_layers: int) -> None:
        if self.noise is not None and self.noise.positions and self.noise.positions[-1] >= seq_len:
            raise PlanError(f"noise position {self.noise.positions[-1]} beyond sequence length {seq_len}")
        for p in self.patches:
            if p.site.layer >= n_layers:
                raise PlanError(f"patch layer {p.site.layer} out of range [0, {n_layers})")
            hi = p.site.max_position()
            if hi is not None and hi >= seq_len:
                raise PlanError(f"patch position {p.site.position} beyond sequence length {seq_len}")
        if self.knockouts is not None:
            for l, r, c in self.knockouts.edges:
                if l >= n_layers or r >= seq_len:
                    raise PlanError(f"knockout edge {(l, r, c)} outside model/sequence")


def _overlaps(a, b) -> bool:
    def rng(p):
        if p is None:
            return (0, float("inf"))
        if isinstance(p, tuple):
            return p
        return (p, p + 1)

    a0, a1 = rng(a)
    b0, b1 = rng(b)
    return a0 < b1 and b0 < a1


def resolve_sigma(model: "TransformerModel", sample_token_ids: Sequence[int]) -> float:
    """Population std over every entry of the sampled token embeddings."""
    ids = np.asarray(sample_token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot estimate embedding sigma from an empty sample")
    emb = model.params["embed.tokens"][ids].astype(np.float64)
    return float(emb.std())


def noise_tensor(spec: NoiseSpec, d_model: int) -> np.ndarray:
    """The exact noise block ``apply_noise`` adds, shape [len(positions), d_model]."""
    rng = np.random.default_rng(spec.seed)
    return rng.normal(0.0, spec.nu, size=(len(spec.positions), d_model)).astype(np.float32)


def apply_noise(embeddings: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Return a copy of ``embeddings`` with i.i.d. N(0, nu^2) added at the spec's positions."""
    out = np.array(embeddings, dtype=np.float32, copy=True)
    if not spec.resolved:
        raise PlanError("noise sigma is unresolved ('auto'); resolve it against a model first")
    if not spec.positions:
        return out
    if spec.positions[-1] >= out.shape[0]:
        raise PlanError(f"noise position {spec.positions[-1]} beyond sequence length {out.shape[0]}")
    idx = np.asarray(spec.positions)
    out[idx] += noise_tensor(spec, out.shape[1])
    return out


def knockout_scores(scores: np.ndarray, spec: Optional[KnockoutSpec], layer: int) -> np.ndarray:
    """Mask pre-softmax scores [H, seq, seq] for the spec's edges at ``layer``.

    Scores must already carry the causal mask; a row left with no unmasked
    entry is an error.
    """
    if spec is None:
        return scores
    edges = spec.for_layer(layer)
    if not edges:
        return scores
    seq = scores.shape[-1]
    out = np.array(scores, copy=True)
    rows = np.fromiter((r for r, _ in edges), dtype=np.int64, count=len(edges))
    cols = np.fromiter((c for _, c in edges), dtype=np.int64, count=len(edges))
    if np.any(cols > rows):
        raise PlanError("anti-causal knockout edge")
    if np.any(rows >= seq):
        raise PlanError(f"knockout row beyond sequence length {seq}")
    out[:, rows, cols] = NEG_SENTINEL
    for r in set(rows.tolist()):
        if np.all(out[:, r, : r + 1] == NEG_SENTINEL):
            raise PlanError(f"knockout removes every source for position {r} at layer {layer}")
    return out


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, tolerant of sentinel-masked entries."""
    m = scores.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


# --- serialization -----------------------------------------------------------

def plan_to_dict(plan: InterventionPlan) -> dict:
    d: dict = {"noise": None, "patches": [], "knockouts": None}
    if plan.noise is not None:
        n = plan.noise
        d["noise"] = {
            "positions": list(n.positions),
            "seed": n.seed,
            "std_multiplier": n.std_multiplier,
            "base_sigma": n.base_sigma,
        }
    for p in plan.patches:
        d["patches"].append({
            "site": p.site.to_dict(),
            "source": p.source,
            "shape": list(p.value.shape),
            "value": [float(x) for x in p.value.ravel()],
        })
    if plan.knockouts is not None:
        d["knockouts"] = sorted(list(e) for e in plan.knockouts.edges)
    return d


def plan_from_dict(d: dict) -> InterventionPlan:
    noise = None
    if d.get("noise") is not None:
        n = d["noise"]
        noise = NoiseSpec(tuple(n["positions"]), int(n["seed"]), float(n["std_multiplier"]), n["base_sigma"])
    patches = tuple(
        PatchSpec(
            HookSite.from_dict(p["site"]),
            np.asarray(p["value"], dtype=np.float32).reshape(p["shape"]),
            p.get("source", "clean"),
        )
        for p in d.get("patches", [])
    )
    knock = None
    if d.get("knockouts") is not None:
        knock = KnockoutSpec(frozenset(tuple(e) for e in d["knockouts"]))
    return InterventionPlan(noise, patches, knock)


def plan_to_json(plan: InterventionPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2, sort_keys=True)


def plan_from_json(text: str) -> InterventionPlan:
    return plan_from_dict(json.loads(text))
