"""Portable weight format: a text manifest plus raw float32 blobs.

Manifest schema (one ``key = value`` per line, ``#`` starts a comment)::

    format = ragprobe-weights-v1
    n_layers = 2
    n_heads = 1
    ...                                  # every ModelConfig field
    tensor.embed.tokens = shape=300x64 dtype=f32 file=weights.bin offset=0

Blob files hold little-endian IEEE float32 values, row-major. ``offset`` is in
bytes. Blob paths are relative to the manifest's directory.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .model_core import ModelConfig, ModelLoadError, TransformerModel, expected_shapes

FORMAT = "ragprobe-weights-v1"
_INT_FIELDS = ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq_len")
_FLOAT_FIELDS = ("ln_eps", "rotary_base")

PathLike = Union[str, os.PathLike]

_ALIASES = {"embed.tokens": "token_embedding", "embed.positions": "position_embedding", "unembed.w": "unembedding"}


def _label(name: str) -> str:
    alias = _ALIASES.get(name)
    return f"{name!r} ({alias})" if alias else repr(name)


def save_model(model: TransformerModel, manifest_path: PathLike, blob_name: str = "weights.bin") -> Path:
    """Write ``model`` as a manifest plus one blob next to it."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    lines = [f"format = {FORMAT}"]
    for k in _INT_FIELDS:
        lines.append(f"{k} = {getattr(cfg, k)}")
    lines.append(f"positional_scheme = {cfg.positional_scheme}")
    for k in _FLOAT_FIELDS:
        lines.append(f"{k} = {getattr(cfg, k)!r}")
    offset = 0
    with open(manifest_path.parent / blob_name, "wb") as blob:
        for name, shape in expected_shapes(cfg).items():
            data = np.ascontiguousarray(model[name], dtype="<f4").tobytes()
            blob.write(data)
            dims = "x".join(str(d) for d in shape)
            lines.append(f"tensor.{name} = shape={dims} dtype=f32 file={blob_name} offset={offset}")
            offset += len(data)
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def _parse_manifest(path: Path) -> Dict[str, str]:
    entries = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelLoadError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    return entries


def load_model(weight_manifest_path: PathLike) -> TransformerModel:
    path = Path(weight_manifest_path)
    if not path.is_file():
        raise ModelLoadError(f"manifest not found: {path}")
    entries = _parse_manifest(path)
    if entries.get("format") != FORMAT:
        raise ModelLoadError(f"unsupported manifest format {entries.get('format')!r}")
    try:
        kwargs = {k: int(entries[k]) for k in _INT_FIELDS}
        kwargs["positional_scheme"] = entries.get("positional_scheme", "learned-absolute")
        for k in _FLOAT_FIELDS:
            if k in entries:
                kwargs[k] = float(entries[k])
    except KeyError as e:
        raise ModelLoadError(f"manifest missing config field {e.args[0]!r}") from None
    cfg = ModelConfig(**kwargs)

    blobs: Dict[str, bytes] = {}
    params = {}
    for name, want in expected_shapes(cfg).items():
        spec = entries.get(f"tensor.{name}")
        if spec is None:
            raise ModelLoadError(f"missing tensor {_label(name)}")
        fields = dict(tok.split("=", 1) for tok in spec.split())
        shape = tuple(int(d) for d in fields["shape"].split("x")) if fields.get("shape") else ()
        if shape != want:
            raise ModelLoadError(
                f"shape mismatch for {_label(name)}: expected {list(want)}, got {list(shape)}"
            )
        if fields.get("dtype", "f32") != "f32":
            raise ModelLoadError(f"tensor {name!r}: only dtype=f32 is supported")
        fname = fields["file"]
        if fname not in blobs:
            blob_path = path.parent / fname
            if not blob_path.is_file():
                raise ModelLoadError(f"blob {fname!r} for tensor {name!r} not found")
            blobs[fname] = blob_path.read_bytes()
        count = int(np.prod(shape))
        offset = int(fields.get("offset", 0))
        if offset + 4 * count > len(blobs[fname]):
            raise ModelLoadError(f"tensor {name!r} runs past the end of {fname!r}")
        arr = np.frombuffer(blobs[fname], dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
    return TransformerModel(cfg, params)
