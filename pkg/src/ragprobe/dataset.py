"""Known-fact records, synthetic RAG contexts and augmented prompts.

Fact files are JSON arrays of records with the fields ``known_id``,
``subject``, ``attribute``, ``template``, ``prompt`` and ``relation_id``
(``prediction`` is optional and ignored). Context files are JSON arrays of
``{"index", "user_query", "object", "response": [5 strings]}``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .tokenization import Encoding, TokenSpan, Vocabulary, covering_span, encode, find_span

log = logging.getLogger(__name__)

N_SEGMENTS = 5

CONTEXT_HEADER = "Information is below:"
CONTEXT_DIVIDER = "-" * 16
BRIDGE = "Given the context information and not prior knowledge, complete the following:"

SYSTEM_PROMPT = (
    "You are an expert data generation bot, specializing in generating 20 word segments.\n"
    "\n"
    "- You generate these 20-word segments by consolidating information/knowledge AROUND a "
    "sentence that the user provides, that is: {query} {object}.\n"
    "\n"
    "- While generating these five 20-word segments based on the sentence provided by the user, "
    "here: {query} {object}, make sure that only 1 of the 5 segments has the {object} explicitly "
    "mentioned. FOLLOW THIS INSTRUCTION STRICTLY.\n"
    "\n"
    "- Also make sure that none of these segments contain: {query}. Double check to make sure "
    "this instruction is strictly followed.\n"
    "\n"
    "- Also make sure that these segments follow the format of an array of segments, i.e, "
    "[segment1, segment2, segment3, segment4, segment5]"
)
USER_PROMPT = "Generate five 20-word segments based on the following sentence: {query} {object}"

_FACT_FIELDS = ("known_id", "subject", "attribute", "template", "prompt", "relation_id")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FactRecord:
    known_id: int
    subject: str
    attribute: str
    template: str
    prompt: str
    relation_id: str
    prediction: Optional[str] = field(default=None, compare=False)  # carried through, never used

    def __post_init__(self):
        if not self.subject:
            raise DatasetError(f"record {self.known_id}: empty subject")
        if not self.attribute:
            raise DatasetError(f"record {self.known_id}: empty attribute")
        if self.template.count("{}") != 1:
            raise DatasetError(f"record {self.known_id}: template must contain exactly one '{{}}'")
        if self.template.replace("{}", self.subject) != self.prompt:
            raise DatasetError(f"record {self.known_id}: prompt does not equal template with subject filled in")

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in _FACT_FIELDS}
        if self.prediction is not None:
            d["prediction"] = self.prediction
        return d


def dumps_facts(records: Sequence[FactRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, ensure_ascii=False) + "\n"


def load_known_facts(path) -> List[FactRecord]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise DatasetError(f"{path}: expected a JSON array of records")
    records = []
    for i, raw in enumerate(data):
        for f in _FACT_FIELDS:
            if f not in raw:
                raise DatasetError(f"record {i}: missing field {f!r}")
        records.append(FactRecord(
            known_id=int(raw["known_id"]),
            subject=raw["subject"],
            attribute=raw["attribute"],
            template=raw["template"],
            prompt=raw["prompt"],
            relation_id=str(raw["relation_id"]),
            prediction=raw.get("prediction"),
        ))
    log.info("loaded %d fact records from %s", len(records), path)
    return records


@dataclass(frozen=True)
class RagContext:
    index: int
    user_query: str
    object: str
    segments: Tuple[str, ...]
    attempts: int = field(default=1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if len(self.segments) != N_SEGMENTS:
            raise DatasetError(f"context {self.index}: expected {N_SEGMENTS} segments, got {len(self.segments)}")

    def to_dict(self) -> dict:
        return {"index": self.index, "user_query": self.user_query, "object": self.object,
                "response": list(self.segments)}

    @classmethod
    def from_dict(cls, d: dict) -> "RagContext":
        for f in ("index", "user_query", "object", "response"):
            if f not in d:
                raise DatasetError(f"context record missing field {f!r}")
        return cls(int(d["index"]), d["user_query"], d["object"], tuple(d["response"]))


def dumps_contexts(contexts: Sequence[RagContext]) -> str:
    return json.dumps([c.to_dict() for c in contexts], indent=2, ensure_ascii=False) + "\n"


def save_contexts(contexts: Sequence[RagContext], path) -> None:
    Path(path).write_text(dumps_contexts(contexts), encoding="utf-8")


def load_contexts(path) -> List[RagContext]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise DatasetError(f"{path}: expected a JSON array of contexts")
    out = []
    for i, d in enumerate(data):
        try:
            out.append(RagContext.from_dict(d))
        except DatasetError as e:
            raise DatasetError(f"context {i}: {e}") from None
    return out


# --- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    ok: bool
    reasons: Tuple[str, ...]
    object_count: int
    segment_words: Tuple[int, ...] = ()


def count_object(text: str, obj: str, word_boundary: bool = False) -> int:
    if word_boundary:
        return len(re.findall(r"(?<!\w)" + re.escape(obj) + r"(?!\w)", text))
    return text.count(obj)


def validate_segments(
    query: str,
    obj: str,
    segments: Sequence[str],
    strict_first_segment: bool = True,
    word_boundary: bool = False,
) -> Verdict:
    """Check the context constraints: the object occurs exactly once, the
    query never occurs, and (strict mode) the object sits in segment 1.

    Counting is plain substring counting unless ``word_boundary`` is set.
    """
    segments = list(segments)
    reasons = []
    if len(segments) != N_SEGMENTS:
        reasons.append(f"segment_count={len(segments)}")
    if any(not s.strip() for s in segments):
        reasons.append("empty_segment")
    joined = "\n".join(segments)
    n = count_object(joined, obj, word_boundary)
    if n != 1:
        reasons.append(f"object_count={n}")
    if query in joined:
        reasons.append("query_in_response")
    if strict_first_segment and n == 1 and segments and count_object(segments[0], obj, word_boundary) != 1:
        reasons.append("object_not_in_first_segment")
    return Verdict(not reasons, tuple(reasons), n, tuple(len(s.split()) for s in segments))


def validate_context(
    record: FactRecord,
    segments: Sequence[str],
    strict_first_segment: bool = True,
    word_boundary: bool = False,
) -> Verdict:
    return validate_segments(record.prompt, record.attribute, segments, strict_first_segment, word_boundary)


# --- generation --------------------------------------------------------------

class MalformedResponse(ValueError):
    pass


class ClientError(RuntimeError):
    pass


class GenerationFailed(RuntimeError):
    def __init__(self, known_id: int, attempts: int, reasons: Tuple[str, ...]):
        self.known_id = known_id
        self.attempts = attempts
        self.reasons = reasons
        super().__init__(f"record {known_id}: no valid context after {attempts} attempts; last reasons: {list(reasons)}")


def parse_segments(text: str) -> List[str]:
    """Parse a completion into segments.

    Accepts a bracketed list (JSON, or a Python literal with single quotes) or
    plain text with one segment per non-empty line.
    """
    import ast

    body = text.strip()
    items = None
    if body.startswith("["):
        for parse in (json.loads, ast.literal_eval):
            try:
                items = parse(body)
                break
            except (ValueError, SyntaxError):
                continue
        if items is None:
            raise MalformedResponse("unparseable bracketed list")
        if not isinstance(items, list) or not all(isinstance(s, str) for s in items):
            raise MalformedResponse("bracketed response is not a list of strings")
    else:
        items = [line for line in body.splitlines() if line.strip()]
    segs = [s.strip() for s in items]
    if len(segs) != N_SEGMENTS:
        raise MalformedResponse(f"expected {N_SEGMENTS} segments, got {len(segs)}")
    if any(not s for s in segs):
        raise MalformedResponse("empty segment")
    return segs


def generation_messages(record: FactRecord) -> Tuple[str, str]:
    """(system, user) prompts for one record."""
    kw = {"query": record.prompt, "object": record.attribute}
    return SYSTEM_PROMPT.format(**kw), USER_PROMPT.format(**kw)


def generate_context(
    client,
    record: FactRecord,
    max_retries: int = 3,
    strict_first_segment: bool = True,
    word_boundary: bool = False,
) -> RagContext:
    """Ask ``client`` for segments until they validate or attempts run out.

    ``client.complete(system, user, key=...)`` must return the completion text.
    Malformed completions count as failed attempts; client exceptions abort.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    system, user = generation_messages(record)
    reasons: Tuple[str, ...] = ()
    for attempt in range(1, max_retries + 1):
        try:
            text = client.complete(system, user, key=str(record.known_id))
        except Exception as e:  # transport, auth, exhausted fixtures
            raise ClientError(f"record {record.known_id}, attempt {attempt}: {e}") from e
        try:
            segs = parse_segments(text)
        except MalformedResponse as e:
            reasons = (f"malformed_response: {e}",)
            log.info("record %s attempt %d: %s", record.known_id, attempt, reasons[0])
            continue
        verdict = validate_context(record, segs, strict_first_segment, word_boundary)
        if verdict.ok:
            return RagContext(record.known_id, record.prompt, record.attribute, tuple(segs), attempts=attempt)
        reasons = verdict.reasons
        log.info("record %s attempt %d rejected: %s", record.known_id, attempt, ", ".join(reasons))
    raise GenerationFailed(record.known_id, max_retries, reasons)


# --- prompts -----------------------------------------------------------------

@dataclass(frozen=True)
class PromptInstance:
    prompt_id: int
    scenario: str
    text: str
    encoding: Encoding
    subject: TokenSpan
    attribute: Optional[TokenSpan]
    context: Optional[TokenSpan]
    answer_token: int
    record: FactRecord
    attribute_token_mismatch: bool = False

    @property
    def token_ids(self) -> Tuple[int, ...]:
        return self.encoding.ids

    @property
    def last(self) -> int:
        return len(self.encoding.ids) - 1

    def __len__(self) -> int:
        return len(self.encoding.ids)


def rag_text(query: str, segments: Sequence[str]) -> Tuple[str, Tuple[int, int]]:
    """Augmented prompt text and the character range of the segment block."""
    head = CONTEXT_HEADER + CONTEXT_DIVIDER + "\n"
    block = "\n".join(segments)
    text = head + block + "\n" + BRIDGE + "\n\n" + query
    return text, (len(head), len(head) + len(block))


def answer_token(vocab: Vocabulary, attribute: str) -> int:
    """First token of the attribute as a continuation (with a leading space)."""
    return encode(vocab, " " + attribute).ids[0]


def build_prompt(
    record: FactRecord,
    context: Optional[RagContext],
    scenario: str,
    vocab: Vocabulary,
    add_bos: bool = True,
) -> PromptInstance:
    if scenario == "vanilla":
        text = record.prompt
        ctx_range = None
    elif scenario == "rag":
        if context is None:
            raise DatasetError(f"record {record.known_id}: rag scenario needs a context")
        text, ctx_range = rag_text(record.prompt, context.segments)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    enc = encode(vocab, text, add_bos=add_bos)
    query_range = (len(text) - len(record.prompt), len(text))
    try:
        subj = find_span(enc, record.subject, "last", query_range, label="subject")
        attr = ctx = None
        if ctx_range is not None:
            attr = find_span(enc, record.attribute, "require_unique", ctx_range, label="attribute")
            ctx = covering_span(enc, ctx_range[0], ctx_range[1], label="context")
    except (LookupError, ValueError) as e:
        e.args = (f"record {record.known_id}: {e}",)
        raise
    y = answer_token(vocab, record.attribute)
    mismatch = attr is not None and enc.ids[attr.start] != y
    if mismatch:
        log.warning("record %s: attribute token in context (%d) differs from answer token (%d)",
                    record.known_id, enc.ids[attr.start], y)
    return PromptInstance(record.known_id, scenario, text, enc, subj, attr, ctx, y, record, mismatch)
