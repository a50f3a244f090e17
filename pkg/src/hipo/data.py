"""Segmented preference records: JSONL parsing, span computation, validation.

A record is one JSON object per line:

    {"prompt": str,
     "chosen":   {"refined_query": str, "meta_thinking": str, "refined_answer": str},
     "rejected": {"refined_query": str, "meta_thinking": str, "refined_answer": str}}

The three segment texts of a response tokenize to contiguous spans that
exactly partition the response token sequence (separator text belongs to the
end of the preceding segment). Parsing is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple

from .model import BOS_ID, Vocab, detokenize, tokenize


class DataError(ValueError):
    """Base class for record-level failures."""


class RecordParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(DataError):
    def __init__(self, key: str, message: str = "missing or invalid"):
        super().__init__(f"field '{key}': {message}")
        self.key = key


class EmptySegmentError(DataError):
    def __init__(self, key: str):
        super().__init__(f"segment '{key}' is empty")
        self.key = key


class SpanError(DataError):
    """Base class for span-validation failures."""


class SpanOverlapError(SpanError):
    pass


class SpanGapError(SpanError):
    pass


class SpanRangeError(SpanError):
    pass


class EmptySpanError(SpanError):
    pass


class ContextOverflowError(DataError):
    """Records whose tokenization does not fit the model context."""

    def __init__(self, indices: list[int], context_length: int):
        super().__init__(
            f"{len(indices)} record(s) exceed context {context_length}: "
            f"indices {indices[:20]}{'...' if len(indices) > 20 else ''}"
        )
        self.indices = indices


class SegmentKind(str, Enum):
    RQ = "rq"
    MT = "mt"
    A = "a"
    Y = "y"  # the full response


class Span(NamedTuple):
    """Half-open token index range [start, end)."""

    start: int
    end: int


def validate_spans(rq: Span, mt: Span, a: Span, response_len: int) -> None:
    """Check that the three spans partition [0, response_len)."""
    spans = [("rq", Span(*rq)), ("mt", Span(*mt)), ("a", Span(*a))]
    for name, s in spans:
        if s.end <= s.start:
            raise EmptySpanError(f"span '{name}' [{s.start},{s.end}) is empty")
        if s.start < 0 or s.end > response_len:
            raise SpanRangeError(f"span '{name}' [{s.start},{s.end}) outside [0,{response_len})")
    for (n1, s1), (n2, s2) in zip(spans, spans[1:]):
        if s2.start < s1.end:
            raise SpanOverlapError(f"spans '{n1}' and '{n2}' overlap")
        if s2.start > s1.end:
            raise SpanGapError(f"gap between spans '{n1}' and '{n2}'")
    if spans[0][1].start != 0:
        raise SpanGapError("first span must start at 0")
    if spans[-1][1].end != response_len:
        raise SpanRangeError("last span must end at the response length")


@dataclass(frozen=True)
class SegmentSpans:
    """Rq before Mt before A; construction enforces the partition shape."""

    rq: Span
    mt: Span
    a: Span

    def __post_init__(self):
        object.__setattr__(self, "rq", Span(*self.rq))
        object.__setattr__(self, "mt", Span(*self.mt))
        object.__setattr__(self, "a", Span(*self.a))
        validate_spans(self.rq, self.mt, self.a, self.a.end)

    def by_kind(self, kind: SegmentKind) -> Span:
        if kind is SegmentKind.Y:
            return Span(0, self.a.end)
        return getattr(self, kind.value)


def compute_spans(
    vocab: Vocab, text_rq: str | bytes, text_mt: str | bytes, text_a: str | bytes
) -> tuple[list[int], SegmentSpans]:
    """Tokenize the concatenation Rq‖Mt‖A and return the segment ranges."""
    parts = {"refined_query": text_rq, "meta_thinking": text_mt, "refined_answer": text_a}
    tokens: list[int] = []
    bounds = []
    for key, text in parts.items():
        ids = tokenize(text)
        if not ids:
            raise EmptySegmentError(key)
        bounds.append(Span(len(tokens), len(tokens) + len(ids)))
        tokens.extend(ids)
    return tokens, SegmentSpans(*bounds)


@dataclass(frozen=True)
class SegmentedResponse:
    text_rq: str
    text_mt: str
    text_a: str
    tokens: tuple[int, ...]
    spans: SegmentSpans

    @classmethod
    def from_texts(cls, text_rq: str, text_mt: str, text_a: str, vocab: Vocab = Vocab()) -> "SegmentedResponse":
        tokens, spans = compute_spans(vocab, text_rq, text_mt, text_a)
        return cls(text_rq, text_mt, text_a, tuple(tokens), spans)

    def __post_init__(self):
        validate_spans(self.spans.rq, self.spans.mt, self.spans.a, len(self.tokens))
        for key, text, span in (
            ("refined_query", self.text_rq, self.spans.rq),
            ("meta_thinking", self.text_mt, self.spans.mt),
            ("refined_answer", self.text_a, self.spans.a),
        ):
            raw = text.encode("utf-8") if isinstance(text, str) else text
            if detokenize(self.tokens[span.start : span.end]) != raw:
                raise SchemaError(key, "span does not round-trip to its text")


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: SegmentedResponse
    rejected: SegmentedResponse

    def __post_init__(self):
        if not self.prompt:
            raise SchemaError("prompt", "must be non-empty")
        if self.chosen.tokens == self.rejected.tokens:
            raise SchemaError("rejected", "chosen and rejected are token-identical")

    def prompt_tokens(self) -> list[int]:
        return [BOS_ID] + tokenize(self.prompt)

    def total_lengths(self) -> tuple[int, int]:
        """(prompt+chosen, prompt+rejected) model input lengths."""
        zp = len(self.prompt_tokens())
        return zp + len(self.chosen.tokens), zp + len(self.rejected.tokens)


_RESPONSE_KEYS = ("refined_query", "meta_thinking", "refined_answer")


def _parse_response(obj, side: str) -> SegmentedResponse:
    if not isinstance(obj, dict):
        raise SchemaError(side, "must be an object")
    texts = []
    for key in _RESPONSE_KEYS:
        if key not in obj:
            raise SchemaError(f"{side}.{key}" if side else key, "missing")
        val = obj[key]
        if not isinstance(val, str):
            raise SchemaError(f"{side}.{key}", "must be a string")
        if val == "":
            raise EmptySegmentError(f"{side}.{key}")
        texts.append(val)
    return SegmentedResponse.from_texts(*texts)


def parse_record(line: str | bytes) -> PreferencePair:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise RecordParseError(f"malformed JSON: {e.msg}", e.pos) from e
    if not isinstance(obj, dict):
        raise SchemaError("<record>", "must be a JSON object")
    for key in ("prompt", "chosen", "rejected"):
        if key not in obj:
            raise SchemaError(key, "missing")
    if not isinstance(obj["prompt"], str) or obj["prompt"] == "":
        raise SchemaError("prompt", "must be a non-empty string")
    return PreferencePair(
        prompt=obj["prompt"],
        chosen=_parse_response(obj["chosen"], "chosen"),
        rejected=_parse_response(obj["rejected"], "rejected"),
    )


def serialize_record(pair: PreferencePair) -> str:
    def side(resp: SegmentedResponse) -> dict:
        return {
            "refined_query": resp.text_rq,
            "meta_thinking": resp.text_mt,
            "refined_answer": resp.text_a,
        }

    return json.dumps(
        {"prompt": pair.prompt, "chosen": side(pair.chosen), "rejected": side(pair.rejected)},
        ensure_ascii=False,
    )


def load_jsonl(path: str | Path, context_length: int | None = None) -> list[PreferencePair]:
    """Parse a JSONL file; with `context_length`, reject over-long records.

    Over-long records are a load-time failure with the offending indices,
    never a silent truncation.
    """
    pairs: list[PreferencePair] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                pairs.append(parse_record(line))
            except DataError as e:
                raise DataError(f"line {lineno + 1}: {e}") from e
    if context_length is not None:
        bad = [
            i
            for i, p in enumerate(pairs)
            if max(p.total_lengths()) > context_length
        ]
        if bad:
            raise ContextOverflowError(bad, context_length)
    return pairs


def save_jsonl(pairs: Iterable[PreferencePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(serialize_record(pair) + "\n")
