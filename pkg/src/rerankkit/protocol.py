"""Prompt rendering and structured-output parsing/scoring.

The model sees one raw prompt per (query, document) pair and is expected to
answer with a ``yes``/``no`` token, followed for ``yes`` by a
``<contribution>`` and an ``<evidence>`` block.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any

from rerankkit.errors import ValidationError

DEFAULT_SYSTEM_PROMPT = (
    "Judge whether the Document meets the requirements based on the Query "
    "and the Instruct provided."
)

DEFAULT_INSTRUCTION = (
    "Given a query and a document, judge whether the document is relevant to the query. "
    'Answer "yes" or "no", then provide in XML:\n'
    "1. <contribution>: what the document contributes to the query.\n"
    "2. <evidence>: a self-contained rewrite of relevant content."
)

ASSISTANT_SUFFIX = "<|im_start|>assistant\n<think>\n\n</think>\n\n"

# A field counts as well-formed only when its trimmed text is longer than this.
MIN_FIELD_CHARS = 10


class Source(str, enum.Enum):
    OPEN_CORPUS = "open_corpus"
    WEB_SEARCH = "web_search"
    KEYWORD_REWRITE = "keyword_rewrite"


class Verdict(str, enum.Enum):
    YES = "yes"
    NO = "no"
    OTHER = "other"


class Label(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @classmethod
    def coerce(cls, value: Any) -> "Label":
        """Accept ``Label``, ``"positive"``/``"negative"``, ``"yes"``/``"no"``, bools and 0/1."""
        if isinstance(value, cls):
            return value
        if isinstance(value, bool) or value in (0, 1):
            return cls.POSITIVE if value else cls.NEGATIVE
        if isinstance(value, str):
            v = value.strip().lower()
            if v in ("positive", "yes", "1", "true"):
                return cls.POSITIVE
            if v in ("negative", "no", "0", "false"):
                return cls.NEGATIVE
        raise ValidationError(f"not a binary label: {value!r}")


@dataclass(frozen=True)
class QueryDocPair:
    pair_id: str
    query: str
    document: str
    language: str = "unknown"
    source: Source = Source.OPEN_CORPUS
    doc_token_count: int | None = None
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if not isinstance(self.pair_id, str) or not self.pair_id:
            raise ValidationError("pair_id must be a non-empty string")
        if not self.query or not self.query.strip():
            raise ValidationError("query must be non-empty")
        if not self.document or not self.document.strip():
            raise ValidationError("document must be non-empty")
        if not isinstance(self.source, Source):
            try:
                object.__setattr__(self, "source", Source(self.source))
            except ValueError:
                raise ValidationError(f"unknown source: {self.source!r}") from None
        if self.doc_token_count is not None and self.doc_token_count < 0:
            raise ValidationError("doc_token_count must be non-negative")

    def to_record(self) -> dict:
        rec = {
            "pair_id": self.pair_id,
            "query": self.query,
            "document": self.document,
            "language": self.language,
            "source": self.source.value,
            "metadata": self.metadata,
        }
        if self.doc_token_count is not None:
            rec["doc_token_count"] = self.doc_token_count
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "QueryDocPair":
        missing = [k for k in ("pair_id", "query", "document") if k not in rec]
        if missing:
            raise ValidationError(f"pair record missing fields: {', '.join(missing)}")
        return cls(
            pair_id=str(rec["pair_id"]),
            query=rec["query"],
            document=rec["document"],
            language=rec.get("language") or "unknown",
            source=rec.get("source") or Source.OPEN_CORPUS,
            doc_token_count=rec.get("doc_token_count"),
            metadata=dict(rec.get("metadata") or {}),
        )


@dataclass(frozen=True)
class PromptBundle:
    rendered_text: str
    label_position_marker: int


@dataclass(frozen=True)
class StructuredOutput:
    verdict: Verdict
    contribution: str | None = None
    evidence: str | None = None
    trailing_after_no: str | None = None
    raw: str = ""


@dataclass(frozen=True)
class FormatScore:
    value: float
    case: str  # no_clean | no_with_tail | yes_graded | bad_first_token


def render_prompt(
    pair: QueryDocPair,
    instruction: str = DEFAULT_INSTRUCTION,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
) -> PromptBundle:
    if not pair.query.strip():
        raise ValidationError("query must be non-empty")
    if not pair.document.strip():
        raise ValidationError("document must be non-empty")
    if not instruction.strip():
        raise ValidationError("instruction must be non-empty")
    if not system_prompt.strip():
        raise ValidationError("system_prompt must be non-empty")
    # str.format would choke on braces inside user text; plain concatenation does not.
    text = (
        "<|im_start|>system\n"
        + system_prompt
        + "<|im_end|>\n<|im_start|>user\n<Instruct>: "
        + instruction
        + "\n<Query>: "
        + pair.query
        + "\n<Document>: "
        + pair.document
        + "<|im_end|>\n"
        + ASSISTANT_SUFFIX
    )
    return PromptBundle(text, len(text.encode("utf-8")))


def _first_span(text: str, tag: str) -> str | None:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, flags=re.DOTALL)
    return m.group(1) if m else None


def parse_output(generated: str) -> StructuredOutput:
    """Classify the first whitespace-delimited token and pull out the tagged fields.

    Never raises: anything that does not start with ``yes``/``no`` is ``other``.
    """
    raw = generated if isinstance(generated, str) else str(generated)
    stripped = raw.lstrip()
    parts = stripped.split(None, 1)
    if not parts:
        return StructuredOutput(Verdict.OTHER, raw=raw)
    token = parts[0].lower()
    rest = stripped[len(parts[0]):]
    if token == "yes":
        return StructuredOutput(
            Verdict.YES,
            contribution=_first_span(rest, "contribution"),
            evidence=_first_span(rest, "evidence"),
            raw=raw,
        )
    if token == "no":
        tail = rest.strip()
        return StructuredOutput(Verdict.NO, trailing_after_no=tail or None, raw=raw)
    return StructuredOutput(Verdict.OTHER, raw=raw)


def field_well_formed(text: str | None) -> bool:
    return text is not None and len(text.strip()) > MIN_FIELD_CHARS


_YES_VALUES = {0: 0.4, 1: 0.7, 2: 1.0}


def format_score(out: StructuredOutput) -> FormatScore:
    if out.verdict is Verdict.NO:
        if out.trailing_after_no:
            return FormatScore(0.0, "no_with_tail")
        return FormatScore(1.0, "no_clean")
    if out.verdict is Verdict.YES:
        n_ok = field_well_formed(out.contribution) + field_well_formed(out.evidence)
        # table lookup instead of summing 0.4 + 0.3 + 0.3 keeps values exact
        return FormatScore(_YES_VALUES[n_ok], "yes_graded")
    return FormatScore(0.0, "bad_first_token")


def label_match(out: StructuredOutput, gold: Label | str | bool | int) -> bool:
    gold = Label.coerce(gold)
    if out.verdict is Verdict.YES:
        return gold is Label.POSITIVE
    if out.verdict is Verdict.NO:
        return gold is Label.NEGATIVE
    return False


def serialize_target(contribution: str, evidence: str) -> str:
    """Positive SFT target: verdict, newline, contribution block, newline, evidence block."""
    return f"yes\n<contribution>{contribution}</contribution>\n<evidence>{evidence}</evidence>"


NEGATIVE_TARGET = "no"
