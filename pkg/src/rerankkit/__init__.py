"""Data-curation and evaluation toolkit for structured-output rerankers."""

from rerankkit.errors import (
    RerankKitError,
    TransportError,
    UnparseableResponseError,
    ValidationError,
)
from rerankkit.protocol import (
    FormatScore,
    Label,
    PromptBundle,
    QueryDocPair,
    Source,
    StructuredOutput,
    Verdict,
    format_score,
    label_match,
    parse_output,
    render_prompt,
    serialize_target,
)

__version__ = "0.1.0"

__all__ = [
    "FormatScore",
    "Label",
    "PromptBundle",
    "QueryDocPair",
    "RerankKitError",
    "Source",
    "StructuredOutput",
    "TransportError",
    "UnparseableResponseError",
    "ValidationError",
    "Verdict",
    "format_score",
    "label_match",
    "parse_output",
    "render_prompt",
    "serialize_target",
]
