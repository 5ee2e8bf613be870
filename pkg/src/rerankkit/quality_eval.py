"""Contribution/evidence quality: entity fidelity, compression, judge-scored dimensions, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from rerankkit.errors import UnparseableResponseError, ValidationError
from rerankkit.protocol import (
    Label,
    QueryDocPair,
    StructuredOutput,
    Verdict,
    format_score,
    label_match,
    parse_output,
)
from rerankkit.tokens import TokenCounter, count_tokens
from rerankkit.transport import ChatClient, JsonlCache, content_hash

logger = logging.getLogger(__name__)

DIMENSIONS = (
    "contribution_accuracy",
    "contribution_coverage",
    "evidence_faithfulness",
    "evidence_self_contained",
    "evidence_concision",
    "language_consistency",
)

ENTITY_KINDS = ("llm_extracted", "number", "percentage", "date")

# ---------------------------------------------------------------------------
# entity extraction

_MONTHS = (
    r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|June?|July?|Aug(?:ust)?"
    r"|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)\.?"
)
_ORD = r"(?:st|nd|rd|th)?"

NUMBER_RE = re.compile(r"(?<![\d.,])\d{1,3}(?:,\d{3})+(?:\.\d+)?(?!\d)|(?<![\d.])\d+(?:\.\d+)?")
PERCENT_RE = re.compile(r"(?<![\d.])\d+(?:[.,]\d+)?\s?[%％]")
DATE_RES = (
    re.compile(r"(?<!\d)\d{4}-\d{2}-\d{2}(?!\d)"),
    re.compile(rf"\b{_MONTHS}\s+\d{{1,2}}{_ORD},?\s+\d{{4}}(?!\d)"),
    re.compile(rf"(?<!\d)\d{{1,2}}{_ORD}\s+{_MONTHS},?\s+\d{{4}}(?!\d)"),
    re.compile(r"(?<!\d)\d{4}\s?年(?:\s?\d{1,2}\s?月(?:\s?\d{1,2}\s?日)?)?"),
)

# Non-canonical default prompt.
EXTRACT_PROMPT = """List the key entities in the text below: proper nouns, technical terms, model codes, and URLs.
Copy each entity exactly as it is written in the text. Return only a JSON array of strings, [] if there are none.

Text:
{evidence}"""


@dataclass(frozen=True)
class Entity:
    text: str
    kind: str = "llm_extracted"


@dataclass
class EntityExtraction:
    entities: list[Entity]
    extractor_ok: bool = True


def regex_entities(text: str) -> list[Entity]:
    found: list[tuple[int, int, Entity]] = []
    for m in NUMBER_RE.finditer(text):
        found.append((m.start(), 1, Entity(m.group(), "number")))
    for m in PERCENT_RE.finditer(text):
        found.append((m.start(), 2, Entity(m.group(), "percentage")))
    for rx in DATE_RES:
        for m in rx.finditer(text):
            found.append((m.start(), 3, Entity(m.group(), "date")))
    found.sort(key=lambda t: (t[0], t[1]))
    return [e for _, _, e in found]


def parse_entity_list(text: str) -> list[str] | None:
    text = text.strip()
    candidates = [text]
    m = re.search(r"\[.*\]", text, flags=re.DOTALL)
    if m:
        candidates.append(m.group())
    for c in candidates:
        try:
            data = json.loads(c)
        except json.JSONDecodeError:
            continue
        if isinstance(data, list):
            return [x.strip() for x in data if isinstance(x, str) and x.strip()]
    return None


def _dedupe(entities: Iterable[Entity]) -> list[Entity]:
    seen: set[str] = set()
    out = []
    for e in entities:
        if e.text not in seen:
            seen.add(e.text)
            out.append(e)
    return out


def extract_entities(
    evidence: str,
    extractor: ChatClient | None = None,
    cache: JsonlCache | None = None,
    prompt: str = EXTRACT_PROMPT,
) -> EntityExtraction:
    """LLM-listed entities (if an extractor is given) followed by regex captures, deduplicated."""
    if not evidence or not evidence.strip():
        raise ValidationError("evidence must be non-empty")
    llm: list[Entity] = []
    ok = True
    if extractor is not None:
        key = content_hash("entities", extractor.endpoint.model_name, prompt, evidence)
        items = cache.get(key) if cache is not None else None
        if items is None:
            raw = extractor.complete([{"role": "user", "content": prompt.replace("{evidence}", evidence)}])
            items = parse_entity_list(raw)
            if items is None:
                logger.warning("extractor response is not a JSON list; falling back to regex only")
                ok = False
                items = []
            elif cache is not None:
                cache.put(key, items)
        llm = [Entity(t, "llm_extracted") for t in items]
    return EntityExtraction(_dedupe([*llm, *regex_entities(evidence)]), ok)


@dataclass
class EntityFidelityResult:
    pair_id: str
    entities: list[tuple[str, str, bool]]
    fidelity: float
    empty: bool = False

    def not_found(self) -> list[str]:
        return [t for t, _, found in self.entities if not found]


def entity_fidelity(
    evidence: str, document: str, entities: Sequence[Entity | str], pair_id: str = ""
) -> EntityFidelityResult:
    """Exact, case-sensitive substring check of each entity against the raw document.

    An empty entity set scores 1.0 and is flagged with ``empty=True``.
    """
    checked = []
    for e in entities:
        ent = e if isinstance(e, Entity) else Entity(e)
        checked.append((ent.text, ent.kind, ent.text in document))
    if not checked:
        return EntityFidelityResult(pair_id, [], 1.0, empty=True)
    return EntityFidelityResult(pair_id, checked, sum(f for *_, f in checked) / len(checked))


# ---------------------------------------------------------------------------
# compression


@dataclass
class CompressionStats:
    ratios: list[float]
    median: float | None
    p10: float | None
    p90: float | None
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return {"n": len(self.ratios), "median": self.median, "p10": self.p10, "p90": self.p90, "n_skipped": self.n_skipped}


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def compression_stats(
    pairs: Iterable[tuple[str, str]], tokenizer: TokenCounter = count_tokens
) -> CompressionStats:
    ratios, skipped = [], 0
    for evidence, document in pairs:
        n_doc = tokenizer(document)
        if n_doc < 1:
            skipped += 1
            continue
        ratios.append(tokenizer(evidence) / n_doc)
    if not ratios:
        return CompressionStats([], None, None, None, skipped)
    s = sorted(ratios)
    return CompressionStats(ratios, nearest_rank(s, 50), nearest_rank(s, 10), nearest_rank(s, 90), skipped)


# ---------------------------------------------------------------------------
# judge-scored dimensions


@dataclass(frozen=True)
class QualityScores:
    contribution_accuracy: int
    contribution_coverage: int
    evidence_faithfulness: int
    evidence_self_contained: int
    evidence_concision: int
    language_consistency: int

    def __post_init__(self) -> None:
        for name in DIMENSIONS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise ValidationError(f"{name} must be an integer in 1..5, got {v!r}")
        if self.language_consistency not in (1, 5):
            raise ValidationError(f"language_consistency must be 1 or 5, got {self.language_consistency}")

    def to_dict(self) -> dict:
        return asdict(self)


# Non-canonical default prompt.
QUALITY_PROMPT = """You grade the structured output of a reranker. Given a Query, the source Document,
and the model's <contribution> and <evidence>, score six dimensions with integers from 1 to 5.

Calibration: start every dimension at 3, the score of an acceptable output. Give 4 only for clear merit
with no shortcoming. Give 5 only when the output is expert-level and clearer than the source itself.
Expect most outputs to land between 2 and 4.

Dimensions:
- contribution_accuracy: does the contribution describe what the document really offers for the query?
  Invented content or generic filler such as "this article discusses..." scores at most 2.
- contribution_coverage: does the one sentence name all key points, without omissions or repetition?
- evidence_faithfulness: are numbers, names and hedging words carried over exactly from the document?
  Any changed number, invented number, or invented causal claim scores 1.
- evidence_self_contained: can the evidence answer the query on its own? Dangling references
  ("this method", "they") or dropped qualifiers (sample size, time range) lower the score.
- evidence_concision: is unrelated background removed? A plain copy of the source scores at most 3.
- language_consistency: 5 if the output is written in the document's language (for mixed-language documents,
  the query's language, else English), otherwise 1. Ignore proper nouns and technical terms. Only 1 or 5.

Answer with one JSON object holding exactly these six integer fields and nothing else.

Query: {query}

Document: {document}

<contribution>{contribution}</contribution>
<evidence>{evidence}</evidence>"""


def parse_quality_response(text: str) -> QualityScores:
    m = re.search(r"\{.*\}", text, flags=re.DOTALL)
    if not m:
        raise ValidationError("no JSON object in judge response")
    try:
        data = json.loads(m.group())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"judge response is not valid JSON: {exc}") from None
    missing = [d for d in DIMENSIONS if d not in data]
    if missing:
        raise ValidationError(f"judge response lacks {', '.join(missing)}")
    return QualityScores(**{d: data[d] for d in DIMENSIONS})


def judge_quality(
    pair: QueryDocPair,
    out: StructuredOutput,
    judge: ChatClient,
    cache: JsonlCache | None = None,
    *,
    max_attempts: int = 3,
    prompt: str = QUALITY_PROMPT,
) -> QualityScores:
    if out.verdict is not Verdict.YES:
        raise ValidationError(f"pair {pair.pair_id}: quality is judged only for yes outputs")
    message = (
        prompt.replace("{query}", pair.query)
        .replace("{document}", pair.document)
        .replace("{contribution}", (out.contribution or "").strip())
        .replace("{evidence}", (out.evidence or "").strip())
    )
    key = content_hash("quality", judge.endpoint.model_name, message)
    if cache is not None and key in cache:
        return QualityScores(**cache.get(key))
    raw = ""
    for attempt in range(max_attempts):
        raw = judge.complete([{"role": "user", "content": message}])
        try:
            scores = parse_quality_response(raw)
        except ValidationError as exc:
            logger.info("rejected quality response for %s (attempt %d): %s", pair.pair_id, attempt + 1, exc)
            continue
        if cache is not None:
            cache.put(key, scores.to_dict())
        return scores
    raise UnparseableResponseError(f"pair {pair.pair_id}: no valid quality scores after {max_attempts} attempts", raw)


# ---------------------------------------------------------------------------
# per-pair evaluation and aggregation


@dataclass
class PairResult:
    pair_id: str
    gold: Label
    verdict: Verdict
    label_match: bool
    format_score: float
    format_case: str
    fidelity: EntityFidelityResult | None = None
    quality: QualityScores | None = None
    compression_ratio: float | None = None
    extractor_ok: bool = True

    @property
    def yes_yes(self) -> bool:
        return self.gold is Label.POSITIVE and self.verdict is Verdict.YES


def evaluate_pair(
    pair: QueryDocPair,
    gold: Label | str,
    model_output: str,
    *,
    extractor: ChatClient | None = None,
    judge: ChatClient | None = None,
    cache: JsonlCache | None = None,
    tokenizer: TokenCounter = count_tokens,
) -> PairResult:
    gold = Label.coerce(gold)
    out = parse_output(model_output)
    fs = format_score(out)
    res = PairResult(pair.pair_id, gold, out.verdict, label_match(out, gold), fs.value, fs.case)
    evidence = (out.evidence or "").strip()
    if out.verdict is Verdict.YES and evidence:
        n_doc = tokenizer(pair.document)
        if n_doc >= 1:
            res.compression_ratio = tokenizer(evidence) / n_doc
    if res.yes_yes and evidence:
        ext = extract_entities(evidence, extractor, cache)
        res.extractor_ok = ext.extractor_ok
        res.fidelity = entity_fidelity(evidence, pair.document, ext.entities, pair.pair_id)
        if judge is not None:
            res.quality = judge_quality(pair, out, judge, cache)
    return res


@dataclass
class EvalReport:
    n_pairs: int
    label_match: float
    format_score: float
    entity_fidelity: float | None
    dimensions: dict[str, float | None]
    compression: dict
    subsets: dict[str, int]
    n_fidelity: int = 0
    n_empty_entity_sets: int = 0
    n_judged: int = 0
    n_extractor_fallback: int = 0
    extra: dict = field(default_factory=dict)

    def table_row(self) -> dict[str, float | None]:
        """The nine headline columns: lbl, fmt, fid and the six judged dimensions."""
        row = {"lbl": self.label_match, "fmt": self.format_score, "fid": self.entity_fidelity}
        short = ("c-acc", "c-cov", "e-fth", "e-sc", "e-con", "lang")
        row.update({s: self.dimensions.get(d) for s, d in zip(short, DIMENSIONS)})
        return row

    def to_dict(self) -> dict:
        d = asdict(self)
        d["table_row"] = self.table_row()
        return d


def _mean(xs: Sequence[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def aggregate_report(results: Sequence[PairResult]) -> EvalReport:
    if not results:
        raise ValidationError("no evaluated pairs to aggregate")
    subsets = {
        "yes_yes": 0,
        "gold_yes_pred_no": 0,
        "gold_yes_pred_other": 0,
        "gold_no_pred_yes": 0,
        "no_no": 0,
        "gold_no_pred_other": 0,
    }
    for r in results:
        g = "yes" if r.gold is Label.POSITIVE else "no"
        if r.verdict is Verdict.OTHER:
            subsets[f"gold_{g}_pred_other"] += 1
        elif g == r.verdict.value:
            subsets[f"{g}_{g}"] += 1
        else:
            subsets[f"gold_{g}_pred_{r.verdict.value}"] += 1
    fid = [r.fidelity for r in results if r.fidelity is not None]
    judged = [r.quality for r in results if r.quality is not None]
    ratios = [r.compression_ratio for r in results if r.compression_ratio is not None]
    s = sorted(ratios)
    compression = {
        "n": len(s),
        "median": nearest_rank(s, 50) if s else None,
        "p10": nearest_rank(s, 10) if s else None,
        "p90": nearest_rank(s, 90) if s else None,
    }
    return EvalReport(
        n_pairs=len(results),
        label_match=_mean([float(r.label_match) for r in results]),
        format_score=_mean([r.format_score for r in results]),
        entity_fidelity=_mean([f.fidelity for f in fid]),
        dimensions={d: _mean([getattr(q, d) for q in judged]) for d in DIMENSIONS},
        compression=compression,
        subsets=subsets,
        n_fidelity=len(fid),
        n_empty_entity_sets=sum(f.empty for f in fid),
        n_judged=len(judged),
        n_extractor_fallback=sum(not r.extractor_ok for r in results),
    )


PER_PAIR_COLUMNS = (
    "pair_id", "gold", "verdict", "label_match", "format_score", "format_case",
    "entity_fidelity", "n_entities", "entities_not_found", "compression_ratio", *DIMENSIONS,
)


def per_pair_csv(results: Sequence[PairResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_PAIR_COLUMNS)
    for r in results:
        q = r.quality.to_dict() if r.quality else {}
        w.writerow([
            r.pair_id,
            r.gold.value,
            r.verdict.value,
            int(r.label_match),
            r.format_score,
            r.format_case,
            "" if r.fidelity is None else r.fidelity.fidelity,
            "" if r.fidelity is None else len(r.fidelity.entities),
            "" if r.fidelity is None else json.dumps(r.fidelity.not_found(), ensure_ascii=False),
            "" if r.compression_ratio is None else r.compression_ratio,
            *[q.get(d, "") for d in DIMENSIONS],
        ])
    return buf.getvalue()
