"""Training-pair acquisition: teacher scores, web documents, keyword rewrites, SFT targets."""

from __future__ import annotations

import json
import logging
import random
import re
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from rerankkit.errors import TransportError, UnparseableResponseError, ValidationError
from rerankkit.judges import EnsembleLabel
from rerankkit.protocol import (
    NEGATIVE_TARGET,
    Label,
    QueryDocPair,
    Source,
    Verdict,
    field_well_formed,
    parse_output,
    serialize_target,
)
from rerankkit.scorer import TeacherScore, TeacherSource
from rerankkit.transport import (
    ChatClient,
    JsonlCache,
    RetryPolicy,
    Transport,
    content_hash,
    post_with_retries,
    resolve_api_key,
)

logger = logging.getLogger(__name__)

DEFAULT_REWRITE_RATE = 0.30


@dataclass(frozen=True)
class ScoredPair:
    pair: QueryDocPair
    teacher: TeacherScore
    ensemble: EnsembleLabel | None = None


@dataclass(frozen=True)
class TrainingSample:
    pair: QueryDocPair
    teacher: TeacherScore
    label: Label
    sft_target: str

    def __post_init__(self) -> None:
        check_target(self.label, self.sft_target, self.pair.pair_id)


def check_target(label: Label, sft_target: str, pair_id: str = "?") -> None:
    """Enforce the label/target coupling: negatives say ``no``, positives carry both fields."""
    if label is Label.NEGATIVE:
        if sft_target != NEGATIVE_TARGET:
            raise ValidationError(f"pair {pair_id}: negative sample target must be exactly 'no'")
        return
    out = parse_output(sft_target)
    if out.verdict is not Verdict.YES or out.contribution is None or out.evidence is None:
        raise ValidationError(f"pair {pair_id}: positive target must parse to yes with both fields")


# ---------------------------------------------------------------------------
# teacher scoring


def _auth_headers(env_var: str | None, header: str, scheme: str | None) -> dict:
    headers = {"Content-Type": "application/json"}
    key = resolve_api_key(env_var)
    if key:
        headers[header] = f"{scheme} {key}" if scheme else key
    return headers


@dataclass(frozen=True)
class RerankEndpoint:
    """A generic rerank API: request/response field names are configuration."""

    url: str
    model: str | None = None
    api_key_env_var: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str | None = "Bearer"
    query_field: str = "query"
    documents_field: str = "documents"
    model_field: str = "model"
    results_field: str = "results"
    score_field: str = "relevance_score"
    index_field: str = "index"
    extra_body: Mapping = field(default_factory=dict)
    timeout_ms: int = 30_000
    max_attempts: int = 4
    initial_backoff_s: float = 1.0

    def request_body(self, query: str, document: str) -> dict:
        body = dict(self.extra_body)
        body[self.query_field] = query
        body[self.documents_field] = [document]
        if self.model:
            body[self.model_field] = self.model
        return body

    def extract_score(self, response: dict) -> float:
        try:
            results = response[self.results_field]
            hit = next((r for r in results if r.get(self.index_field, 0) == 0), results[0])
            return float(hit[self.score_field])
        except (KeyError, IndexError, TypeError, ValueError):
            raise TransportError(
                f"rerank response lacks {self.results_field}[].{self.score_field}", status=502
            ) from None


def load_cached_scores(path) -> dict[str, float]:
    """Read a released score file: JSONL ``{"pair_id", "teacher_score"}``."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            y = rec.get("teacher_score", rec.get("score"))
            if y is None or "pair_id" not in rec:
                raise ValidationError(f"{path}:{lineno}: need pair_id and teacher_score")
            scores[str(rec["pair_id"])] = float(y)
    return scores


class TeacherScorer:
    """Scores pairs from a cached-score file first, then the response cache, then the API."""

    def __init__(
        self,
        endpoint: RerankEndpoint | None,
        transport: Transport | None = None,
        cache: JsonlCache | None = None,
        cached_scores: Mapping[str, float] | None = None,
        *,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if endpoint is None and cached_scores is None:
            raise ValidationError("teacher scoring needs an endpoint or a cached-score file")
        self.endpoint = endpoint
        self.transport = transport
        self.cache = cache if cache is not None else JsonlCache()
        self.cached_scores = dict(cached_scores or {})
        self.sleep = sleep

    def cache_key(self, pair: QueryDocPair) -> str:
        ep = self.endpoint
        return content_hash("teacher", ep.url if ep else None, ep.model if ep else None, pair.query, pair.document)

    def score(self, pair: QueryDocPair) -> TeacherScore:
        if pair.pair_id in self.cached_scores:
            return TeacherScore(self.cached_scores[pair.pair_id], TeacherSource.CACHED_FILE)
        key = self.cache_key(pair)
        hit = self.cache.get(key)
        if hit is not None:
            return TeacherScore(hit["y"], TeacherSource(hit["source"]))
        if self.endpoint is None or self.transport is None:
            raise ValidationError(f"pair {pair.pair_id}: no cached score and no teacher endpoint")
        ep = self.endpoint
        try:
            resp = post_with_retries(
                self.transport,
                ep.url,
                ep.request_body(pair.query, pair.document),
                _auth_headers(ep.api_key_env_var, ep.auth_header, ep.auth_scheme),
                ep.timeout_ms / 1000.0,
                RetryPolicy(ep.max_attempts, ep.initial_backoff_s),
                self.sleep,
            )
            y = ep.extract_score(resp)
        except TransportError as exc:
            raise TransportError(
                f"teacher scoring failed for pair {pair.pair_id}: {exc}",
                status=exc.status,
                context={**exc.context, "pair_id": pair.pair_id},
            ) from exc
        if not 0.0 <= y <= 1.0:
            raise ValidationError(f"pair {pair.pair_id}: teacher score {y} outside [0, 1]")
        self.cache.put(key, {"y": y, "source": TeacherSource.COMMERCIAL_API.value})
        return TeacherScore(y, TeacherSource.COMMERCIAL_API)


def score_with_teacher(pairs: Iterable[QueryDocPair], scorer: TeacherScorer) -> Iterator[ScoredPair]:
    for pair in pairs:
        yield ScoredPair(pair, scorer.score(pair))


# ---------------------------------------------------------------------------
# web search


@dataclass(frozen=True)
class SearchProvider:
    """Field mapping for a web-search API that returns page contents."""

    name: str
    url: str
    api_key_env_var: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str | None = "Bearer"
    query_field: str = "query"
    top_k_field: str = "max_results"
    extra_body: Mapping = field(default_factory=dict)
    results_field: str = "results"
    content_fields: tuple[str, ...] = ("content",)
    url_field: str = "url"
    title_field: str = "title"
    timeout_ms: int = 30_000
    max_attempts: int = 4
    initial_backoff_s: float = 1.0


PROVIDER_PRESETS: dict[str, dict] = {
    "tavily": dict(
        url="https://api.tavily.com/search",
        api_key_env_var="TAVILY_API_KEY",
        top_k_field="max_results",
        extra_body={"include_raw_content": True},
        content_fields=("raw_content", "content"),
    ),
    "exa": dict(
        url="https://api.exa.ai/search",
        api_key_env_var="EXA_API_KEY",
        auth_header="x-api-key",
        auth_scheme=None,
        top_k_field="numResults",
        extra_body={"contents": {"text": True}},
        content_fields=("text",),
    ),
}


def provider_from_preset(name: str, **overrides) -> SearchProvider:
    try:
        base = PROVIDER_PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown search provider preset {name!r}") from None
    return SearchProvider(name=name, **{**base, **overrides})


def search_web(
    query: str,
    provider: SearchProvider,
    top_k: int,
    transport: Transport,
    *,
    language: str = "unknown",
    cache: JsonlCache | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[QueryDocPair]:
    if top_k < 1:
        raise ValidationError("top_k must be >= 1")
    if not query.strip():
        raise ValidationError("query must be non-empty")
    body = dict(provider.extra_body)
    body[provider.query_field] = query
    body[provider.top_k_field] = top_k
    key = content_hash("search", provider.url, body)
    resp = cache.get(key) if cache is not None else None
    if resp is None:
        try:
            resp = post_with_retries(
                transport,
                provider.url,
                body,
                _auth_headers(provider.api_key_env_var, provider.auth_header, provider.auth_scheme),
                provider.timeout_ms / 1000.0,
                RetryPolicy(provider.max_attempts, provider.initial_backoff_s),
                sleep,
            )
        except TransportError as exc:
            raise TransportError(
                f"search via {provider.name} failed for query {query!r}: {exc}",
                status=exc.status,
                context={**exc.context, "query": query},
            ) from exc
        if cache is not None:
            cache.put(key, resp)

    pairs: list[QueryDocPair] = []
    seen: set[str] = set()
    for hit in resp.get(provider.results_field) or []:
        url = hit.get(provider.url_field)
        if not url or url in seen:
            continue
        content = next((hit[f] for f in provider.content_fields if hit.get(f) and str(hit[f]).strip()), None)
        if content is None:
            continue
        seen.add(url)
        pairs.append(
            QueryDocPair(
                pair_id="web-" + content_hash(query, url)[:16],
                query=query,
                document=str(content),
                language=language,
                source=Source.WEB_SEARCH,
                metadata={"url": url, "title": hit.get(provider.title_field), "provider": provider.name},
            )
        )
        if len(pairs) == top_k:
            break
    return pairs


# ---------------------------------------------------------------------------
# keyword rewriting

# Non-canonical default prompt.
REWRITE_PROMPT = """Rewrite the search query below into the short keyword form an automated agent would send to a search engine.
Rules: keep the key entities and constraints, drop question words and filler, keep the query's language, use 2-8 words, no punctuation or quotes.
Output only the rewritten query.

Query: {query}"""


def _clean_rewrite(text: str) -> str:
    for line in text.splitlines():
        line = line.strip().strip("`\"'“”‘’").strip()
        if line:
            return line
    return ""


def rewrite_keyword(
    query: str,
    rewriter: ChatClient,
    cache: JsonlCache | None = None,
    prompt: str = REWRITE_PROMPT,
) -> str:
    if not query.strip():
        raise ValidationError("query must be non-empty")
    key = content_hash("rewrite", rewriter.endpoint.model_name, prompt, query)
    if cache is not None and key in cache:
        return cache.get(key)
    raw = rewriter.complete([{"role": "user", "content": prompt.replace("{query}", query)}])
    rewrite = _clean_rewrite(raw)
    if not rewrite:
        raise UnparseableResponseError(f"empty keyword rewrite for query {query!r}", raw)
    if cache is not None:
        cache.put(key, rewrite)
    return rewrite


def select_for_rewrite(queries: Sequence[str], rate: float = DEFAULT_REWRITE_RATE, seed: int = 0) -> set[str]:
    """Seeded choice of exactly ``round(rate * n)`` distinct queries to rewrite."""
    if not 0.0 <= rate <= 1.0:
        raise ValidationError("rewrite rate must lie in [0, 1]")
    distinct = sorted(set(queries))
    n = round(rate * len(distinct))
    return set(random.Random(seed).sample(distinct, n))


def rewrite_pairs(
    pairs: Sequence[QueryDocPair],
    rewriter: ChatClient,
    rate: float = DEFAULT_REWRITE_RATE,
    seed: int = 0,
    cache: JsonlCache | None = None,
) -> list[QueryDocPair]:
    """Extra pairs reusing the same documents under keyword-style queries."""
    chosen = select_for_rewrite([p.query for p in pairs], rate, seed)
    out = []
    for p in pairs:
        if p.query not in chosen:
            continue
        kw = rewrite_keyword(p.query, rewriter, cache)
        out.append(
            QueryDocPair(
                pair_id=f"{p.pair_id}#kw",
                query=kw,
                document=p.document,
                language=p.language,
                source=Source.KEYWORD_REWRITE,
                doc_token_count=p.doc_token_count,
                metadata={**p.metadata, "original_query": p.query},
            )
        )
    return out


def sample_by_dataset(
    records: Sequence[dict], per_dataset_cap: int | None, seed: int = 0, key: str = "dataset"
) -> list[dict]:
    """Uniform per-dataset sampling: at most ``per_dataset_cap`` records from each dataset.

    The dataset name is read from ``record[key]`` or ``record["metadata"][key]``.
    Input order is preserved among the kept records.
    """
    if per_dataset_cap is None:
        return list(records)
    if per_dataset_cap < 1:
        raise ValidationError("per_dataset_cap must be >= 1")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        name = rec.get(key) or (rec.get("metadata") or {}).get(key) or "unknown"
        groups[str(name)].append(i)
    keep: set[int] = set()
    for name in sorted(groups):
        idx = groups[name]
        if len(idx) <= per_dataset_cap:
            keep.update(idx)
        else:
            keep.update(random.Random(f"{seed}:{name}").sample(idx, per_dataset_cap))
    return [records[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# contribution / evidence targets

# Non-canonical default prompt.
CE_PROMPT = """You write supervision targets for a reranker that explains its relevance decisions.
The Document below has been judged relevant to the Query. Produce exactly two XML blocks and nothing else:

<contribution>One sentence stating what the document contributes to answering the query. Describe the document, do not answer the query yourself.</contribution>
<evidence>A self-contained rewrite of every query-relevant fact in the document. Copy numbers, names, dates and hedges verbatim, resolve pronouns, drop boilerplate and unrelated background, and add nothing that is not in the document. Write in the document's language.</evidence>

Example
Query: what temperature does water boil at on mount everest
Document: Home | Weather | Contact. At the summit of Mount Everest (8,849 m) the air pressure is roughly a third of sea level, so water boils at about 70 °C. Subscribe to our newsletter!
<contribution>Gives the approximate boiling point of water at the Everest summit and the reason it is lower than at sea level.</contribution>
<evidence>At the summit of Mount Everest (8,849 m) the air pressure is roughly a third of sea-level pressure, so water boils at about 70 °C.</evidence>

Query: {query}
Document: {document}"""


def parse_ce_response(text: str) -> tuple[str, str] | None:
    """Pull a well-formed (contribution, evidence) pair out of a generator response."""
    probe = text.strip()
    if not probe.lower().startswith("yes"):
        probe = "yes\n" + probe
    out = parse_output(probe)
    if field_well_formed(out.contribution) and field_well_formed(out.evidence):
        return out.contribution.strip(), out.evidence.strip()
    return None


def generate_ce_targets(
    pair: ScoredPair,
    generator: ChatClient,
    cache: JsonlCache | None = None,
    *,
    max_attempts: int = 3,
    prompt: str = CE_PROMPT,
) -> TrainingSample:
    if pair.ensemble is None or pair.ensemble.label is not Label.POSITIVE:
        raise ValidationError(f"pair {pair.pair.pair_id}: CE targets are generated for positives only")
    q, d = pair.pair.query, pair.pair.document
    key = content_hash("ce", generator.endpoint.model_name, prompt, q, d)
    if cache is not None and key in cache:
        return TrainingSample(pair.pair, pair.teacher, Label.POSITIVE, cache.get(key))
    message = prompt.replace("{query}", q).replace("{document}", d)
    raw = ""
    for attempt in range(max_attempts):
        raw = generator.complete([{"role": "user", "content": message}])
        fields = parse_ce_response(raw)
        if fields is not None:
            target = serialize_target(*fields)
            if cache is not None:
                cache.put(key, target)
            return TrainingSample(pair.pair, pair.teacher, Label.POSITIVE, target)
        logger.info("malformed CE generation for %s (attempt %d)", pair.pair.pair_id, attempt + 1)
    raise UnparseableResponseError(
        f"pair {pair.pair.pair_id}: generator did not produce both fields in {max_attempts} attempts", raw
    )


def assemble_sample(pair: ScoredPair, ce_target: str | None = None) -> TrainingSample:
    if pair.ensemble is None:
        raise ValidationError(f"pair {pair.pair.pair_id}: missing ensemble label")
    if pair.ensemble.label is Label.NEGATIVE:
        return TrainingSample(pair.pair, pair.teacher, Label.NEGATIVE, NEGATIVE_TARGET)
    if ce_target is None:
        raise ValidationError(f"pair {pair.pair.pair_id}: positive pair has no generated target")
    return TrainingSample(pair.pair, pair.teacher, Label.POSITIVE, ce_target)


def validate_samples(samples: Iterable[TrainingSample | dict]) -> list[str]:
    """Corpus-wide coupling check; returns one message per violating record."""
    problems = []
    for s in samples:
        if isinstance(s, dict):
            pid = s.get("pair_id", "?")
            try:
                check_target(Label.coerce(s.get("label")), s.get("sft_target", ""), pid)
            except ValidationError as exc:
                problems.append(str(exc))
        else:
            try:
                check_target(s.label, s.sft_target, s.pair.pair_id)
            except ValidationError as exc:
                problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# record (de)serialization for the stage files


def scored_to_record(sp: ScoredPair) -> dict:
    rec = sp.pair.to_record()
    rec["teacher_score"] = sp.teacher.y
    rec["teacher_source"] = sp.teacher.source.value
    if sp.ensemble is not None:
        rec["votes"] = sp.ensemble.votes
        rec["yes_count"] = sp.ensemble.yes_count
        rec["label"] = sp.ensemble.label.value
    return rec


def scored_from_record(rec: dict) -> ScoredPair:
    pair = QueryDocPair.from_record(rec)
    if "teacher_score" not in rec:
        raise ValidationError(f"pair {pair.pair_id}: record has no teacher_score")
    teacher = TeacherScore(float(rec["teacher_score"]), rec.get("teacher_source") or TeacherSource.COMMERCIAL_API)
    ensemble = None
    if "label" in rec:
        votes = dict(rec.get("votes") or {})
        ensemble = EnsembleLabel(
            pair_id=pair.pair_id,
            votes=votes,
            yes_count=int(rec.get("yes_count", sum(v == "yes" for v in votes.values()))),
            label=Label.coerce(rec["label"]),
        )
    return ScoredPair(pair, teacher, ensemble)


def sample_to_record(s: TrainingSample, base: ScoredPair | None = None) -> dict:
    rec = scored_to_record(base) if base is not None else {**s.pair.to_record(), "teacher_score": s.teacher.y}
    rec["label"] = s.label.value
    rec["sft_target"] = s.sft_target
    return rec
