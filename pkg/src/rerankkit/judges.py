"""LLM-judge panel: binary relevance votes, majority labels, Cohen's kappa, panel selection."""

from __future__ import annotations

import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

from rerankkit.errors import UnparseableResponseError, ValidationError
from rerankkit.protocol import Label, QueryDocPair
from rerankkit.transport import ChatClient, ChatEndpoint, JsonlCache, Transport, content_hash

# Non-canonical: written from the panel description, not a published rubric.
DEFAULT_RUBRIC = """You are a strict relevance assessor for a search engine.
Decide whether the Document is relevant to the Query.

A document is relevant ("yes") when it contains information that directly
answers the query, or a substantial part of the answer, or facts a reader
would need to answer it. Topical overlap alone is not enough.
A document is not relevant ("no") when it only mentions query terms, covers a
different intent, is navigation/boilerplate, or would not help answer the query.

Judge the document as given; do not use outside knowledge to fill gaps.
Reply with exactly one word: yes or no."""


@dataclass(frozen=True)
class JudgeSpec:
    judge_id: str
    endpoint_url: str
    model_name: str
    api_key_env_var: str | None = None
    max_concurrent: int = 4
    timeout_ms: int = 60_000
    max_attempts: int = 4
    initial_backoff_s: float = 1.0

    def __post_init__(self) -> None:
        if not self.judge_id:
            raise ValidationError("judge_id must be non-empty")
        if self.max_concurrent < 1:
            raise ValidationError("max_concurrent must be >= 1")
        if self.timeout_ms < 1:
            raise ValidationError("timeout_ms must be positive")

    def endpoint(self) -> ChatEndpoint:
        return ChatEndpoint(
            endpoint_url=self.endpoint_url,
            model_name=self.model_name,
            api_key_env_var=self.api_key_env_var,
            max_concurrent=self.max_concurrent,
            timeout_ms=self.timeout_ms,
            temperature=0.0,
            max_attempts=self.max_attempts,
            initial_backoff_s=self.initial_backoff_s,
        )


@dataclass(frozen=True)
class JudgeVote:
    pair_id: str
    judge_id: str
    verdict: str  # "yes" | "no"
    raw_response: str
    cached: bool = False


@dataclass(frozen=True)
class EnsembleLabel:
    pair_id: str
    votes: dict[str, str]
    yes_count: int
    label: Label
    threshold: int = 3


@dataclass(frozen=True)
class KappaMatrix:
    judge_ids: list[str]
    kappa: list[list[float]]
    n_shared: int

    def mean_off_diagonal(self, ids: Sequence[str] | None = None) -> dict[str, float]:
        ids = list(ids) if ids is not None else self.judge_ids
        idx = {j: i for i, j in enumerate(self.judge_ids)}
        out = {}
        for j in ids:
            others = [self.kappa[idx[j]][idx[o]] for o in ids if o != j]
            out[j] = sum(others) / len(others) if others else 0.0
        return out

    def max_off_diagonal(self) -> float:
        n = len(self.judge_ids)
        return max(self.kappa[i][j] for i in range(n) for j in range(n) if i != j)

    def to_dict(self) -> dict:
        return {"judge_ids": self.judge_ids, "kappa": self.kappa, "n_shared": self.n_shared}


_PUNCT = re.compile(r"[^\w\s]")


def parse_judge_verdict(text: str) -> str | None:
    """Leading ``yes``/``no`` token, else the last token of the final non-empty line.

    Case and punctuation are ignored, so ``"Yes."`` and ``"Answer: no"`` both parse.
    Returns ``None`` when neither position holds a verdict.
    """
    lines = [ln.split() for ln in _PUNCT.sub(" ", text.lower()).splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        return None
    if lines[0][0] in ("yes", "no"):
        return lines[0][0]
    if lines[-1][-1] in ("yes", "no"):
        return lines[-1][-1]
    return None


def judge_messages(pair: QueryDocPair, rubric: str) -> list[dict]:
    return [
        {"role": "system", "content": rubric},
        {"role": "user", "content": f"Query: {pair.query}\n\nDocument: {pair.document}\n\nRelevant (yes/no)?"},
    ]


def vote_cache_key(judge_id: str, rubric: str, query: str, document: str) -> str:
    return content_hash("judge", judge_id, rubric, query, document)


class Judge:
    """One panel member: a spec plus its own bounded, retried client."""

    def __init__(
        self,
        spec: JudgeSpec,
        transport: Transport,
        cache: JsonlCache | None = None,
        *,
        parse_attempts: int = 2,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.spec = spec
        self.client = ChatClient(spec.endpoint(), transport, sleep=sleep)
        self.cache = cache if cache is not None else JsonlCache()
        self.parse_attempts = parse_attempts

    @property
    def judge_id(self) -> str:
        return self.spec.judge_id

    def vote(self, pair: QueryDocPair, rubric: str = DEFAULT_RUBRIC) -> JudgeVote:
        if not rubric.strip():
            raise ValidationError("rubric must be non-empty")
        key = vote_cache_key(self.judge_id, rubric, pair.query, pair.document)
        hit = self.cache.get(key)
        if hit is not None:
            return JudgeVote(pair.pair_id, self.judge_id, hit["verdict"], hit["raw"], cached=True)
        raw = ""
        for _ in range(self.parse_attempts):
            raw = self.client.complete(judge_messages(pair, rubric))
            verdict = parse_judge_verdict(raw)
            if verdict is not None:
                self.cache.put(key, {"verdict": verdict, "raw": raw})
                return JudgeVote(pair.pair_id, self.judge_id, verdict, raw, cached=False)
        raise UnparseableResponseError(
            f"judge {self.judge_id} gave no yes/no verdict for pair {pair.pair_id}", raw
        )


def judge_pair(
    pair: QueryDocPair,
    judge: JudgeSpec | Judge,
    rubric: str = DEFAULT_RUBRIC,
    *,
    transport: Transport | None = None,
    cache: JsonlCache | None = None,
) -> JudgeVote:
    if isinstance(judge, JudgeSpec):
        if transport is None:
            raise ValidationError("a transport is required when passing a bare JudgeSpec")
        judge = Judge(judge, transport, cache)
    return judge.vote(pair, rubric)


def default_threshold(n: int) -> int:
    return math.ceil((n + 1) / 2)


def majority_vote(
    votes: Sequence[JudgeVote], threshold: int | None = None, *, pair_id: str | None = None
) -> EnsembleLabel:
    if not votes and pair_id is None:
        raise ValidationError("majority_vote needs at least one vote or an explicit pair_id")
    by_judge: dict[str, str] = {}
    for v in votes:
        if v.judge_id in by_judge:
            raise ValidationError(f"duplicate vote from judge {v.judge_id!r}")
        if v.verdict not in ("yes", "no"):
            raise ValidationError(f"vote verdict must be yes/no, got {v.verdict!r}")
        by_judge[v.judge_id] = v.verdict
    pids = {v.pair_id for v in votes}
    if len(pids) > 1:
        raise ValidationError(f"votes span several pairs: {sorted(pids)}")
    pid = pair_id if pair_id is not None else pids.pop()
    if threshold is None:
        threshold = default_threshold(len(votes))
    yes = sum(1 for v in by_judge.values() if v == "yes")
    label = Label.POSITIVE if yes >= threshold else Label.NEGATIVE
    return EnsembleLabel(pid, dict(sorted(by_judge.items())), yes, label, threshold)


def annotate_pair(
    pair: QueryDocPair,
    panel: Sequence[Judge],
    rubric: str = DEFAULT_RUBRIC,
    *,
    threshold: int | None = None,
    short_circuit: bool = False,
) -> EnsembleLabel:
    """Collect panel votes for one pair. ``short_circuit`` stops once the label is decided."""
    ids = [j.judge_id for j in panel]
    if len(set(ids)) != len(ids):
        raise ValidationError("judge_id values must be unique within a panel")
    threshold = threshold if threshold is not None else default_threshold(len(panel))
    votes: list[JudgeVote] = []
    yes = no = 0
    for judge in panel:
        vote = judge.vote(pair, rubric)
        votes.append(vote)
        yes += vote.verdict == "yes"
        no += vote.verdict == "no"
        if short_circuit and (yes >= threshold or no > len(panel) - threshold):
            break
    return majority_vote(votes, threshold, pair_id=pair.pair_id)


def annotate_pairs(
    pairs: Sequence[QueryDocPair],
    panel: Sequence[Judge],
    rubric: str = DEFAULT_RUBRIC,
    *,
    threshold: int | None = None,
    short_circuit: bool = False,
    max_workers: int | None = None,
) -> list[EnsembleLabel | Exception]:
    """Label many pairs concurrently; per-pair failures come back in place of the label."""

    def one(p: QueryDocPair) -> EnsembleLabel | Exception:
        try:
            return annotate_pair(p, panel, rubric, threshold=threshold, short_circuit=short_circuit)
        except Exception as exc:  # surfaced as a per-record error by the caller
            return exc

    workers = max_workers or max(1, sum(j.spec.max_concurrent for j in panel))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pairs))


def _as_binary(xs: Iterable) -> list[int]:
    out = []
    for x in xs:
        if isinstance(x, str):
            x = Label.coerce(x) is Label.POSITIVE
        if x not in (0, 1, True, False):
            raise ValidationError(f"kappa inputs must be binary, got {x!r}")
        out.append(int(x))
    return out


def cohen_kappa(a: Sequence, b: Sequence) -> float:
    """Cohen's kappa for two binary raters, computed in exact rationals.

    When both raters are constant (chance agreement 1) the result is 1.0 if the
    sequences are identical and 0.0 otherwise.
    """
    a, b = _as_binary(a), _as_binary(b)
    if len(a) != len(b):
        raise ValidationError(f"rater sequences differ in length ({len(a)} vs {len(b)})")
    if not a:
        raise ValidationError("rater sequences must be non-empty")
    n = len(a)
    p_o = Fraction(sum(x == y for x, y in zip(a, b)), n)
    pa, pb = Fraction(sum(a), n), Fraction(sum(b), n)
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1:
        return 1.0 if a == b else 0.0
    return float((p_o - p_e) / (1 - p_e))


def pairwise_kappa_matrix(votes_by_judge: Mapping[str, Sequence]) -> KappaMatrix:
    ids = list(votes_by_judge)
    if len(ids) < 2:
        raise ValidationError("need at least two judges")
    lengths = {len(votes_by_judge[j]) for j in ids}
    if len(lengths) != 1:
        raise ValidationError(f"vote lists are misaligned (lengths {sorted(lengths)})")
    n = len(ids)
    k = [[1.0] * n for _ in range(n)]
    for i, j in combinations(range(n), 2):
        k[i][j] = k[j][i] = cohen_kappa(votes_by_judge[ids[i]], votes_by_judge[ids[j]])
    return KappaMatrix(ids, k, lengths.pop())


def select_panel(matrix: KappaMatrix, k: int) -> list[str]:
    """Drop the most redundant judge (highest mean kappa to the rest) until ``k`` remain.

    Ties go to the lexicographically smallest judge_id. The survivors are
    returned by ascending mean off-diagonal kappa within the final panel.
    """
    if k < 2:
        raise ValidationError("panel size k must be >= 2")
    if k > len(matrix.judge_ids):
        raise ValidationError(f"k={k} exceeds pool size {len(matrix.judge_ids)}")
    remaining = list(matrix.judge_ids)
    while len(remaining) > k:
        means = matrix.mean_off_diagonal(remaining)
        worst = min(remaining, key=lambda j: (-means[j], j))
        remaining.remove(worst)
    means = matrix.mean_off_diagonal(remaining)
    return sorted(remaining, key=lambda j: (means[j], j))


@dataclass
class PanelReport:
    matrix: KappaMatrix
    selected: list[str]
    mean_kappa: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            **self.matrix.to_dict(),
            "max_off_diagonal": self.matrix.max_off_diagonal(),
            "mean_off_diagonal": self.mean_kappa,
            "selected": self.selected,
            "dropped": [j for j in self.matrix.judge_ids if j not in self.selected],
        }


def panel_report(votes_by_judge: Mapping[str, Sequence], k: int) -> PanelReport:
    matrix = pairwise_kappa_matrix(votes_by_judge)
    return PanelReport(matrix, select_panel(matrix, k), matrix.mean_off_diagonal())
