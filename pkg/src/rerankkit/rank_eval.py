"""TREC qrels/run I/O, NDCG@k, forced positive insertion, checkpoint-selection metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from rerankkit.errors import ValidationError

Qrels = dict[str, dict[str, int]]
RunList = dict[str, list[tuple[str, float]]]


def read_qrels(path) -> Qrels:
    """``query_id 0 doc_id rel`` per line, whitespace-delimited."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 columns in qrels, got {len(parts)}")
            qid, _, did, rel = parts
            try:
                grade = int(rel)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from None
            docs = qrels.setdefault(qid, {})
            if did in docs:
                raise ValidationError(f"{path}:{lineno}: duplicate qrels entry ({qid}, {did})")
            docs[did] = max(grade, 0)
    return qrels


def read_run(path) -> RunList:
    """``query_id Q0 doc_id rank score tag`` per line; order comes from the scores."""
    run: RunList = {}
    seen: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValidationError(f"{path}:{lineno}: expected 6 columns in run, got {len(parts)}")
            qid, _, did, _rank, score, _tag = parts
            try:
                s = float(score)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: score {score!r} is not a number") from None
            if did in seen.setdefault(qid, set()):
                raise ValidationError(f"{path}:{lineno}: duplicate doc {did} for query {qid}")
            seen[qid].add(did)
            run.setdefault(qid, []).append((did, s))
    return {qid: sort_ranking(docs) for qid, docs in run.items()}


def write_run(run: RunList, path, tag: str = "rerankkit") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in run.items():
            for rank, (did, s) in enumerate(sort_ranking(docs), 1):
                fh.write(f"{qid} Q0 {did} {rank} {s!r} {tag}\n")


def sort_ranking(docs: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score; ties broken by ascending doc_id."""
    return sorted(docs, key=lambda d: (-d[1], d[0]))


@dataclass
class NdcgResult:
    k: int
    per_query: dict[str, float]
    mean: float | None
    n_evaluated: int
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def dcg(gains: Sequence[int], k: int) -> float:
    return math.fsum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(gains[:k]))


def ndcg_at_k(qrels: Mapping[str, Mapping[str, int]], run: Mapping[str, Sequence], k: int = 10) -> NdcgResult:
    if k < 1:
        raise ValidationError("k must be >= 1")
    missing = sorted(q for q in run if q not in qrels)
    if missing:
        raise ValidationError(f"run queries absent from qrels: {', '.join(missing)}")
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for qid in run:
        rels = qrels[qid]
        ideal = dcg(sorted((g for g in rels.values() if g > 0), reverse=True), k)
        if ideal == 0:
            excluded.append(qid)
            continue
        ranked = sort_ranking(run[qid])
        per_query[qid] = dcg([rels.get(did, 0) for did, _ in ranked], k) / ideal
    mean = math.fsum(per_query.values()) / len(per_query) if per_query else None
    return NdcgResult(k, per_query, mean, len(per_query), excluded)


def force_insert_positives(run: Mapping[str, Sequence], qrels: Mapping[str, Mapping[str, int]], depth: int = 100) -> RunList:
    """Truncate each list to ``depth`` and append any missing relevant doc at the tail.

    Appended docs get scores strictly below the list minimum, in qrels order.
    """
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    out: RunList = {}
    for qid, docs in run.items():
        top = sort_ranking(docs)[:depth]
        present = {d for d, _ in top}
        floor = min((s for _, s in top), default=0.0)
        extra = [d for d, g in qrels.get(qid, {}).items() if g > 0 and d not in present]
        out[qid] = top + [(d, floor - (i + 1)) for i, d in enumerate(extra)]
    return out


@dataclass(frozen=True)
class CheckpointMetrics:
    pearson_teacher: float | None
    pearson_label: float | None
    auc: float | None
    accuracy_at_half: float

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0:
        return None
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


def auc_pairwise(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Fraction of (positive, negative) pairs ordered correctly; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels).astype(bool)
    pos, neg = s[lab], s[~lab]
    if len(pos) == 0 or len(neg) == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (len(pos) * len(neg)))


def checkpoint_metrics(scores: Sequence[float], teacher: Sequence[float], labels: Sequence[int]) -> CheckpointMetrics:
    if not (len(scores) == len(teacher) == len(labels)):
        raise ValidationError("scores, teacher and labels must have equal length")
    if len(scores) < 2:
        raise ValidationError("need at least two examples")
    labels = [int(bool(v)) for v in labels]
    acc = sum((s >= 0.5) == bool(l) for s, l in zip(scores, labels)) / len(scores)
    return CheckpointMetrics(
        pearson_teacher=pearson(scores, teacher),
        pearson_label=pearson(scores, labels),
        auc=auc_pairwise(scores, labels),
        accuracy_at_half=acc,
    )
