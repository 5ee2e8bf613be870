"""Score x length grid statistics, entropy-targeted under-sampling, and query-level splits."""

from __future__ import annotations

import bisect
import csv
import io
import math
import random
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import numpy as np

from rerankkit.errors import ValidationError

N_SCORE_BINS = 6
SCORE_EDGES = tuple(i / N_SCORE_BINS for i in range(N_SCORE_BINS + 1))
LENGTH_EDGES = (0, 64, 128, 256, 512, 1024, 2048, 4096, math.inf)
N_LENGTH_BINS = len(LENGTH_EDGES) - 1
N_CELLS = N_SCORE_BINS * N_LENGTH_BINS


def length_bin_labels() -> list[str]:
    return [
        f"[{lo},{'inf' if math.isinf(hi) else hi})" for lo, hi in zip(LENGTH_EDGES, LENGTH_EDGES[1:])
    ]


@dataclass
class CellHistogram:
    counts: np.ndarray  # shape (6, 8), int

    score_edges: tuple = SCORE_EDGES
    length_edges: tuple = LENGTH_EDGES

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_SCORE_BINS, N_LENGTH_BINS):
            raise ValidationError(f"histogram must be {N_SCORE_BINS}x{N_LENGTH_BINS}")
        if (self.counts < 0).any():
            raise ValidationError("histogram counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_cells(cls, cells: Sequence[tuple[int, int]]) -> "CellHistogram":
        counts = np.zeros((N_SCORE_BINS, N_LENGTH_BINS), dtype=np.int64)
        for r, c in cells:
            counts[r, c] += 1
        return cls(counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["score_bin"] + length_bin_labels())
        for r in range(N_SCORE_BINS):
            lo, hi = SCORE_EDGES[r], SCORE_EDGES[r + 1]
            close = "]" if r == N_SCORE_BINS - 1 else ")"
            w.writerow([f"[{lo:.4f},{hi:.4f}{close}"] + [int(x) for x in self.counts[r]])
        return buf.getvalue()


@dataclass(frozen=True)
class BalanceReport:
    h_norm_before: float
    h_norm_after: float
    cv_before: float
    cv_after: float
    retained_fraction: float
    cap: int
    n_before: int
    n_after: int
    target_h: float

    def to_dict(self) -> dict:
        return asdict(self)


def bin_pair(score: float, length: int) -> tuple[int, int]:
    if not (isinstance(score, (int, float)) and 0.0 <= score <= 1.0):
        raise ValidationError(f"score must lie in [0, 1], got {score!r}")
    if length < 0:
        raise ValidationError(f"length must be non-negative, got {length!r}")
    row = min(math.floor(N_SCORE_BINS * score), N_SCORE_BINS - 1)
    col = bisect.bisect_right(LENGTH_EDGES, length) - 1
    return row, min(col, N_LENGTH_BINS - 1)


def _entropy_of_counts(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64).ravel()
    total = counts.sum()
    if total <= 0:
        raise ValidationError("histogram is empty")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(N_CELLS))


def normalized_entropy(hist: CellHistogram | np.ndarray) -> float:
    counts = hist.counts if isinstance(hist, CellHistogram) else hist
    return _entropy_of_counts(counts)


def coefficient_of_variation(hist: CellHistogram | np.ndarray) -> float:
    counts = np.asarray(hist.counts if isinstance(hist, CellHistogram) else hist, dtype=np.float64).ravel()
    mean = counts.mean()
    return float(counts.std() / mean) if mean > 0 else 0.0


class BalanceUnreachable(ValidationError):
    def __init__(self, target_h: float, best_h: float):
        super().__init__(f"target H_norm {target_h} unreachable; best achievable is {best_h:.6f} at cap 1")
        self.target_h = target_h
        self.best_h = best_h


def capped_entropy(counts: np.ndarray, cap: int) -> float:
    return _entropy_of_counts(np.minimum(counts, cap))


def find_cap(counts: np.ndarray, target_h: float) -> int:
    """Largest integer cap whose capped histogram reaches ``target_h``.

    Relies on capped entropy being non-increasing in the cap, which holds
    because lowering the cap only ever flattens the largest cells.
    """
    hi = int(counts.max())
    if capped_entropy(counts, hi) >= target_h:
        return hi
    if capped_entropy(counts, 1) < target_h:
        raise BalanceUnreachable(target_h, capped_entropy(counts, 1))
    lo = 1  # invariant: lo reaches the target, hi does not
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if capped_entropy(counts, mid) >= target_h:
            lo = mid
        else:
            hi = mid
    return lo


def balance(
    samples: Sequence[tuple[float, int]], target_h: float = 0.99, seed: int = 0
) -> tuple[list[int], BalanceReport]:
    """Cap every grid cell at one global cap, sampling survivors at random within a cell.

    ``samples`` are ``(teacher_score, doc_token_count)`` pairs. Returns the
    sorted retained indices and a before/after report. Each cell draws from
    its own generator seeded by ``(seed, row, col)``, so the result does not
    depend on iteration order.
    """
    if not 0.0 < target_h <= 1.0:
        raise ValidationError(f"target_h must lie in (0, 1], got {target_h}")
    if len(samples) == 0:
        raise ValidationError("no samples to balance")
    by_cell: dict[tuple[int, int], list[int]] = {}
    for i, (score, length) in enumerate(samples):
        by_cell.setdefault(bin_pair(score, length), []).append(i)
    before = CellHistogram.from_cells([cell for cell, idx in by_cell.items() for _ in idx])
    cap = find_cap(before.counts, target_h)

    retained: list[int] = []
    for (r, c), idx in sorted(by_cell.items()):
        if len(idx) <= cap:
            retained.extend(idx)
        else:
            rng = np.random.default_rng([seed, r, c])
            retained.extend(int(x) for x in rng.choice(idx, size=cap, replace=False))
    retained.sort()
    after_counts = np.minimum(before.counts, cap)
    report = BalanceReport(
        h_norm_before=normalized_entropy(before),
        h_norm_after=normalized_entropy(after_counts),
        cv_before=coefficient_of_variation(before),
        cv_after=coefficient_of_variation(after_counts),
        retained_fraction=len(retained) / len(samples),
        cap=cap,
        n_before=len(samples),
        n_after=len(retained),
        target_h=target_h,
    )
    return retained, report


def query_of(sample: Any) -> str:
    if isinstance(sample, dict):
        return sample["query"]
    pair = getattr(sample, "pair", sample)
    return pair.query


def split_by_query(
    samples: Sequence[Any],
    dev_fraction: float,
    seed: int = 0,
    key: Callable[[Any], str] = query_of,
) -> tuple[list, list]:
    """Partition samples so that no query string lands on both sides."""
    if not 0.0 < dev_fraction < 1.0:
        raise ValidationError(f"dev_fraction must lie in (0, 1), got {dev_fraction}")
    queries = sorted({key(s) for s in samples})
    if len(queries) < 2:
        raise ValidationError("need at least two distinct queries to split")
    random.Random(seed).shuffle(queries)
    n_dev = min(max(round(dev_fraction * len(queries)), 1), len(queries) - 1)
    dev_q = set(queries[:n_dev])
    train, dev = [], []
    for s in samples:
        (dev if key(s) in dev_q else train).append(s)
    return train, dev
