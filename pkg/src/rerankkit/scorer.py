"""Relevance score and loss formulas on plain numbers.

Nothing here touches a model: callers pass logits, scores and per-token
log-probabilities that were computed elsewhere.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

from rerankkit.errors import ValidationError

LOGIT_CLAMP = 1e-7


class TeacherSource(str, enum.Enum):
    COMMERCIAL_API = "commercial_api"
    SELF_DISTILLATION = "self_distillation"
    CACHED_FILE = "cached_file"


@dataclass(frozen=True)
class LabelLogits:
    l_yes: float
    l_no: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.l_yes) and math.isfinite(self.l_no)):
            raise ValidationError("label logits must be finite")


@dataclass(frozen=True)
class TeacherScore:
    y: float
    source: TeacherSource = TeacherSource.COMMERCIAL_API

    def __post_init__(self) -> None:
        if not (isinstance(self.y, (int, float)) and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"teacher score must lie in [0, 1], got {self.y!r}")
        if not isinstance(self.source, TeacherSource):
            object.__setattr__(self, "source", TeacherSource(self.source))


@dataclass(frozen=True)
class SftTarget:
    token_logprobs: Sequence[float]
    mask: Sequence[bool]

    def __post_init__(self) -> None:
        if len(self.token_logprobs) != len(self.mask):
            raise ValidationError("token_logprobs and mask must have equal length")
        for lp in self.token_logprobs:
            if not math.isfinite(lp) or lp > 0:
                raise ValidationError(f"log-probabilities must be finite and <= 0, got {lp!r}")


@dataclass(frozen=True)
class LossWeights:
    gamma_point: float = 20.0
    gamma_sft: float = 1.0

    def __post_init__(self) -> None:
        if not (self.gamma_point > 0 and self.gamma_sft > 0):
            raise ValidationError("loss weights must be positive")


def logistic(x: float) -> float:
    # branch on sign so exp never overflows
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def inverse_logistic(p: float, clamp: float = LOGIT_CLAMP) -> float:
    p = min(max(p, clamp), 1.0 - clamp)
    return math.log(p / (1.0 - p))


def relevance_score(logits: LabelLogits | tuple[float, float]) -> float:
    if not isinstance(logits, LabelLogits):
        logits = LabelLogits(*logits)
    return logistic(logits.l_yes - logits.l_no)


def _teacher_y(y: TeacherScore | float) -> float:
    return y.y if isinstance(y, TeacherScore) else TeacherScore(y).y


def loss_point(s: float, y: TeacherScore | float) -> float:
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"student score must lie in [0, 1], got {s!r}")
    return (s - _teacher_y(y)) ** 2


def loss_sft(target: SftTarget) -> float:
    if not any(target.mask):
        raise ValidationError("SFT target has no supervised positions")
    return -math.fsum(lp for lp, m in zip(target.token_logprobs, target.mask) if m)


def loss_total(lp: float, ls: float, w: LossWeights = LossWeights()) -> float:
    if lp < 0 or ls < 0:
        raise ValidationError("loss terms must be non-negative")
    return w.gamma_point * lp + w.gamma_sft * ls


def _log_softmax(xs: Sequence[float]) -> list[float]:
    m = max(xs)
    lse = m + math.log(math.fsum(math.exp(x - m) for x in xs))
    return [x - lse for x in xs]


def _logsumexp(xs: Sequence[float]) -> float:
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def loss_listwise_kl(
    student_scores: Sequence[float],
    teacher_scores: Sequence[float],
    temperature: float = 2.0,
    *,
    direction: str = "teacher_student",
    clamp: bool = False,
) -> float:
    """Temperature-softened KL between score distributions over one group, times T².

    Scores are probabilities; both sides go back to logits first. With
    ``clamp=False`` a score at exactly 0 or 1 is rejected, with ``clamp=True``
    it is pulled into ``[1e-7, 1 - 1e-7]``.
    """
    if len(student_scores) != len(teacher_scores):
        raise ValidationError("student and teacher lists must have equal length")
    if len(student_scores) < 2:
        raise ValidationError("a list-wise group needs at least two documents")
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    if direction not in ("teacher_student", "student_teacher"):
        raise ValidationError(f"unknown KL direction: {direction!r}")
    for p in (*student_scores, *teacher_scores):
        if not clamp and not 0.0 < p < 1.0:
            raise ValidationError(f"scores must lie strictly inside (0, 1), got {p!r}")
        if clamp and not 0.0 <= p <= 1.0:
            raise ValidationError(f"scores must lie in [0, 1], got {p!r}")
    log_s = _log_softmax([inverse_logistic(p) / temperature for p in student_scores])
    log_t = _log_softmax([inverse_logistic(p) / temperature for p in teacher_scores])
    if direction == "student_teacher":
        log_s, log_t = log_t, log_s
    kl = math.fsum(math.exp(lt) * (lt - ls) for lt, ls in zip(log_t, log_s))
    # rounding can leave a -1e-17 residue at equality
    return max(kl, 0.0) * temperature**2


def infonce_weights(
    teacher_scores: Sequence[float], positive_index: int, eps: float = 0.05
) -> list[float]:
    """Per-negative weights: ``1 - margin`` clamped to ``[eps, 1]``, rescaled to mean 1.

    Small teacher margin (hard negative) gives a weight near 1 before rescaling;
    large margin falls towards ``eps``.
    """
    y_pos = teacher_scores[positive_index]
    raw = [
        min(max(1.0 - (y_pos - y), eps), 1.0)
        for j, y in enumerate(teacher_scores)
        if j != positive_index
    ]
    mean = math.fsum(raw) / len(raw)
    return [w / mean for w in raw]


def loss_rank_infonce(
    student_scores: Sequence[float],
    teacher_scores: Sequence[float],
    positive_index: int,
    *,
    eps: float = 0.05,
) -> float:
    if len(student_scores) != len(teacher_scores):
        raise ValidationError("student and teacher lists must have equal length")
    if len(student_scores) < 2:
        raise ValidationError("InfoNCE needs a positive and at least one negative")
    if not 0 <= positive_index < len(student_scores):
        raise ValidationError(f"positive_index {positive_index} out of range")
    if not 0 < eps <= 1:
        raise ValidationError("eps must lie in (0, 1]")
    weights = infonce_weights(teacher_scores, positive_index, eps)
    s_pos = student_scores[positive_index]
    negs = [s for j, s in enumerate(student_scores) if j != positive_index]
    terms = [s_pos] + [s + math.log(w) for s, w in zip(negs, weights)]
    return max(_logsumexp(terms) - s_pos, 0.0)
