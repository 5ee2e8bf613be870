from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, strategies as st

from rerankkit.errors import ValidationError
from rerankkit.scorer import (
    LabelLogits,
    LossWeights,
    SftTarget,
    TeacherScore,
    TeacherSource,
    infonce_weights,
    inverse_logistic,
    logistic,
    loss_listwise_kl,
    loss_point,
    loss_rank_infonce,
    loss_sft,
    loss_total,
    relevance_score,
)


def kl_reference(student, teacher, t):
    """Plain-formula reference: logits, soften, softmax, KL(teacher || student), times t^2."""

    def dist(scores):
        z = [math.log(p / (1 - p)) / t for p in scores]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        tot = sum(e)
        return [v / tot for v in e]

    ps, pt = dist(student), dist(teacher)
    return t * t * sum(a * math.log(a / b) for a, b in zip(pt, ps))


class TestRelevanceScore:
    def test_equal_logits(self):
        assert relevance_score(LabelLogits(3.0, 3.0)) == 0.5

    def test_known_value(self):
        assert relevance_score(LabelLogits(2.0, 0.0)) == pytest.approx(1 / (1 + math.exp(-2)), rel=1e-15)
        assert relevance_score((2.0, 0.0)) == pytest.approx(0.8807970779778823)

    def test_tail(self):
        s = relevance_score(LabelLogits(0.0, 50.0))
        assert 0.0 < s < 1e-20

    def test_extreme_logits_do_not_overflow(self):
        assert relevance_score(LabelLogits(-1000.0, 1000.0)) == 0.0
        assert relevance_score(LabelLogits(1000.0, -1000.0)) == 1.0

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
    def test_non_finite(self, bad):
        with pytest.raises(ValidationError):
            LabelLogits(bad, 0.0)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-30, 30))
    def test_monotone(self, a, b, delta):
        lo, hi = sorted((a, a + abs(delta)))
        assert relevance_score((lo, b)) <= relevance_score((hi, b))
        assert relevance_score((b, lo)) >= relevance_score((b, hi))

    def test_inverse_logistic_round_trip(self):
        for x in (-5.0, -0.3, 0.0, 2.5, 9.0):
            assert inverse_logistic(logistic(x)) == pytest.approx(x, abs=1e-9)


class TestPointAndSft:
    def test_point_examples(self):
        assert loss_point(0.4, TeacherScore(0.4)) == 0.0
        assert loss_point(0.8, 0.5) == pytest.approx(0.09, abs=1e-15)
        assert loss_point(0.0, 1.0) == 1.0

    def test_teacher_score_range(self):
        with pytest.raises(ValidationError):
            TeacherScore(1.3)
        assert TeacherScore(0.2, "cached_file").source is TeacherSource.CACHED_FILE

    def test_sft_examples(self):
        assert loss_sft(SftTarget([0.0, 0.0], [True, True])) == 0.0
        assert loss_sft(SftTarget([-1.0, -2.0, -3.0], [False, True, True])) == 5.0
        assert loss_sft(SftTarget([-0.1], [True])) == pytest.approx(0.1)

    def test_sft_errors(self):
        with pytest.raises(ValidationError):
            loss_sft(SftTarget([-1.0], [False]))
        with pytest.raises(ValidationError):
            SftTarget([-1.0, -2.0], [True])
        with pytest.raises(ValidationError):
            SftTarget([0.5], [True])


class TestTotal:
    def test_hand_arithmetic(self):
        assert loss_total(0.09, 5.0) == pytest.approx(6.8, abs=1e-12)
        assert loss_total(0.0, 0.0, LossWeights(3.0, 7.0)) == 0.0

    def test_linearity(self):
        base = loss_total(0.3, 2.0, LossWeights(20.0, 1.0)) - 2.0
        doubled = loss_total(0.3, 2.0, LossWeights(40.0, 1.0)) - 2.0
        assert doubled == pytest.approx(2 * base, rel=1e-15)

    def test_weights_positive(self):
        with pytest.raises(ValidationError):
            LossWeights(0.0, 1.0)
        assert LossWeights() == LossWeights(20.0, 1.0)


class TestListwiseKl:
    def test_equality_is_zero(self):
        xs = [0.9, 0.2, 0.4, 0.05]
        assert loss_listwise_kl(xs, xs) == 0.0

    def test_two_point_reference(self):
        got = loss_listwise_kl([0.5, 0.5], [0.9, 0.1], temperature=2.0)
        # two-point distributions: teacher logits +-ln 9, softened by T=2 -> p = 9^0.5/(9^0.5+9^-0.5) = 0.9
        pt = [0.9, 0.1]
        ref = 4.0 * sum(p * math.log(p / 0.5) for p in pt)
        assert got == pytest.approx(ref, rel=1e-12)

    def test_random_instances_match_reference(self):
        rng = random.Random(5)
        for _ in range(50):
            n = rng.randint(2, 8)
            s = [rng.uniform(0.01, 0.99) for _ in range(n)]
            t = [rng.uniform(0.01, 0.99) for _ in range(n)]
            temp = rng.choice([0.5, 1.0, 2.0, 4.0])
            assert loss_listwise_kl(s, t, temp) == pytest.approx(kl_reference(s, t, temp), rel=1e-9, abs=1e-14)

    def test_direction_flag(self):
        s, t = [0.3, 0.6, 0.9], [0.8, 0.1, 0.5]
        assert loss_listwise_kl(s, t, direction="student_teacher") == pytest.approx(kl_reference(t, s, 2.0), rel=1e-9)
        with pytest.raises(ValidationError):
            loss_listwise_kl(s, t, direction="sideways")

    def test_boundary_scores(self):
        with pytest.raises(ValidationError):
            loss_listwise_kl([0.0, 0.5], [0.5, 0.5])
        assert loss_listwise_kl([1.0, 0.5], [1.0, 0.5], clamp=True) == 0.0

    def test_shape_errors(self):
        with pytest.raises(ValidationError):
            loss_listwise_kl([0.5], [0.5])
        with pytest.raises(ValidationError):
            loss_listwise_kl([0.5, 0.4], [0.5])
        with pytest.raises(ValidationError):
            loss_listwise_kl([0.5, 0.4], [0.5, 0.3], temperature=0)

    @given(st.lists(st.tuples(st.floats(0.001, 0.999), st.floats(0.001, 0.999)), min_size=2, max_size=8))
    def test_non_negative(self, pairs):
        s, t = zip(*pairs)
        assert loss_listwise_kl(list(s), list(t)) >= 0.0


class TestInfoNce:
    def test_equal_scores_one_negative(self):
        assert loss_rank_infonce([1.5, 1.5], [0.9, 0.2], 0) == pytest.approx(math.log(2), rel=1e-15)

    def test_saturation(self):
        assert loss_rank_infonce([800.0, 0.0], [0.9, 0.1], 0) == pytest.approx(0.0, abs=1e-300)

    def test_monotone_in_positive(self):
        t = [0.9, 0.5, 0.3, 0.8]
        losses = [loss_rank_infonce([s, 0.2, -0.4, 0.1], t, 0) for s in (-1.0, 0.0, 0.5, 1.0, 3.0)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_weights(self):
        w = infonce_weights([0.9, 0.85, 0.1, 0.5], 0, eps=0.05)
        raw = [0.95, 0.2, 0.6]
        mean = sum(raw) / 3
        assert w == pytest.approx([r / mean for r in raw], rel=1e-15)
        assert sum(w) / len(w) == pytest.approx(1.0)
        assert w[0] > w[2] > w[1]  # hardest negative gets the most weight

    def test_eps_floor(self):
        w = infonce_weights([1.0, 0.0, 0.0], 0, eps=0.05)
        assert w == pytest.approx([1.0, 1.0])

    def test_reference_formula(self):
        s, t = [0.7, 0.1, 0.9, -0.2], [0.95, 0.3, 0.9, 0.6]
        w = infonce_weights(t, 0)
        negs = [0.1, 0.9, -0.2]
        ref = -math.log(math.exp(0.7) / (math.exp(0.7) + sum(wj * math.exp(sj) for wj, sj in zip(w, negs))))
        assert loss_rank_infonce(s, t, 0) == pytest.approx(ref, rel=1e-12)

    def test_index_error(self):
        with pytest.raises(ValidationError):
            loss_rank_infonce([0.1, 0.2], [0.3, 0.4], 2)
