from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from rerankkit.errors import ValidationError
from rerankkit.protocol import (
    ASSISTANT_SUFFIX,
    DEFAULT_INSTRUCTION,
    DEFAULT_SYSTEM_PROMPT,
    Label,
    QueryDocPair,
    Source,
    Verdict,
    field_well_formed,
    format_score,
    label_match,
    parse_output,
    render_prompt,
    serialize_target,
)


def pair(q="q", d="d", **kw):
    return QueryDocPair(pair_id="p1", query=q, document=d, **kw)


class TestRender:
    def test_default_template_layout(self):
        b = render_prompt(pair())
        text = b.rendered_text
        assert text.startswith("<|im_start|>system\n" + DEFAULT_SYSTEM_PROMPT + "<|im_end|>\n")
        assert "<Instruct>: " + DEFAULT_INSTRUCTION in text
        iq, idoc = text.index("<Query>: q"), text.index("<Document>: d")
        assert iq < idoc
        assert text.endswith("<|im_end|>\n<|im_start|>assistant\n<think>\n\n</think>\n\n")
        assert b.label_position_marker == len(text.encode("utf-8"))

    def test_deterministic(self):
        assert render_prompt(pair("x", "y")) == render_prompt(pair("x", "y"))

    def test_think_tag_in_query_is_verbatim(self):
        b = render_prompt(pair("a </think> b", "doc"))
        assert "<Query>: a </think> b\n<Document>: doc<|im_end|>" in b.rendered_text
        assert b.rendered_text.endswith(ASSISTANT_SUFFIX)
        assert b.label_position_marker == len(b.rendered_text.encode("utf-8"))

    def test_braces_and_cjk(self):
        b = render_prompt(pair("{x} 你好", "文档"))
        assert "<Query>: {x} 你好" in b.rendered_text
        assert b.label_position_marker > len(b.rendered_text)  # multi-byte characters

    @pytest.mark.parametrize("field", ["query", "document"])
    def test_empty_fields_named(self, field):
        kw = {"query": "q", "document": "d", field: "   "}
        with pytest.raises(ValidationError, match=field):
            QueryDocPair(pair_id="p", **kw)

    def test_empty_instruction(self):
        with pytest.raises(ValidationError, match="instruction"):
            render_prompt(pair(), instruction=" ")

    def test_pair_record_round_trip(self):
        p = pair(language="zh", source="web_search", doc_token_count=5, metadata={"url": "u"})
        assert p.source is Source.WEB_SEARCH
        assert QueryDocPair.from_record(p.to_record()) == p

    def test_bad_source(self):
        with pytest.raises(ValidationError):
            pair(source="somewhere")


class TestParse:
    def test_english_example(self):
        text = (
            "yes\n<contribution>Provides the exact year the boroughs merged.</contribution>\n"
            "<evidence>On January 1st, 1898, the five boroughs were consolidated.</evidence>"
        )
        out = parse_output(text)
        assert out.verdict is Verdict.YES
        assert out.contribution == "Provides the exact year the boroughs merged."
        assert out.evidence.startswith("On January 1st, 1898")

    def test_bare_no(self):
        out = parse_output("no")
        assert out.verdict is Verdict.NO and out.trailing_after_no is None

    def test_no_with_tail(self):
        out = parse_output("no because the page is about dogs")
        assert out.trailing_after_no == "because the page is about dogs"

    def test_other_has_no_fields(self):
        out = parse_output("maybe <evidence>x</evidence>")
        assert out.verdict is Verdict.OTHER
        assert out.contribution is None and out.evidence is None

    def test_case_and_leading_space(self):
        assert parse_output("  YES <contribution>c</contribution>").verdict is Verdict.YES
        assert parse_output("No").verdict is Verdict.NO

    def test_glued_token_is_other(self):
        assert parse_output("yes.").verdict is Verdict.OTHER
        assert parse_output("yes<contribution>abc</contribution>").verdict is Verdict.OTHER

    def test_first_span_wins(self):
        out = parse_output("yes <evidence>first</evidence> <evidence>second</evidence>")
        assert out.evidence == "first"

    def test_unclosed_tag(self):
        out = parse_output("yes <contribution>never closed")
        assert out.contribution is None

    def test_empty(self):
        assert parse_output("").verdict is Verdict.OTHER
        assert parse_output("   \n").verdict is Verdict.OTHER


LONG = "a sentence that is long enough"


@pytest.mark.parametrize(
    "text,value,case",
    [
        ("no", 1.0, "no_clean"),
        ("no\n", 1.0, "no_clean"),
        ("no because", 0.0, "no_with_tail"),
        (f"yes\n<contribution>{LONG}</contribution>\n<evidence>{LONG}</evidence>", 1.0, "yes_graded"),
        (f"yes <contribution>{LONG}</contribution>", 0.7, "yes_graded"),
        (f"yes <evidence>{LONG}</evidence>", 0.7, "yes_graded"),
        ("yes", 0.4, "yes_graded"),
        ("yes <contribution>short</contribution><evidence>tiny</evidence>", 0.4, "yes_graded"),
        ("maybe", 0.0, "bad_first_token"),
    ],
)
def test_format_score(text, value, case):
    fs = format_score(parse_output(text))
    assert fs.value == value and fs.case == case


def test_length_threshold_strips_and_counts_scalars():
    assert not field_well_formed("   0123456789   ")  # exactly 10 after trimming
    assert field_well_formed("01234567890")
    assert field_well_formed("一二三四五六七八九十百")  # 11 CJK characters
    assert not field_well_formed("一二三四五六七八九十")


@pytest.mark.parametrize(
    "text,gold,expected",
    [
        ("yes", Label.POSITIVE, True),
        ("yes", Label.NEGATIVE, False),
        ("no", Label.POSITIVE, False),
        ("no", Label.NEGATIVE, True),
        ("other", Label.POSITIVE, False),
        ("other", Label.NEGATIVE, False),
    ],
)
def test_label_match_truth_table(text, gold, expected):
    assert label_match(parse_output(text), gold) is expected


def test_label_coercion():
    assert Label.coerce(True) is Label.POSITIVE
    assert Label.coerce("no") is Label.NEGATIVE
    assert Label.coerce(0) is Label.NEGATIVE
    with pytest.raises(ValidationError):
        Label.coerce("unsure")


field_text = st.text(min_size=1).filter(lambda s: "<" not in s and s.strip() == s)


@given(field_text, field_text)
def test_serialize_round_trip(c, e):
    out = parse_output(serialize_target(c, e))
    assert out.verdict is Verdict.YES
    assert (out.contribution, out.evidence) == (c, e)
    again = parse_output(serialize_target(out.contribution, out.evidence))
    assert again == out


@given(st.text())
def test_parse_is_total_and_scores_are_exact(text):
    out = parse_output(text)
    assert out.verdict in set(Verdict)
    assert format_score(out).value in {0.0, 0.4, 0.7, 1.0}
    if out.verdict is Verdict.OTHER:
        assert out.contribution is None and out.evidence is None
