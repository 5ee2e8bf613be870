"""Deterministic fixture endpoints and small builders shared by the tests."""

from __future__ import annotations

import hashlib
import json
import random
import re
from pathlib import Path

from rerankkit.transport import FunctionTransport, chat_response

FIXTURES = Path(__file__).parent / "fixtures"

TEACHER_URL = "https://teacher.test/v1/rerank"
JUDGE_IDS = ("judge-a", "judge-b", "judge-c", "judge-d", "judge-e")
GENERATOR_URL = "https://generator.test/v1/chat/completions"
EXTRACTOR_URL = "https://extractor.test/v1/chat/completions"
QUALITY_URL = "https://quality.test/v1/chat/completions"


def judge_url(judge_id: str) -> str:
    return f"https://{judge_id}.test/v1/chat/completions"


def _unit(*parts: str) -> float:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def fixture_relevant(document: str) -> bool:
    return _unit("relevant", document) < 0.5


def teacher_handler(body: dict) -> dict:
    doc = body["documents"][0]
    base = 0.55 if fixture_relevant(doc) else 0.0
    y = round(base + 0.45 * _unit("teacher", body["query"], doc), 6)
    return {"results": [{"index": 0, "relevance_score": y}]}


_JUDGE_STYLES = ("{v}", "{V}.", "Assessment done.\n{v}", "{v} - the document addresses the query", "{V}")


def judge_handler(body: dict) -> dict:
    model = body["model"]
    user = body["messages"][-1]["content"]
    doc = user.split("Document: ", 1)[1].rsplit("\n\nRelevant", 1)[0]
    truth = fixture_relevant(doc)
    flip = _unit("flip", model, doc) < 0.12
    v = "yes" if truth != flip else "no"
    style = _JUDGE_STYLES[int(_unit("style", model, doc) * len(_JUDGE_STYLES))]
    return chat_response(style.format(v=v, V=v.capitalize()))


def generator_handler(body: dict) -> dict:
    user = body["messages"][-1]["content"]
    doc = user.rsplit("Document: ", 1)[1].strip()
    first = re.split(r"(?<=[.!?。！？])\s*", doc)[0].strip()
    return chat_response(
        f"<contribution>Explains the point the document makes about {doc[:24].strip()}.</contribution>\n"
        f"<evidence>{first}</evidence>"
    )


def extractor_handler(body: dict) -> dict:
    text = body["messages"][-1]["content"].rsplit("Text:\n", 1)[1]
    words = re.findall(r"\b[A-Z][a-z]+(?: [A-Z][a-z]+)*", text)
    return chat_response(json.dumps(list(dict.fromkeys(words))))


def quality_handler(body: dict) -> dict:
    msg = body["messages"][-1]["content"]
    base = 1 + int(_unit("quality", msg) * 4)  # 1..4
    return chat_response(json.dumps({
        "contribution_accuracy": base,
        "contribution_coverage": min(base + 1, 5),
        "evidence_faithfulness": base,
        "evidence_self_contained": 3,
        "evidence_concision": 3,
        "language_consistency": 5,
    }))


def fixture_handler(url: str, body: dict) -> dict:
    if url == TEACHER_URL:
        return teacher_handler(body)
    if url in {judge_url(j) for j in JUDGE_IDS}:
        return judge_handler(body)
    if url == GENERATOR_URL:
        return generator_handler(body)
    if url == EXTRACTOR_URL:
        return extractor_handler(body)
    if url == QUALITY_URL:
        return quality_handler(body)
    raise AssertionError(f"unexpected URL {url}")


def fixture_transport() -> FunctionTransport:
    return FunctionTransport(fixture_handler)


def fixture_config_dict(cache_dir: str, **extra) -> dict:
    cfg = {
        "seed": 11,
        "cache_dir": cache_dir,
        "teacher": {"url": TEACHER_URL, "model": "teacher-fixture"},
        "judges": {
            "panel": [{"judge_id": j, "url": judge_url(j), "model": f"{j}-model", "max_attempts": 1} for j in JUDGE_IDS],
        },
        "acquisition": {"generator": {"url": GENERATOR_URL, "model": "generator-fixture", "max_attempts": 1}},
        "balance": {"target_h": 0.875},
        "eval": {
            "extractor": {"url": EXTRACTOR_URL, "model": "extractor-fixture"},
            "quality_judge": {"url": QUALITY_URL, "model": "quality-fixture"},
        },
    }
    for section, values in extra.items():
        if isinstance(values, dict) and isinstance(cfg.get(section), dict):
            cfg[section] = {**cfg[section], **values}
        else:
            cfg[section] = values
    return cfg


# ---------------------------------------------------------------------------
# synthetic corpora

_TOPICS = [
    ("how do solar panels convert sunlight", "Photovoltaic cells in solar panels absorb photons and release electrons."),
    ("what causes ocean tides", "Tides are caused mainly by the gravitational pull of the Moon on the oceans."),
    ("best way to store fresh basil", "Fresh basil keeps longest when stored like cut flowers in a glass of water."),
    ("why do cats purr", "Cats purr through rapid twitching of the muscles in the larynx."),
    ("how tall is the eiffel tower", "The Eiffel Tower is 330 metres tall including its antennas."),
    ("symptoms of vitamin d deficiency", "Vitamin D deficiency can cause bone pain, fatigue and muscle weakness."),
    ("如何缓解失眠", "规律作息、减少咖啡因摄入和睡前放松有助于缓解失眠。"),
    ("长城有多长", "明长城全长约8851.8千米，是世界上最长的防御工程。"),
    ("what is a b-tree index", "A B-tree index keeps keys sorted in balanced pages so lookups take logarithmic time."),
    ("when did the berlin wall fall", "The Berlin Wall fell on 9 November 1989 after mass protests in East Germany."),
    ("how to descale a kettle", "Boiling a mixture of water and white vinegar removes limescale from a kettle."),
    ("what is the boiling point of ethanol", "Ethanol boils at 78.37 degrees Celsius at standard pressure."),
    ("熊猫吃什么", "大熊猫的食物百分之九十九是竹子，偶尔也吃小动物。"),
    ("who painted the night watch", "The Night Watch was painted by Rembrandt van Rijn in 1642."),
    ("how do vaccines train the immune system", "Vaccines expose the immune system to antigens so it can build memory cells."),
    ("average lifespan of a honeybee", "Worker honeybees live about six weeks in summer and several months in winter."),
    ("what is compound interest", "Compound interest is interest earned on both the principal and past interest."),
    ("why is the sky blue", "Air molecules scatter short blue wavelengths of sunlight more than red ones."),
    ("how to calculate bmi", "Body mass index equals weight in kilograms divided by height in metres squared."),
    ("what language is spoken in brazil", "Portuguese is the official and most widely spoken language of Brazil."),
]

_FILLER_EN = [
    "Cookie settings can be changed at any time from the footer of this page.",
    "Subscribe to our newsletter for weekly updates and special offers.",
    "This article was reviewed by our editorial team for accuracy.",
    "Related posts from the same category are listed in the sidebar.",
    "Readers also asked several follow-up questions in the comments below.",
]
_FILLER_ZH = ["本站内容仅供参考，如有侵权请联系删除。", "更多精彩内容请关注我们的公众号。", "相关阅读推荐见页面底部。"]


def synthetic_pairs(n: int, seed: int = 7) -> list[dict]:
    """``n`` short pair records whose declared token counts spread over every length bin."""
    rng = random.Random(seed)
    bins = [(10, 63), (64, 127), (128, 255), (256, 511), (512, 1023), (1024, 2047), (2048, 4095), (4096, 9000)]
    out = []
    for i in range(n):
        query, fact = _TOPICS[i % len(_TOPICS)]
        other_fact = _TOPICS[(i * 7 + 3) % len(_TOPICS)][1]
        zh = any("一" <= ch <= "鿿" for ch in query)
        filler = _FILLER_ZH if zh else _FILLER_EN
        parts = [rng.choice(filler) for _ in range(rng.randrange(4))]
        parts.insert(rng.randrange(len(parts) + 1), fact if rng.random() < 0.6 else other_fact)
        lo, hi = rng.choice(bins)
        out.append({
            "pair_id": f"p{i:03d}",
            "query": query,
            "document": " ".join(parts),
            "language": "zh" if zh else "en",
            "source": "open_corpus",
            "doc_token_count": rng.randint(lo, hi),
            "metadata": {"dataset": f"fixture-{i % 3}"},
        })
    return out


def write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records), encoding="utf-8")


# ---------------------------------------------------------------------------
# kappa fixtures


def kappa_082_votes() -> dict[str, list[int]]:
    """Five judges over 200 items: truth is 100 ones then 100 zeros.

    Judge i flips a disjoint set F_i split evenly across both halves, so every
    judge keeps 50/50 marginals (p_e = 1/2) and
    kappa(i, j) = 1 - 2 (|F_i| + |F_j|) / 200. Sizes 8 and 10 give the maximum 0.82.
    """
    truth = [1] * 100 + [0] * 100
    sizes = (8, 10, 12, 14, 16)
    votes = {}
    ones, zeros = 0, 100
    for n, jid in zip(sizes, JUDGE_IDS):
        flips = list(range(ones, ones + n // 2)) + list(range(zeros, zeros + n // 2))
        ones += n // 2
        zeros += n // 2
        v = list(truth)
        for i in flips:
            v[i] = 1 - v[i]
        votes[jid] = v
    return votes


def near_duplicate_pool(n_items: int = 300, seed: int = 4) -> dict[str, list[int]]:
    """Seven judges: five noisy independent raters plus near-copies of two of them."""
    rng = random.Random(seed)
    truth = [rng.random() < 0.5 for _ in range(n_items)]
    noise = {"j1": 0.10, "j2": 0.14, "j3": 0.18, "j4": 0.22, "j5": 0.26}
    pool = {j: [int(t != (rng.random() < p)) for t in truth] for j, p in noise.items()}
    for src, dup in (("j1", "j6"), ("j3", "j7")):
        pool[dup] = [v if rng.random() > 0.02 else 1 - v for v in pool[src]]
    return dict(sorted(pool.items()))


def exhaustive_min_mean_kappa(votes: dict[str, list[int]], k: int, kappa) -> tuple[str, ...]:
    """Size-k subset with the lowest mean pairwise kappa; ties go to the lexicographically first subset."""
    from itertools import combinations

    ids = sorted(votes)
    best, best_val = None, None
    for subset in combinations(ids, k):
        vals = [kappa(votes[a], votes[b]) for a, b in combinations(subset, 2)]
        mean = sum(vals) / len(vals)
        if best_val is None or mean < best_val - 1e-15:
            best, best_val = subset, mean
    return best


# ---------------------------------------------------------------------------
# balance fixtures

_LENGTH_RANGES = [(0, 63), (64, 127), (128, 255), (256, 511), (512, 1023), (1024, 2047), (2048, 4095), (4096, 12000)]


def skewed_corpus(n: int, seed: int = 0, boost: float = 1.5) -> list[tuple[float, int]]:
    """(score, length) samples over-weighting short, high-score cells."""
    import numpy as np

    rng = np.random.default_rng(seed)
    w = np.ones((6, 8))
    w[3:, :3] += boost
    w[0, 7] = 0.5
    cells = rng.choice(48, size=n, p=(w / w.sum()).ravel())
    out = []
    for cell in cells:
        r, c = divmod(int(cell), 8)
        lo, hi = _LENGTH_RANGES[c]
        score = (r + rng.uniform(0.0, 0.999)) / 6
        out.append((float(score), int(rng.integers(lo, hi + 1))))
    return out


def uniform_corpus(per_cell: int) -> list[tuple[float, int]]:
    return [((r + 0.5) / 6, _LENGTH_RANGES[c][0]) for r in range(6) for c in range(8) for _ in range(per_cell)]
