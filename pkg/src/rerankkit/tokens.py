"""Deterministic token counting without an external vocabulary."""

from __future__ import annotations

import re
from typing import Callable

TokenCounter = Callable[[str], int]

_CJK = (
    "぀-ヿ"  # kana
    "㐀-䶿一-鿿豈-﫿"  # han
    "가-힯"  # hangul
    "　-〿＀-￯"  # CJK punctuation, fullwidth forms
)
_TOKEN = re.compile(rf"[{_CJK}]|[^\W{_CJK}]+|[^\w\s{_CJK}]")


def count_tokens(text: str) -> int:
    """One token per word run, per CJK character and per other symbol."""
    return len(_TOKEN.findall(text))


def tiktoken_counter(encoding: str = "cl100k_base") -> TokenCounter:
    """Adapter for tiktoken when it is installed (optional dependency)."""
    import tiktoken

    enc = tiktoken.get_encoding(encoding)
    return lambda text: len(enc.encode(text))


def get_counter(name: str = "proxy") -> TokenCounter:
    if name == "proxy":
        return count_tokens
    if name.startswith("tiktoken:"):
        return tiktoken_counter(name.split(":", 1)[1])
    raise ValueError(f"unknown tokenizer {name!r} (use 'proxy' or 'tiktoken:<encoding>')")
