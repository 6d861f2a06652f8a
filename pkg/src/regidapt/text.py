"""Shared text utilities: tokenization and URL stripping."""

from __future__ import annotations

import re

# Word tokens (unicode letters/digits/underscore) or single punctuation marks.
# Punctuation marks count as tokens, so "I hate this, I hate everything"
# tokenizes to 7 tokens, not 6.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# Conservative URL pattern: a known scheme prefix up to the next whitespace.
_URL_RE = re.compile(r"(?:https?://|www\.)\S*")


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace+punctuation tokenization."""
    return _TOKEN_RE.findall(text.lower())


def strip_urls(text: str) -> str:
    """Remove URL substrings; surrounding whitespace is left untouched."""
    return _URL_RE.sub("", text)
