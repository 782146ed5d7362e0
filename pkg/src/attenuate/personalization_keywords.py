"""Keyword derivation shared by sensitivity profiles and the overlap judge."""

from __future__ import annotations

import re

_STOPWORDS = frozenset(
    "a an the and or of from in on at with to for is are was were be been "
    "that this it its they them there here very some any my your our".split()
)

_SUFFIXES = ("ing", "ed", "es", "s")


def _stem(token: str) -> str:
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[: -len(suffix)]
    return token


def derive_keywords(text: str) -> frozenset[str]:
    """Case-folded, stemmed keyword set with stopwords removed."""
    tokens = re.findall(r"[a-z]+", text.lower())
    return frozenset(_stem(t) for t in tokens if len(t) >= 2 and t not in _STOPWORDS)
