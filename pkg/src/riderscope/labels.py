"""Plurality family naming from multi-vendor AV labels."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

SINGLETON = "SINGLETON"

DEFAULT_STOPWORDS = frozenset({
    "trojan", "virus", "malware", "android", "andr", "adware", "riskware", "generic",
    "agent", "variant", "win32", "a", "b", "c",
})

_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class VendorLabelSet:
    sample_id: str
    labels: Mapping[str, str] = field(default_factory=dict)


def tokenize(label: str) -> list[str]:
    return [t for t in _SPLIT.split(label.lower()) if t]


def normalize_family(
    labels: VendorLabelSet | Mapping[str, str],
    stopwords: Iterable[str] = DEFAULT_STOPWORDS,
    min_agreement: int = 2,
) -> str:
    if min_agreement < 1:
        raise ValueError("min_agreement must be >= 1")
    raw = labels.labels if isinstance(labels, VendorLabelSet) else labels
    stop = {s.lower() for s in stopwords}
    votes: Counter = Counter()
    for label in raw.values():
        if label:
            votes.update({t for t in tokenize(label) if t not in stop})
    if not votes:
        return SINGLETON
    best, count = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    return best if count >= min_agreement else SINGLETON


def load_stopwords(path) -> frozenset:
    words = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)
