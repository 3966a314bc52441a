"""Per-family differential analysis over method fingerprints."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Iterable, Mapping

from riderscope.errors import RiderscopeError


def as_fraction(value) -> Fraction:
    """Exact rational for a cutoff given as float, str or Fraction (0.9 -> 9/10)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def threshold(cutoff, n: int) -> int:
    """Minimum number of samples (out of ``n``) that must share an item."""
    return math.ceil(as_fraction(cutoff) * n)


@dataclass(frozen=True)
class CutoffConfig:
    hco: float = 0.90
    mco: float = 0.70
    lco: float = 0.45
    gco: float = 0.20
    min_family_size: int = 7
    early_stage_fraction: float = 0.90
    resource_cutoff: float = 0.30

    def __post_init__(self):
        g, l, m, h = (as_fraction(x) for x in (self.gco, self.lco, self.mco, self.hco))
        if not (0 < g < l < m <= h <= 1):
            raise ValueError(f"cutoffs must satisfy 0 < gco < lco < mco <= hco <= 1, got {self}")
        if self.min_family_size < 2:
            raise ValueError("min_family_size must be >= 2")
        for name in ("early_stage_fraction", "resource_cutoff"):
            v = as_fraction(getattr(self, name))
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1]")

    def ledger(self) -> dict:
        return {"HCO": self.hco, "MCO": self.mco, "LCO": self.lco, "GCO": self.gco}


@dataclass
class FamilyProfile:
    family: str
    samples: frozenset
    prevalence: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def total_distinct_methods(self) -> int:
        return len(self.prevalence)


def build_profile(
    family: str, fingerprints: Mapping[str, Iterable[Hashable]], min_family_size: int = 7
) -> FamilyProfile:
    if len(fingerprints) < min_family_size:
        raise RiderscopeError(
            "FAMILY_TOO_SMALL", f"{family}: {len(fingerprints)} samples < minimum {min_family_size}")
    counts: Counter = Counter()
    for prints in fingerprints.values():
        counts.update(set(prints))
    prevalence = dict(sorted(counts.items(), key=lambda kv: str(kv[0])))
    return FamilyProfile(family, frozenset(fingerprints), prevalence)


def rider_set(profile: FamilyProfile, cutoff) -> frozenset:
    c = as_fraction(cutoff)
    if not 0 < c <= 1:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    need = threshold(c, profile.size)
    return frozenset(f for f, k in profile.prevalence.items() if k >= need)


def is_early_stage(profile: FamilyProfile, fraction=0.90) -> bool:
    """Whether nearly all methods are shared by every sample (same carrier repackaged)."""
    total = profile.total_distinct_methods
    if total == 0:
        return False
    full = sum(1 for k in profile.prevalence.values() if k == profile.size)
    return full >= as_fraction(fraction) * total


def prevalence_curve(profile: FamilyProfile) -> list[tuple[float, int]]:
    """(share of samples, number of methods with at least that share), descending share."""
    n = profile.size
    per_level = Counter(profile.prevalence.values())
    curve = []
    running = 0
    for k in sorted(per_level, reverse=True):
        running += per_level[k]
        curve.append((k / n, running))
    return curve
