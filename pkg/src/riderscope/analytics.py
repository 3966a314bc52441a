"""Family rankings, quarter bucketing, per-quarter feature prevalence and trend fits."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from typing import Iterable, Mapping, Optional

from riderscope.diff import threshold
from riderscope.errors import RiderscopeError

SECONDS_PER_DAY = 86400
_CATEGORY = re.compile(r"^[A-Z][A-Z0-9_]*$")


class RankKey(str, enum.Enum):
    LARGEST = "LARGEST"
    PREVALENT = "PREVALENT"
    VIRAL = "VIRAL"
    STEALTHY = "STEALTHY"


def quarter_index(ts: datetime) -> int:
    """Calendar quarter in UTC as a running index (year * 4 + q - 1)."""
    ts = ts.astimezone(timezone.utc)
    return ts.year * 4 + (ts.month - 1) // 3


def quarter_label(index: int) -> str:
    return f"{index // 4}Q{index % 4 + 1}"


def parse_quarter(label: str) -> int:
    m = re.fullmatch(r"(\d{4})Q([1-4])", label.strip())
    if not m:
        raise ValueError(f"bad quarter label {label!r}")
    return int(m.group(1)) * 4 + int(m.group(2)) - 1


def quarter_start(index: int) -> datetime:
    return datetime(index // 4, 3 * (index % 4) + 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class FamilyMetrics:
    family: str
    size: int
    quarters_active: int
    virality: float
    stealth: Optional[float]  # mean days between compilation and first sighting
    stealth_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "family": self.family, "size": self.size, "quarters_active": self.quarters_active,
            "virality": self.virality, "stealth": self.stealth, "stealth_samples": self.stealth_samples,
        }


def _metrics(family: str, records) -> FamilyMetrics:
    if not records:
        raise ValueError(f"family {family} has no samples")
    quarters = {quarter_index(r.first_seen) for r in records}
    deltas = [r.first_seen - r.dex_date for r in records if r.dex_date is not None]
    stealth = None
    if deltas:
        micro = sum((d.days * SECONDS_PER_DAY + d.seconds) * 10**6 + d.microseconds for d in deltas)
        stealth = float(Fraction(micro, 10**6 * SECONDS_PER_DAY * len(deltas)))
    size = len(records)
    return FamilyMetrics(family, size, len(quarters), float(Fraction(size, len(quarters))), stealth, len(deltas))


def family_metrics(records: Mapping[str, Iterable]) -> list[FamilyMetrics]:
    """``records`` maps family -> its SampleRecords (anything with first_seen / dex_date)."""
    return [_metrics(fam, list(recs)) for fam, recs in sorted(records.items())]


def _rank_value(m: FamilyMetrics, key: RankKey):
    return {
        RankKey.LARGEST: m.size,
        RankKey.PREVALENT: m.quarters_active,
        RankKey.VIRAL: Fraction(m.size, m.quarters_active),
        RankKey.STEALTHY: m.stealth,
    }[key]


def top_families(metrics: Iterable[FamilyMetrics], key, k: int) -> list[FamilyMetrics]:
    if k < 1:
        raise ValueError("k must be >= 1")
    key = RankKey(key.upper() if isinstance(key, str) else key)
    pool = [m for m in metrics if _rank_value(m, key) is not None]
    pool.sort(key=lambda m: m.family)
    pool.sort(key=lambda m: _rank_value(m, key), reverse=True)
    return pool[:k]


# -- timeline ----------------------------------------------------------------

@dataclass(frozen=True)
class SampleFeatures:
    first_seen: datetime
    tokens: frozenset = frozenset()  # framework APIs invoked anywhere in the sample
    categories: frozenset = frozenset()


def is_category(feature: str) -> bool:
    return bool(_CATEGORY.match(feature))


def has_feature(sample: SampleFeatures, feature: str) -> bool:
    if is_category(feature):
        return feature in sample.categories
    suffix = "." + feature
    return any(t == feature or t.endswith(suffix) for t in sample.tokens)


@dataclass
class QuarterSeries:
    feature: str
    cutoff: float
    points: list  # (quarter index, fraction of active families exhibiting the feature)
    fit: Optional[tuple] = None  # (slope per quarter, intercept at the first point)
    active_families: dict = field(default_factory=dict)  # quarter -> count
    single_sample_quarters: list = field(default_factory=list)  # (quarter label, family)

    def rows(self) -> list[tuple[str, float]]:
        return [(quarter_label(q), y) for q, y in self.points]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "cutoff": self.cutoff,
            "points": [{"quarter": quarter_label(q), "fraction": y, "active_families": self.active_families[q]}
                       for q, y in self.points],
            "fit": None if self.fit is None else {"slope": self.fit[0], "intercept": self.fit[1]},
            "single_sample_quarters": [list(x) for x in self.single_sample_quarters],
        }


def quarterly_prevalence(corpus: Mapping[str, Iterable[SampleFeatures]], feature: str, cutoff=0.90) -> QuarterSeries:
    """Share of quarter-active families in which enough of that quarter's samples carry ``feature``.

    The cutoff is applied to the family's samples first seen in the quarter.
    """
    by_quarter: dict = {}
    for fam in sorted(corpus):
        for s in corpus[fam]:
            by_quarter.setdefault(quarter_index(s.first_seen), {}).setdefault(fam, []).append(s)
    points, active, singles = [], {}, []
    for q in sorted(by_quarter):
        fams = by_quarter[q]
        hits = 0
        for fam in sorted(fams):
            samples = fams[fam]
            if len(samples) == 1:
                singles.append((quarter_label(q), fam))
            carrying = sum(1 for s in samples if has_feature(s, feature))
            if carrying >= threshold(cutoff, len(samples)):
                hits += 1
        active[q] = len(fams)
        points.append((q, float(Fraction(hits, len(fams)))))
    fit = None
    if len(points) >= 2:
        q0 = points[0][0]
        fit = linear_fit([(q - q0, y) for q, y in points])
    return QuarterSeries(feature, float(cutoff), points, fit, active, singles)


def linear_fit(points: Iterable[tuple]) -> tuple[float, float]:
    """Ordinary least squares ``y = slope * x + intercept``, computed exactly in rationals."""
    pts = [(Fraction(x), Fraction(y)) for x, y in points]
    if len(pts) < 2:
        raise RiderscopeError("FIT_DEGENERATE", "need at least two points")
    n = len(pts)
    mx = sum(x for x, _ in pts) / n
    my = sum(y for _, y in pts) / n
    sxx = sum((x - mx) ** 2 for x, _ in pts)
    if sxx == 0:
        raise RiderscopeError("FIT_DEGENERATE", "all x values are equal")
    sxy = sum((x - mx) * (y - my) for x, y in pts)
    slope = sxy / sxx
    return float(slope), float(my - slope * mx)
