import random
from collections import namedtuple
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riderscope.analytics import (
    FamilyMetrics,
    RankKey,
    SampleFeatures,
    family_metrics,
    has_feature,
    linear_fit,
    parse_quarter,
    quarter_index,
    quarter_label,
    quarter_start,
    quarterly_prevalence,
    top_families,
)
from riderscope.errors import RiderscopeError

Rec = namedtuple("Rec", "first_seen dex_date")


def utc(*a):
    return datetime(*a, tzinfo=timezone.utc)


def test_quarter_boundary():
    assert quarter_index(utc(2014, 4, 1)) == quarter_index(utc(2014, 3, 31, 23, 59, 59)) + 1
    assert quarter_label(quarter_index(utc(2014, 4, 1))) == "2014Q2"
    assert quarter_label(quarter_index(utc(2014, 3, 31, 23, 59, 59, 999999))) == "2014Q1"
    assert parse_quarter("2012Q4") == quarter_index(utc(2012, 12, 31))
    assert quarter_start(parse_quarter("2013Q3")) == utc(2013, 7, 1)


def test_quarter_uses_utc():
    plus2 = timezone(timedelta(hours=2))
    assert quarter_label(quarter_index(datetime(2014, 4, 1, 1, 0, tzinfo=plus2))) == "2014Q1"


def test_metrics_examples():
    months = [1, 4, 7, 10]
    recs = [Rec(utc(2014, months[i % 4], 5), utc(2014, 1, 1)) for i in range(20)]
    (m,) = family_metrics({"f": recs})
    assert (m.size, m.quarters_active, m.virality) == (20, 4, 5.0)
    (z,) = family_metrics({"z": [Rec(utc(2014, 1, 1), utc(2014, 1, 1))]})
    assert z.stealth == 0.0
    (s,) = family_metrics({"s": [Rec(utc(2014, 2, 11), utc(2014, 2, 1)), Rec(utc(2014, 2, 21), utc(2014, 2, 1))]})
    assert s.stealth == 15.0


def test_stealth_negative_and_missing():
    (neg,) = family_metrics({"n": [Rec(utc(2014, 1, 1), utc(2014, 1, 3, 12))]})
    assert neg.stealth == -2.5
    (none,) = family_metrics({"x": [Rec(utc(2014, 1, 1), None)]})
    assert none.stealth is None and none.stealth_samples == 0
    with pytest.raises(ValueError):
        family_metrics({"e": []})


def M(name, size=1, quarters=1, stealth=0.0):
    return FamilyMetrics(name, size, quarters, size / quarters, stealth)


def test_largest_tie_break():
    ms = [M("a", 5), M("b", 9), M("c", 9)]
    assert [m.family for m in top_families(ms, RankKey.LARGEST, 2)] == ["b", "c"]


def test_stealthy():
    ms = [M("a", stealth=30.0), M("b", stealth=2.0), M("c", stealth=None)]
    assert [m.family for m in top_families(ms, "stealthy", 1)] == ["a"]
    assert [m.family for m in top_families(ms, "STEALTHY", 5)] == ["a", "b"]


def test_viral():
    ms = [M("a", 40, 4), M("b", 30, 2)]
    assert [m.family for m in top_families(ms, RankKey.VIRAL, 2)] == ["b", "a"]


def test_prevalent_and_bad_k():
    ms = [M("a", 3, 3), M("b", 50, 1)]
    assert [m.family for m in top_families(ms, RankKey.PREVALENT, 1)] == ["a"]
    with pytest.raises(ValueError):
        top_families(ms, RankKey.LARGEST, 0)


metric_lists = st.lists(
    st.builds(M, st.text("abcdef", min_size=1, max_size=3), st.integers(1, 30), st.integers(1, 6),
              st.one_of(st.none(), st.floats(-50, 500))),
    max_size=12, unique_by=lambda m: m.family)


@given(metric_lists, st.sampled_from(list(RankKey)), st.integers(1, 12), st.randoms())
def test_ranking_permutation_invariant(ms, key, k, rnd):
    shuffled = list(ms)
    rnd.shuffle(shuffled)
    assert top_families(ms, key, k) == top_families(shuffled, key, k)


# -- timeline ---------------------------------------------------------------

def samples(quarter, n, carrying, token="android.telephony.SmsManager.sendTextMessage", cats=("SMS",)):
    start = quarter_start(parse_quarter(quarter))
    out = []
    for i in range(n):
        has = i < carrying
        out.append(SampleFeatures(start + timedelta(days=i % 80), frozenset([token] if has else []),
                                  frozenset(cats if has else ())))
    return out


def test_prevalence_examples():
    s = quarterly_prevalence({"f": samples("2014Q1", 10, 9)}, "SMS", 0.9)
    assert s.points == [(parse_quarter("2014Q1"), 1.0)]
    assert s.fit is None
    s = quarterly_prevalence({"f": samples("2014Q1", 10, 8)}, "SMS", 0.9)
    assert s.points == [(parse_quarter("2014Q1"), 0.0)]


def test_token_feature_suffix_match():
    sf = SampleFeatures(utc(2014, 1, 1), frozenset({"android.telephony.SmsManager.sendTextMessage"}))
    assert has_feature(sf, "SmsManager.sendTextMessage")
    assert has_feature(sf, "android.telephony.SmsManager.sendTextMessage")
    assert not has_feature(sf, "Manager.sendTextMessage.x")
    assert not has_feature(sf, "SMS")


def test_denominator_is_active_families():
    corpus = {
        "a": samples("2014Q1", 10, 10) + samples("2014Q2", 10, 10),
        "b": samples("2014Q1", 10, 0),
    }
    s = quarterly_prevalence(corpus, "SMS", 0.9)
    assert s.rows() == [("2014Q1", 0.5), ("2014Q2", 1.0)]
    assert s.active_families == {parse_quarter("2014Q1"): 2, parse_quarter("2014Q2"): 1}
    assert s.fit == (0.5, 0.5)


def test_single_sample_quarter_flagged():
    corpus = {"a": samples("2014Q1", 1, 1), "b": samples("2014Q1", 5, 5)}
    s = quarterly_prevalence(corpus, "SMS", 0.9)
    assert s.single_sample_quarters == [("2014Q1", "a")]
    assert s.points[0][1] == 1.0


@settings(deadline=None)
@given(st.dictionaries(st.sampled_from("abcd"),
                       st.lists(st.tuples(st.sampled_from(["2013Q1", "2013Q2", "2013Q4"]), st.integers(1, 6),
                                          st.integers(0, 6)), max_size=3),
                       min_size=1),
       st.sampled_from([0.2, 0.5, 0.9, 1.0]))
def test_prevalence_bounds(spec, cutoff):
    corpus = {f: [s for q, n, c in parts for s in samples(q, n, min(c, n))] for f, parts in spec.items()}
    corpus = {f: v for f, v in corpus.items() if v}
    if not corpus:
        return
    s = quarterly_prevalence(corpus, "SMS", cutoff)
    qs = [q for q, _ in s.points]
    assert qs == sorted(set(qs))
    for q, y in s.points:
        assert 0.0 <= y <= 1.0
        active = sum(1 for v in corpus.values() if any(quarter_index(x.first_seen) == q for x in v))
        assert s.active_families[q] == active


# -- OLS ----------------------------------------------------------------------

@pytest.mark.parametrize("pts,expected", [
    ([(0, 0), (1, 1), (2, 2)], (1.0, 0.0)),
    ([(0, 1), (1, 1), (2, 1)], (0.0, 1.0)),
    ([(0, 0), (1, 2), (2, 2)], (1.0, 1 / 3)),
])
def test_fit_examples(pts, expected):
    slope, intercept = linear_fit(pts)
    assert slope == pytest.approx(expected[0], abs=1e-12)
    assert intercept == pytest.approx(expected[1], abs=1e-12)


def test_fit_degenerate():
    for pts in ([(1, 0), (1, 5)], [(0, 1)], []):
        with pytest.raises(RiderscopeError) as e:
            linear_fit(pts)
        assert e.value.code == "FIT_DEGENERATE"


def closed_form(pts):
    n = len(pts)
    sx = sum(x for x, _ in pts)
    sy = sum(y for _, y in pts)
    sxx = sum(x * x for x, _ in pts)
    sxy = sum(x * y for x, y in pts)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    return slope, (sy - slope * sx) / n


def sse(pts, a, b):
    return sum((y - (a * x + b)) ** 2 for x, y in pts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.floats(0, 1)), min_size=2, max_size=20)
       .filter(lambda p: len({x for x, _ in p}) >= 2), st.integers(0, 2 ** 32))
def test_ols_optimal(pts, seed):
    a, b = linear_fit(pts)
    ca, cb = closed_form(pts)
    assert a == pytest.approx(ca, rel=1e-9, abs=1e-12)
    assert b == pytest.approx(cb, rel=1e-9, abs=1e-12)
    best = sse(pts, a, b)
    rng = random.Random(seed)
    for _ in range(1000):
        da, db = rng.gauss(0, 0.1), rng.gauss(0, 0.1)
        assert best <= sse(pts, a + da, b + db) + 1e-12
