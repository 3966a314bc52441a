"""End-to-end acceptance checks; run directly or through pytest."""
import random
import sys
import time
from collections import Counter
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from types import SimpleNamespace

import pytest

from conftest import ACCEPTANCE_RESULTS, manifest_rows, score, truth_rider_prints
from riderscope.analytics import RankKey, family_metrics, linear_fit, parse_quarter, quarter_label, top_families
from riderscope.cfg import fingerprint_module
from riderscope.dex.parser import parse_dex
from riderscope.dex.rewrite import rename_identifiers
from riderscope.diff import build_profile, rider_set
from riderscope.elf import parse_elf_features
from riderscope.ingest import read_member, walk_archive
from riderscope.pipeline import PipelineConfig, load_profile, run_pipeline
from riderscope.resources import SCRIPT_VOCABULARY, extract_script_features, shell_tokens
from riderscope.store import Store
from riderscope.taxonomy import BEHAVIOR_CATEGORIES, api_category

from test_elf import SHARED, live_readelf, readelf_imports
from test_resources import HAND_COUNTS, SCRIPT
from test_taxonomy import WITNESSES

FIVE = {"seed": 2024, "families": [
    {"name": name, "carrier_count": 20, "rider_methods": k}
    for name, k in (("adrd", 10), ("basebridge", 12), ("dowgin", 15), ("fakeinst", 18), ("kuguo", 20))
]}


def record(cid: str, ok: bool, detail: str):
    ACCEPTANCE_RESULTS[cid] = (ok, detail)
    assert ok, detail


def recovery(manifest, truth, store):
    out = {}
    for fam, t in sorted(truth["families"].items()):
        out[fam] = score(load_profile(store, fam)["riders"], truth_rider_prints(manifest, t))
    return out


@pytest.fixture(scope="module")
def five(synth_factory, tmp_path_factory):
    manifest, truth = synth_factory(FIVE)
    store = Store(tmp_path_factory.mktemp("ac1"))
    t0 = time.perf_counter()
    run_pipeline(manifest, store, PipelineConfig(threads=1))
    return manifest, truth, store, time.perf_counter() - t0


def test_ac1_rider_recovery(five):
    manifest, truth, store, elapsed = five
    pr = recovery(manifest, truth, store)
    ok = all(v == (1.0, 1.0) for v in pr.values()) and elapsed < 60
    record("AC-1", ok, f"P/R per family {sorted(set(pr.values()))}, {elapsed:.1f}s for 100 samples")


def test_ac2_label_noise(synth_factory, tmp_path):
    spec = {"seed": 77, "families": [dict(f, label_noise_fraction=0.05) for f in FIVE["families"]]}
    manifest, truth = synth_factory(spec)
    store = Store(tmp_path)
    run_pipeline(manifest, store, PipelineConfig())
    pr = recovery(manifest, truth, store)
    foreign = sum(len(t["foreign_samples"]) for t in truth["families"].values())
    worst_p = min(p for p, _ in pr.values())
    worst_r = min(r for _, r in pr.values())
    record("AC-2", foreign == 5 and worst_r == 1.0 and worst_p >= 0.99,
           f"{foreign} mislabeled samples, min recall {worst_r}, min precision {worst_p}")


def brute_force(fam: dict, cutoff) -> set:
    n = len(fam)
    out = set()
    for m in set().union(*fam.values()):
        holders = sum(1 for s in fam.values() if m in s)
        if Fraction(holders, n) >= Fraction(str(cutoff)):
            out.add(m)
    return out


def test_ac3_oracle_equivalence():
    rng = random.Random(3)
    cutoffs = (0.2, 0.45, 0.7, 0.9, 1.0)
    mismatches = nonmonotone = 0
    for _ in range(100):
        n = rng.randint(1, 10)
        universe = rng.randint(1, 50)
        fam = {f"s{i}": {f"m{rng.randrange(universe)}" for _ in range(rng.randint(0, universe))} for i in range(n)}
        prof = build_profile("f", fam, min_family_size=1)
        sets = [rider_set(prof, c) for c in cutoffs]
        mismatches += sum(s != brute_force(fam, c) for s, c in zip(sets, cutoffs))
        nonmonotone += sum(not b <= a for a, b in zip(sets, sets[1:]))
    record("AC-3", mismatches == 0 and nonmonotone == 0,
           f"100 families x {len(cutoffs)} cutoffs: {mismatches} mismatches, {nonmonotone} monotonicity breaks")


def test_ac4_renaming_invariance(five):
    manifest, truth, _, _ = five
    rows = manifest_rows(manifest)
    total = same = leaked = 0
    for sid in sorted(rows)[::10]:
        apk = manifest.parent / rows[sid]["path"]
        for exe in walk_archive(apk)[0]:
            data = read_member(apk, exe.member_path)
            before = fingerprint_module(parse_dex(data))
            after = fingerprint_module(parse_dex(rename_identifiers(data, seed=len(sid))))
            total += len(before)
            # class order changes with the new names, so match up fingerprints as multisets
            same += sum((Counter(p.fingerprint for p in before) & Counter(p.fingerprint for p in after)).values())
            leaked += len({p.class_name for p in before} & {p.class_name for p in after})
    record("AC-4", total > 0 and same == total and leaked == 0,
           f"{same}/{total} fingerprints unchanged; {leaked} original class names survived renaming")


def test_ac5_early_stage(synth_factory, tmp_path):
    spec = {"seed": 5, "families": [
        {"name": "clone", "carrier_count": 10, "rider_methods": 10, "clone": {"shared": 80, "unique": 0}},
        {"name": "edge90", "carrier_count": 10, "rider_methods": 10, "clone": {"shared": 80, "unique": 1}},
        {"name": "share89", "carrier_count": 11, "rider_methods": 10, "clone": {"shared": 79, "unique": 1}},
    ]}
    manifest, _ = synth_factory(spec)
    store = Store(tmp_path)
    _, summary = run_pipeline(manifest, store, PipelineConfig())
    shape = {}
    for fam in ("clone", "edge90", "share89"):
        p = load_profile(store, fam)
        full = sum(1 for m in p["methods"].values() if m["count"] == p["size"])
        shape[fam] = (full, p["total_distinct_methods"], p["early_stage"], store.exists(f"reports/{fam}.json"))
    ok = (shape["clone"] == (90, 90, True, False) and shape["edge90"] == (90, 100, True, False)
          and shape["share89"] == (89, 100, False, True) and summary["early_stage"] == ["clone", "edge90"])
    record("AC-5", ok, f"(shared, total, flagged, reported): {shape}")


def test_ac6_taxonomy_coverage():
    produced = {api_category(api) for api in WITNESSES.values()}
    exemplars = {
        "java.lang.System.loadLibrary": "JAVA_NATIVE",
        "dalvik.system.DexClassLoader.<init>": "DALVIK_SYSTEM",
        "java.lang.Runtime.exec": "JAVA_EXEC",
        "java.lang.reflect.Method.invoke": "JAVA_REFLECTION",
        "javax.crypto.Cipher.getInstance": "JAVAX_CRYPTO",
    }
    wrong = {api: api_category(api) for api, cat in exemplars.items() if api_category(api) != cat}
    names = set(BEHAVIOR_CATEGORIES)
    record("AC-6", len(names) == 36 and produced == names and not wrong,
           f"{len(produced)}/{len(names)} categories produced, exemplar mismatches {wrong}")


def _rec(first_seen: str, days: float):
    seen = datetime.fromisoformat(first_seen).replace(tzinfo=timezone.utc)
    return SimpleNamespace(first_seen=seen, dex_date=seen - timedelta(days=days))


def test_ac7_family_metrics():
    corpus = {
        # 6 samples over 3 quarters, deltas 10,20,30,40,50,60 days
        "alpha": [_rec(d, k) for d, k in zip(
            ["2012-01-05", "2012-02-01", "2012-04-01", "2012-05-09", "2012-07-01", "2012-09-30"],
            [10, 20, 30, 40, 50, 60])],
        # 4 samples in one quarter, deltas 1.5 days each
        "beta": [_rec(f"2013-0{m}-10", 1.5) for m in (1, 2, 3, 3)],
        # 8 samples over 8 quarters, deltas 0 and 100 alternating
        "gamma": [_rec(f"{2012 + i // 4}-{3 * (i % 4) + 1:02d}-15", 100 * (i % 2)) for i in range(8)],
        # 5 samples over 2 quarters, delta 0.25 days
        "delta": [_rec(d, 0.25) for d in ("2014-12-31", "2015-01-01", "2015-01-02", "2015-02-02", "2015-03-31")],
    }
    hand = {  # size, quarters, virality, stealth
        "alpha": (6, 3, 2.0, 35.0),
        "beta": (4, 1, 4.0, 1.5),
        "gamma": (8, 8, 1.0, 50.0),
        "delta": (5, 2, 2.5, 0.25),
    }
    metrics = family_metrics(corpus)
    by = {m.family: m for m in metrics}
    values_ok = all(
        (by[f].size, by[f].quarters_active) == h[:2]
        and abs(by[f].virality - h[2]) <= 1e-12 and abs(by[f].stealth - h[3]) <= 1e-12
        for f, h in hand.items())
    expected = {
        RankKey.LARGEST: ["gamma", "alpha", "delta", "beta"],
        RankKey.PREVALENT: ["gamma", "alpha", "delta", "beta"],
        RankKey.VIRAL: ["beta", "delta", "alpha", "gamma"],
        RankKey.STEALTHY: ["gamma", "alpha", "beta", "delta"],
    }
    got = {k: [m.family for m in top_families(metrics, k, 4)] for k in expected}
    record("AC-7", values_ok and got == expected, f"metrics exact: {values_ok}, rankings: {got == expected}")


def _window(a: str, b: str) -> list:
    return [quarter_label(q) for q in range(parse_quarter(a), parse_quarter(b) + 1)]


DRIFT = {"seed": 13, "families": [
    {"name": "bg1", "quarters": _window("2012Q4", "2015Q4"), "carrier_count": 26,
     "rider_methods": [{"apis": ["android.widget.Toast.makeText"]}]},
    {"name": "bg2", "quarters": _window("2012Q4", "2015Q4"), "carrier_count": 26,
     "rider_methods": [{"apis": ["android.webkit.WebView.loadUrl"]}]},
    {"name": "smsfam", "quarters": _window("2012Q4", "2014Q2"), "carrier_count": 14,
     "rider_methods": [{"apis": ["android.telephony.SmsManager.sendTextMessage"]}]},
    {"name": "crypt1", "quarters": _window("2013Q3", "2015Q4"), "carrier_count": 20,
     "rider_methods": [{"apis": ["javax.crypto.Cipher.getInstance"]}]},
    {"name": "crypt2", "quarters": _window("2014Q3", "2015Q4"), "carrier_count": 12,
     "rider_methods": [{"apis": ["javax.crypto.spec.SecretKeySpec.<init>"]}]},
    {"name": "crypt3", "quarters": _window("2015Q2", "2015Q4"), "carrier_count": 9,
     "rider_methods": [{"apis": ["javax.crypto.Cipher.doFinal"]}]},
]}


def designed_series(feature_fams: set) -> list:
    """Hand oracle: feature families active in the quarter over all active families."""
    out = []
    for q in _window("2012Q4", "2015Q4"):
        active = [f["name"] for f in DRIFT["families"] if q in f["quarters"]]
        hits = sum(1 for f in active if f in feature_fams)
        out.append((q, float(Fraction(hits, len(active)))))
    return out


def closed_form(points):
    n = len(points)
    sx = sum(x for x, _ in points)
    sy = sum(y for _, y in points)
    sxx = sum(x * x for x, _ in points)
    sxy = sum(x * y for x, y in points)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    return slope, (sy - slope * sx) / n


def test_ac8_timeline(synth_factory, tmp_path):
    manifest, _ = synth_factory(DRIFT)
    store = Store(tmp_path)
    run_pipeline(manifest, store, PipelineConfig())
    tl = store.read_json("analytics/timelines.json")
    series = {f: [(p["quarter"], p["fraction"]) for p in tl[f]["points"]] for f in ("SMS", "JAVAX_CRYPTO")}
    shapes_ok = (series["SMS"] == designed_series({"smsfam"})
                 and series["JAVAX_CRYPTO"] == designed_series({"crypt1", "crypt2", "crypt3"}))
    slopes = {f: tl[f]["fit"]["slope"] for f in series}
    signs_ok = slopes["SMS"] < 0 < slopes["JAVAX_CRYPTO"]
    worst = 0.0
    for f, pts in series.items():
        xy = [(i, y) for i, (_, y) in enumerate(pts)]
        for got, ref in zip(linear_fit(xy), closed_form(xy)):
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    rng = random.Random(8)
    for _ in range(200):
        xy = [(i, rng.gauss(0, 1)) for i in range(rng.randint(2, 30))]
        for got, ref in zip(linear_fit(xy), closed_form(xy)):
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
    record("AC-8", shapes_ok and signs_ok and worst <= 1e-9,
           f"series exact: {shapes_ok}, slopes {slopes}, max OLS relative error {worst:.2e}")


COMMON_IMPORTS = {"abort", "memcpy", "open", "kill", "ioctl"}


def test_ac9_elf_features():
    bad, seen = [], set()
    for path in SHARED:
        imports, needed = readelf_imports(live_readelf(path))
        feats = parse_elf_features(path.read_bytes())
        seen |= feats.imported_functions & COMMON_IMPORTS
        if (feats.imported_functions, feats.needed_libraries) != (imports, needed):
            bad.append(path.name)
    layouts = {(f.elf_class, f.big_endian) for f in (parse_elf_features(p.read_bytes()) for p in SHARED)}
    record("AC-9", not bad and len(layouts) == 4,
           f"{len(SHARED) - len(bad)}/{len(SHARED)} binaries match readelf over {len(layouts)} class/endian layouts; "
           f"table names present: {sorted(seen)}")


def test_ac10_script_features():
    counts = extract_script_features(SCRIPT).keyword_counts
    got = {k: counts.get(k, 0) for k in HAND_COUNTS}
    tokenizable = all(shell_tokens(kw) == [kw] for kw in SCRIPT_VOCABULARY)
    record("AC-10", got == HAND_COUNTS and tokenizable,
           f"counts {got} vs hand {HAND_COUNTS}; {len(SCRIPT_VOCABULARY)} keywords tokenizable: {tokenizable}")


def test_ac11_resource_cutoff(synth_factory, tmp_path):
    spec = {"seed": 31, "families": [
        {"name": "at30", "carrier_count": 100, "rider_methods": 3,
         "resources": [{"kind": "elf", "count": 30, "imports": ["ioctl"]}]},
        {"name": "at29", "carrier_count": 100, "rider_methods": 3,
         "resources": [{"kind": "elf", "count": 29, "imports": ["ioctl"]}]},
    ]}
    manifest, truth = synth_factory(spec)
    store = Store(tmp_path)
    run_pipeline(manifest, store, PipelineConfig(threads=4))
    got = {f: [r["seen_in"] for r in store.read_json(f"resources/{f}.json")["common"]] for f in ("at30", "at29")}
    record("AC-11", got == {"at30": [30], "at29": []}, f"common resources seen_in: {got}")


def test_ac12_determinism(five, tmp_path):
    manifest = five[0]
    stores = {}
    for threads in (1, 8):
        st = Store(tmp_path / f"t{threads}")
        run_pipeline(manifest, st, PipelineConfig(threads=threads))
        stores[threads] = {rel: st.path(rel).read_bytes() for rel in st.files() + ["index.json"]}
    diff = sorted(set(stores[1]) ^ set(stores[8]) | {k for k in stores[1] if stores[1][k] != stores[8].get(k)})
    reports = sum(1 for k in stores[1] if k.startswith("reports/"))
    record("AC-12", not diff and reports > 0, f"{len(stores[1])} files, {reports} reports, differing: {diff}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
