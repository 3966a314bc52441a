"""End-to-end batch pipeline over a manifest, writing every stage into a :class:`Store`.

Stages run sequentially; inside a stage, per-sample or per-family work runs on
a thread pool and results are merged in input order, so the store bytes do
not depend on the thread count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from riderscope import analytics, diff, labels, resources
from riderscope.cfg import DEFAULT_API_PREFIXES, fingerprint_module
from riderscope.dex.parser import parse_dex
from riderscope.diff import CutoffConfig
from riderscope.errors import Diagnostic, RiderscopeError
from riderscope.ingest import (DEFAULT_MAX_DEPTH, MAIN_EXECUTABLE, SampleRecord, ingest_corpus,
                               read_member, resolve_path)
from riderscope.report import emit_case_report
from riderscope.store import Store, family_file
from riderscope.taxonomy import DEFAULT_TAXONOMY, Taxonomy, behavior_profile, corpus_behavior_table

log = logging.getLogger(__name__)

UNLABELED = labels.SINGLETON
DEFAULT_TIMELINE = ("SmsManager.sendTextMessage", "SMS", "JAVAX_CRYPTO", "DALVIK_SYSTEM", "JAVA_NATIVE", "JAVA_EXEC")
STAGES = ("ingest", "labels", "fingerprint", "diff", "behaviors", "resources", "analytics", "report")


@dataclass
class PipelineConfig:
    cutoffs: CutoffConfig = field(default_factory=CutoffConfig)
    threads: int = 1
    max_depth: int = DEFAULT_MAX_DEPTH
    stopwords: frozenset = labels.DEFAULT_STOPWORDS
    min_agreement: int = 2
    taxonomy: Taxonomy = DEFAULT_TAXONOMY
    vocabulary: tuple = resources.SCRIPT_VOCABULARY
    api_prefixes: tuple = DEFAULT_API_PREFIXES
    exceptional_edges: bool = False
    timeline_features: tuple = DEFAULT_TIMELINE
    top_k: int = 10


def _map(fn: Callable, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _stage_error(stage: str, exc: RiderscopeError) -> RiderscopeError:
    exc.context.setdefault("stage", stage)
    return exc


def _diag_rows(diags: Iterable[Diagnostic], stage: str) -> list:
    return [dict(d.to_dict(), stage=stage) for d in diags]


# -- helpers over the store --------------------------------------------------

def load_samples(store: Store) -> list[SampleRecord]:
    """Ingested records with label-derived families applied once the labels stage has run."""
    records = [SampleRecord.from_dict(d) for d in store.read_jsonl("samples.jsonl")]
    if store.exists("labels.jsonl"):
        derived = {r["sample_id"]: r["family"] for r in store.read_jsonl("labels.jsonl") if r["source"] == "labels"}
        for rec in records:
            if rec.sample_id in derived:
                rec.family = derived[rec.sample_id]
                rec.flags.append("FAMILY_FROM_LABELS")
    return records


def _base_dir(store: Store) -> Path:
    return Path(store.read_json("corpus.json")["base_dir"])


def family_of(rec: SampleRecord) -> str:
    return rec.family or UNLABELED


def _families(store: Store) -> dict:
    return store.read_json("families.json")


def load_profile(store: Store, family: str) -> Optional[dict]:
    rel = f"profiles/{family_file(family)}.json"
    return store.read_json(rel) if store.exists(rel) else None


def load_prints(store: Store, family: str) -> list:
    return store.read_jsonl(f"prints/{family_file(family)}.jsonl")


# -- stages ------------------------------------------------------------------

def stage_ingest(store: Store, manifest, cfg: PipelineConfig) -> None:
    manifest = Path(manifest).resolve()
    records, diags = ingest_corpus(manifest, cfg.threads, cfg.max_depth)
    store.write_json("corpus.json", {"manifest": str(manifest), "base_dir": str(manifest.parent)})
    store.write_jsonl("samples.jsonl", [r.to_dict() for r in records])
    store.write_jsonl("diagnostics/ingest.jsonl", _diag_rows(diags, "ingest"))
    log.info("ingest: %d samples, %d diagnostics", len(records), len(diags))


def stage_labels(store: Store, cfg: PipelineConfig) -> None:
    rows = []
    for d in store.read_jsonl("samples.jsonl"):
        rec = SampleRecord.from_dict(d)
        if rec.family is None:
            family, source = labels.normalize_family(rec.av_labels, cfg.stopwords, cfg.min_agreement), "labels"
        else:
            family, source = rec.family, "manifest"
        rows.append({"sample_id": rec.sample_id, "family": family, "source": source})
    store.write_jsonl("labels.jsonl", rows)


def _fingerprint_sample(rec: SampleRecord, base: Path, cfg: PipelineConfig):
    diags: list = []
    if rec.malformed:
        return {"sample_id": rec.sample_id, "error": "ARCHIVE_CORRUPT"}, diags
    archive = resolve_path(rec, base)
    entries = set()
    for exe in sorted(rec.executables, key=lambda e: (e.depth, e.member_path)):
        try:
            module = parse_dex(read_member(archive, exe.member_path))
        except (RiderscopeError, OSError, KeyError, ValueError) as exc:
            code = getattr(exc, "code", "DEX_TRUNCATED")
            diags.append(Diagnostic(code, f"{exe.member_path}: {exc}", sample_id=rec.sample_id, stage="fingerprint"))
            if exe.depth == 0 and exe.member_path == MAIN_EXECUTABLE:
                return {"sample_id": rec.sample_id, "error": code}, diags
            continue
        for d in module.diagnostics:
            diags.append(Diagnostic(d.code, f"{exe.member_path}: {d.message}", sample_id=rec.sample_id,
                                    stage="fingerprint"))
        local: list = []
        for p in fingerprint_module(module, cfg.api_prefixes, cfg.exceptional_edges, local):
            entries.add((p.fingerprint.hex, p.class_name, p.method_name, p.tokens))
        diags += [Diagnostic(d.code, d.message, sample_id=rec.sample_id, stage="fingerprint") for d in local]
    methods = [[fp, cls, name, list(toks)] for fp, cls, name, toks in sorted(entries)]
    return {"sample_id": rec.sample_id, "methods": methods}, diags


def stage_fingerprint(store: Store, cfg: PipelineConfig) -> None:
    records = load_samples(store)
    base = _base_dir(store)
    results = _map(lambda r: _fingerprint_sample(r, base, cfg), records, cfg.threads)
    by_family: dict = {}
    diags: list = []
    for rec, (row, d) in zip(records, results):
        by_family.setdefault(family_of(rec), []).append(row)
        diags += d
    store.clear("prints")
    for fam in sorted(by_family):
        rows = sorted(by_family[fam], key=lambda r: r["sample_id"])
        store.write_jsonl(f"prints/{family_file(fam)}.jsonl", rows)
    store.write_json("prints/index.json", {fam: family_file(fam) for fam in sorted(by_family)})
    store.write_jsonl("diagnostics/fingerprint.jsonl", [d.to_dict() for d in diags])


def _profile_family(fam: str, rows: list, cfg: PipelineConfig) -> dict:
    ok = [r for r in rows if "error" not in r]
    prints = {r["sample_id"]: {m[0] for m in r["methods"]} for r in ok}
    profile = diff.build_profile(fam, prints, cfg.cutoffs.min_family_size)
    reps: dict = {}
    for r in ok:
        for fp, cls, name, apis in r["methods"]:
            cand = (cls, name, tuple(apis))
            if fp not in reps or cand < reps[fp]:
                reps[fp] = cand
    methods = {}
    for i, fp in enumerate(sorted(profile.prevalence), start=1):
        cls, name, apis = reps[fp]
        methods[fp] = {"id": i, "count": profile.prevalence[fp], "class": cls, "method": name, "apis": list(apis)}
    c = cfg.cutoffs
    ledger = {label: len(diff.rider_set(profile, v)) for label, v in c.ledger().items()}
    return {
        "family": fam,
        "size": profile.size,
        "samples": sorted(profile.samples),
        "early_stage": diff.is_early_stage(profile, c.early_stage_fraction),
        "total_distinct_methods": profile.total_distinct_methods,
        "cutoff": c.hco,
        "riders": sorted(diff.rider_set(profile, c.hco)),
        "ledger": ledger,
        "curve": [[share, count] for share, count in diff.prevalence_curve(profile)],
        "methods": methods,
    }


def stage_diff(store: Store, cfg: PipelineConfig) -> None:
    index = store.read_json("prints/index.json")
    retained, small, unlabeled = [], {}, 0
    candidates = []
    for fam in sorted(index):
        rows = load_prints(store, fam)
        ok = sum(1 for r in rows if "error" not in r)
        if fam == UNLABELED:
            unlabeled = len(rows)
        elif ok < cfg.cutoffs.min_family_size:
            small[fam] = ok
        else:
            candidates.append((fam, rows))
    profiles = _map(lambda fr: _profile_family(fr[0], fr[1], cfg), candidates, cfg.threads)
    store.clear("profiles")
    csv_rows = []
    for p in profiles:
        store.write_json(f"profiles/{family_file(p['family'])}.json", p)
        retained.append(p["family"])
        for fp in p["riders"]:
            m = p["methods"][fp]
            csv_rows.append([p["family"], fp, m["count"], p["size"], m["class"], m["method"]])
    store.write_csv("riders.csv", ["family", "fingerprint", "seen_in", "family_size", "class", "method"], csv_rows)
    store.write_json("families.json", {
        "retained": retained,
        "early_stage": [p["family"] for p in profiles if p["early_stage"]],
        "excluded_small": small,
        "unlabeled_samples": unlabeled,
    })


def _reportable(store: Store) -> list:
    fams = _families(store)
    early = set(fams["early_stage"])
    return [f for f in fams["retained"] if f not in early]


def stage_behaviors(store: Store, cfg: PipelineConfig) -> None:
    store.clear("behaviors")
    profiles, sizes = [], {}
    for fam in _reportable(store):
        p = load_profile(store, fam)
        annotations = {fp: p["methods"][fp]["apis"] for fp in p["riders"]}
        bp = behavior_profile(p["riders"], annotations, fam, p["cutoff"], cfg.taxonomy)
        store.write_json(f"behaviors/{family_file(fam)}.json", bp.to_dict())
        profiles.append(bp)
        sizes[fam] = p["size"]
    rows = []
    if profiles:
        for cat, (pf, ps) in corpus_behavior_table(profiles, sizes).items():
            rows.append([cat, f"{pf:.2f}", f"{ps:.2f}"])
    store.write_csv("behaviors.csv", ["category", "families_pct", "samples_pct"], rows)


def _resource_family(fam: str, p: dict, by_id: dict, base: Path, cfg: PipelineConfig) -> dict:
    members = {sid: resources.executable_digests(by_id[sid]) for sid in p["samples"]}
    common = resources.common_resources(fam, members, cfg.cutoffs.resource_cutoff)
    out = []
    for digest in sorted(common):
        holders = sorted(
            (r.member_path, sid, r.file_type)
            for sid in p["samples"] for r in by_id[sid].resources if r.content_digest == digest
        )
        path, sid, ftype = holders[0]
        seen = len({h[1] for h in holders})
        try:
            data = read_member(resolve_path(by_id[sid], base), path)
            features = resources.resource_features(data, ftype, cfg.vocabulary, digest).to_dict()
        except RiderscopeError as exc:
            features = {"error": exc.code}
        out.append({"digest": digest, "file_type": ftype.value, "seen_in": seen, "member_path": path,
                    "features": features})
    return {"family": fam, "cutoff": cfg.cutoffs.resource_cutoff, "size": p["size"], "common": out}


def stage_resources(store: Store, cfg: PipelineConfig) -> None:
    by_id = {r.sample_id: r for r in load_samples(store)}
    base = _base_dir(store)
    fams = _families(store)["retained"]
    results = _map(lambda f: _resource_family(f, load_profile(store, f), by_id, base, cfg), fams, cfg.threads)
    store.clear("resources")
    rows = []
    for res in results:
        store.write_json(f"resources/{family_file(res['family'])}.json", res)
        for r in res["common"]:
            feats = r["features"]
            if "imported_functions" in feats:
                detail = " ".join(feats["imported_functions"])
            elif "keyword_counts" in feats:
                detail = " ".join(f"{k}={v}" for k, v in sorted(feats["keyword_counts"].items()))
            else:
                detail = feats.get("error", "")
            rows.append([res["family"], r["digest"], r["file_type"], r["seen_in"], res["size"], r["member_path"], detail])
    store.write_csv("resources.csv", ["family", "digest", "file_type", "seen_in", "family_size", "member_path",
                                      "features"], rows)


def sample_features(store: Store, fam: str, records: dict, taxonomy: Taxonomy) -> list:
    out = []
    for row in load_prints(store, fam):
        if "error" in row:
            continue
        tokens = frozenset(api for m in row["methods"] for api in m[3])
        cats = frozenset(c for api in tokens for c in taxonomy.categories(api))
        out.append(analytics.SampleFeatures(records[row["sample_id"]].first_seen, tokens, cats))
    return out


def stage_analytics(store: Store, cfg: PipelineConfig) -> None:
    records = {r.sample_id: r for r in load_samples(store)}
    fams = _families(store)
    early = set(fams["early_stage"])
    groups = {f: [records[s] for s in load_profile(store, f)["samples"]] for f in fams["retained"]}
    metrics = analytics.family_metrics(groups)
    store.clear("analytics")
    store.write_csv("analytics/metrics.csv",
                    ["family", "size", "quarters_active", "virality", "stealth_days", "early_stage"],
                    [[m.family, m.size, m.quarters_active, repr(m.virality),
                      "" if m.stealth is None else repr(m.stealth), int(m.family in early)] for m in metrics])
    top = {}
    if metrics:
        for key in analytics.RankKey:
            top[key.value.lower()] = [m.family for m in analytics.top_families(metrics, key, cfg.top_k)]
    store.write_json("analytics/top.json", top)
    corpus = {f: sample_features(store, f, records, cfg.taxonomy) for f in fams["retained"]}
    timelines = {}
    for feature in cfg.timeline_features:
        series = analytics.quarterly_prevalence(corpus, feature, cfg.cutoffs.hco)
        timelines[feature] = series.to_dict()
        write_timeline_csv(store, f"analytics/timeline/{family_file(feature)}.csv", series)
    store.write_json("analytics/timelines.json", timelines)


def write_timeline_csv(store: Store, rel: str, series: analytics.QuarterSeries) -> None:
    rows = []
    q0 = series.points[0][0] if series.points else 0
    for q, y in series.points:
        fit = "" if series.fit is None else repr(series.fit[0] * (q - q0) + series.fit[1])
        rows.append([analytics.quarter_label(q), repr(y), series.active_families[q], fit])
    store.write_csv(rel, ["quarter", "fraction", "active_families", "fit"], rows)


def stage_report(store: Store, cfg: PipelineConfig) -> None:
    store.clear("reports")
    for fam in _reportable(store):
        write_report(store, fam, cfg)


def write_report(store: Store, fam: str, cfg: PipelineConfig) -> tuple[dict, str]:
    stem = family_file(fam)
    beh = f"behaviors/{stem}.json"
    res = f"resources/{stem}.json"
    report, text = emit_case_report(
        fam, load_profile(store, fam), store.read_json(beh) if store.exists(beh) else None,
        store.read_json(res) if store.exists(res) else None, cfg.taxonomy)
    store.write_json(f"reports/{stem}.json", report)
    store.write_text(f"reports/{stem}.txt", text)
    return report, text


def write_summary(store: Store, cfg: PipelineConfig) -> dict:
    records = load_samples(store)
    fams = _families(store)
    prints_malformed = 0
    for fam in store.read_json("prints/index.json"):
        prints_malformed += sum(1 for r in load_prints(store, fam) if "error" in r and r["error"] != "ARCHIVE_CORRUPT")
    manifest_diags = sum(1 for d in store.read_jsonl("diagnostics/ingest.jsonl") if d["code"] == "MANIFEST_SCHEMA")
    riders = {}
    for fam in fams["retained"]:
        p = load_profile(store, fam)
        riders[fam] = {"size": p["size"], "riders": len(p["riders"]), "early_stage": p["early_stage"]}
    c = cfg.cutoffs
    summary = {
        "samples": len(records),
        "manifest_rejected": manifest_diags,
        "malformed": sum(1 for r in records if r.malformed) + prints_malformed,
        "families": {
            "total": len(fams["retained"]) + len(fams["excluded_small"]),
            "retained": len(fams["retained"]),
            "excluded_small": len(fams["excluded_small"]),
            "early_stage": len(fams["early_stage"]),
        },
        "excluded_small": fams["excluded_small"],
        "early_stage": fams["early_stage"],
        "unlabeled_samples": fams["unlabeled_samples"],
        "riders": riders,
        "config": {"HCO": c.hco, "MCO": c.mco, "LCO": c.lco, "GCO": c.gco, "min_family_size": c.min_family_size,
                   "early_stage_fraction": c.early_stage_fraction, "resource_cutoff": c.resource_cutoff},
    }
    store.write_json("summary.json", summary)
    return summary


def run_stage(name: str, store: Store, cfg: PipelineConfig, manifest=None) -> None:
    fn = {
        "labels": stage_labels, "fingerprint": stage_fingerprint, "diff": stage_diff,
        "behaviors": stage_behaviors, "resources": stage_resources, "analytics": stage_analytics,
        "report": stage_report,
    }
    try:
        if name == "ingest":
            stage_ingest(store, manifest, cfg)
        else:
            fn[name](store, cfg)
    except RiderscopeError as exc:
        store.abandon()
        raise _stage_error(name, exc)
    store.sweep()
    store.reindex()


def run_pipeline(manifest, store, cfg: Optional[PipelineConfig] = None) -> tuple[int, dict]:
    """Run every stage; returns (exit status, run summary)."""
    cfg = cfg or PipelineConfig()
    store = store if isinstance(store, Store) else Store(store)
    for name in STAGES:
        log.info("stage %s", name)
        run_stage(name, store, cfg, manifest)
    summary = write_summary(store, cfg)
    store.reindex()
    return 0, summary
