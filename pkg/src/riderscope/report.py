"""Per-family case-study reports.

The machine-readable report is built first; the human-readable text is a
pure rendering of it, so both always carry the same data.
"""
from __future__ import annotations

from typing import Optional

from riderscope.errors import RiderscopeError
from riderscope.taxonomy import DEFAULT_TAXONOMY, Taxonomy


def _fmt_cutoff(c) -> str:
    return f"{float(c):.2f}"


def emit_case_report(family: str, profile: Optional[dict], behaviors: Optional[dict],
                     resources: Optional[dict] = None, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> tuple[dict, str]:
    """Build the report for one analyzed family. Returns (report dict, rendered text)."""
    if profile is None or behaviors is None:
        raise RiderscopeError("FAMILY_NOT_ANALYZED", f"family {family!r} has no stored profile/behaviors")
    if profile.get("early_stage"):
        raise RiderscopeError("FAMILY_NOT_ANALYZED", f"family {family!r} is early-stage; riders are not reported")
    methods = profile["methods"]
    entries = []
    for fp in profile["riders"]:
        m = methods[fp]
        cats = set()
        for api in m["apis"]:
            cats |= taxonomy.categories(api)
        entries.append({
            "method_id": m["id"],
            "fingerprint": fp,
            "seen_in": m["count"],
            "class_name": m["class"],
            "method_name": m["method"],
            "apis": list(m["apis"]),
            "behaviors": sorted(cats),
        })
    entries.sort(key=lambda e: (-e["seen_in"], e["class_name"], e["method_name"], e["fingerprint"]))
    res_entries = []
    if resources:
        for r in resources.get("common", []):
            res_entries.append({k: r[k] for k in ("digest", "file_type", "seen_in", "member_path", "features")})
    report = {
        "family": family,
        "sample_count": profile["size"],
        "cutoff": profile["cutoff"],
        "methods": entries,
        "behaviors": dict(sorted(behaviors["categories"].items())),
        "resource_cutoff": resources.get("cutoff") if resources else None,
        "resources": res_entries,
    }
    return report, render_text(report)


def _set(items) -> str:
    return "{" + ", ".join(items) + "}"


def _features_line(features: Optional[dict]) -> str:
    if not features:
        return "features: none"
    if "error" in features:
        return f"features: unavailable ({features['error']})"
    if "imported_functions" in features:
        return (f"imports: {_set(features['imported_functions'])}; "
                f"needed: {_set(features['needed_libraries'])}; machine: {features['machine']}")
    counts = features.get("keyword_counts", {})
    return "keywords: " + _set(f"{k}={v}" for k, v in sorted(counts.items()))


def render_text(report: dict) -> str:
    n = report["sample_count"]
    cutoff = _fmt_cutoff(report["cutoff"])
    lines = [
        f"Family: {report['family']}",
        f"Samples: {n}",
        f"Cutoff: {cutoff}",
        f"Rider methods: {len(report['methods'])}",
        "",
    ]
    if not report["methods"]:
        lines += [f"no rider methods at cutoff {cutoff}", ""]
    for e in report["methods"]:
        lines += [
            f"Method-{e['method_id']}:",
            f"  Seen in: {e['seen_in']} apps (out of {n})",
            f"  Class Name: {e['class_name']}",
            f"  Method name: {e['method_name']}",
            f"  Behaviors: {_set(e['behaviors'])}",
            "",
        ]
    summary = ", ".join(f"{c} ({k})" for c, k in report["behaviors"].items())
    lines.append(f"Behavior summary: {{{summary}}}")
    if report["resource_cutoff"] is not None:
        lines.append(f"Common resources at cutoff {_fmt_cutoff(report['resource_cutoff'])}: {len(report['resources'])}")
        for r in report["resources"]:
            lines.append(f"  {r['digest'][:16]} {r['file_type']} {r['member_path']} seen in {r['seen_in']} apps "
                         f"(out of {n}); {_features_line(r['features'])}")
    return "\n".join(lines) + "\n"
