"""Behavior categories for framework APIs and per-family behavior profiles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional

from riderscope.errors import RiderscopeError

NONE = "NONE"
ANDROID = "ANDROID"

# the 36 rows of the macro behavior table
BEHAVIOR_CATEGORIES = (
    "ANDROID", "APP", "CONTENT", "OS", "WIDGET", "VIEW", "UTIL", "DATABASE", "WEBKIT", "NET",
    "GRAPHICS", "JAVA_REFLECTION", "TEXT", "SUPPORT", "ANIMATION", "TELEPHONY", "MEDIA", "PROVIDER",
    "LOCATION", "JAVAX_CRYPTO", "HARDWARE", "JAVA_NATIVE", "PREFERENCE", "ACCOUNTS", "JAVA_EXEC",
    "DALVIK_SYSTEM", "DEBUG", "SPEECH", "BLUETOOTH", "SMS", "SMSMESSAGE", "RENDERSCRIPT", "GESTURE",
    "SECURITY", "SERVICE", "NFC",
)

# exact fully-qualified methods; these beat any package rule
DEFAULT_METHOD_RULES = {
    "java.lang.System.loadLibrary": "JAVA_NATIVE",
    "java.lang.Runtime.loadLibrary": "JAVA_NATIVE",
    "java.lang.Runtime.exec": "JAVA_EXEC",
    "java.lang.Class.getClassLoader": "JAVA_REFLECTION",
}

# dotted prefixes; the longest matching prefix wins
DEFAULT_PREFIX_RULES = {
    "java.lang.ProcessBuilder.": "JAVA_EXEC",
    "dalvik.system.": "DALVIK_SYSTEM",
    "java.lang.reflect.": "JAVA_REFLECTION",
    "javax.crypto.": "JAVAX_CRYPTO",
    "java.io.": "IO",
    "android.telephony.SmsManager.": "SMS",
    "android.telephony.gsm.SmsManager.": "SMS",
    "android.telephony.SmsMessage.": "SMSMESSAGE",
    "android.telephony.gsm.SmsMessage.": "SMSMESSAGE",
    "android.telephony.": "TELEPHONY",
    "android.support.": "SUPPORT",
    "android.os.Debug.": "DEBUG",
}


@dataclass
class Taxonomy:
    method_rules: dict = field(default_factory=lambda: dict(DEFAULT_METHOD_RULES))
    prefix_rules: dict = field(default_factory=lambda: dict(DEFAULT_PREFIX_RULES))

    def __post_init__(self):
        self._prefixes = sorted(self.prefix_rules.items(), key=lambda kv: (-len(kv[0]), kv[0]))

    @classmethod
    def from_file(cls, path) -> "Taxonomy":
        """Load overrides: ``{"methods": {name: CAT}, "prefixes": {prefix: CAT}}`` merged over defaults."""
        cfg = json.loads(Path(path).read_text())
        methods = dict(DEFAULT_METHOD_RULES)
        methods.update(cfg.get("methods", {}))
        prefixes = dict(DEFAULT_PREFIX_RULES)
        prefixes.update(cfg.get("prefixes", {}))
        return cls(methods, prefixes)

    def category(self, api_name: str) -> str:
        """Most specific category of a dotted API name, or ``NONE``."""
        if api_name in self.method_rules:
            return self.method_rules[api_name]
        for prefix, cat in self._prefixes:
            if api_name.startswith(prefix):
                return cat
        parts = api_name.split(".")
        if parts[0] == "android" and len(parts) >= 2:
            # a capitalised second segment is a class in the root package
            if len(parts) >= 3 and parts[1][:1].islower():
                return parts[1].upper()
            return ANDROID
        return NONE

    def categories(self, api_name: str) -> frozenset:
        """Category plus the ANDROID umbrella for ``android.*`` names."""
        cat = self.category(api_name)
        if cat == NONE:
            return frozenset()
        if api_name.startswith("android."):
            return frozenset((cat, ANDROID))
        return frozenset((cat,))

    def known_categories(self) -> frozenset:
        return frozenset(BEHAVIOR_CATEGORIES) | frozenset(self.method_rules.values()) | frozenset(
            self.prefix_rules.values())


DEFAULT_TAXONOMY = Taxonomy()


def api_category(api_name: str, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> str:
    return taxonomy.category(api_name)


@dataclass
class BehaviorProfile:
    family: str
    categories: dict  # category -> number of rider methods carrying it
    witnesses: dict  # category -> sorted [(fingerprint hex, api)]
    basis: Optional[float] = None

    def present(self) -> frozenset:
        return frozenset(self.categories)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "basis": self.basis,
            "categories": {c: self.categories[c] for c in sorted(self.categories)},
            "witnesses": {c: [list(w) for w in self.witnesses[c]] for c in sorted(self.witnesses)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorProfile":
        return cls(d["family"], dict(d["categories"]),
                   {c: [tuple(w) for w in ws] for c, ws in d["witnesses"].items()}, d.get("basis"))


def behavior_profile(
    riders: Iterable,
    annotations: Mapping,
    family: str = "",
    basis: Optional[float] = None,
    taxonomy: Taxonomy = DEFAULT_TAXONOMY,
) -> BehaviorProfile:
    """``annotations`` maps fingerprint (hex or object) to its API token set."""
    counts: dict = {}
    witnesses: dict = {}
    for fp in sorted(riders, key=str):
        if fp not in annotations:
            raise RiderscopeError("MISSING_ANNOTATION", f"no stored annotations for fingerprint {fp}")
        method_cats = {}
        for api in sorted(annotations[fp]):
            for cat in taxonomy.categories(api):
                method_cats.setdefault(cat, api)
        for cat, api in method_cats.items():
            counts[cat] = counts.get(cat, 0) + 1
            witnesses.setdefault(cat, []).append((str(fp), api))
    return BehaviorProfile(family, counts, {c: sorted(w) for c, w in witnesses.items()}, basis)


def corpus_behavior_table(profiles: list, sample_counts: Mapping) -> dict:
    """category -> (% of families, % of samples) over the given profiles."""
    if not profiles:
        raise ValueError("profiles must be non-empty")
    total_fam = len(profiles)
    total_samples = sum(sample_counts[p.family] for p in profiles)
    fam: dict = {}
    smp: dict = {}
    for p in profiles:
        for cat in p.categories:
            fam[cat] = fam.get(cat, 0) + 1
            smp[cat] = smp.get(cat, 0) + sample_counts[p.family]
    table = {}
    for cat in fam:
        pf = float(Fraction(100 * fam[cat], total_fam))
        ps = float(Fraction(100 * smp[cat], total_samples)) if total_samples else 0.0
        table[cat] = (pf, ps)
    return dict(sorted(table.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[0])))
