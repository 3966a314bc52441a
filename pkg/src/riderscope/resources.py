"""Embedded non-Dalvik executables: exact-hash prevalence and per-file features."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from riderscope.diff import threshold
from riderscope.elf import ElfFeatureSet, parse_elf_features
from riderscope.errors import RiderscopeError
from riderscope.ingest import FileType, SampleRecord, is_mostly_text

EXECUTABLE_TYPES = (FileType.ELF_EXEC, FileType.TEXT_EXEC)

# bash commands and keys searched in text executables
SCRIPT_VOCABULARY = (
    "/system/bin/su", "/system/bin/am", "/system/app", "/sdcard", "/data/data", "install", "chown",
    "mkdir", "grep", "/system/bin/sh", "/system/bin/pm", "dalvik-cache", "getprop", "mkpartfs",
    "remount", "chmod", "mount", "root", "Superuser.apk", "/system/xbin", "/etc/init.d", "busybox",
    "setprop", "toolbox", "tune2fs", "fstab", "start", "rm",
)

_SEPARATORS = re.compile(r"[\s;|&]+")


@dataclass(frozen=True)
class ScriptFeatureSet:
    resource: str
    keyword_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"resource": self.resource, "keyword_counts": dict(sorted(self.keyword_counts.items()))}


def shell_tokens(text: str) -> list[str]:
    return [t for t in _SEPARATORS.split(text) if t]


def is_pathlike(keyword: str) -> bool:
    """Keywords that normally occur inside a longer path or file name."""
    return any(c in keyword for c in "/.-")


def extract_script_features(data: bytes, vocabulary: Iterable[str] = SCRIPT_VOCABULARY,
                            digest: Optional[str] = None) -> ScriptFeatureSet:
    data = bytes(data)
    if not is_mostly_text(data):
        raise RiderscopeError("SCRIPT_BINARYISH", "resource is not mostly printable text")
    digest = digest or hashlib.sha256(data).hexdigest()
    tokens = shell_tokens(data.decode("utf-8", errors="replace"))
    exact = Counter(tokens)
    counts = {}
    for kw in dict.fromkeys(vocabulary):
        n = sum(t.count(kw) for t in tokens) if is_pathlike(kw) else exact.get(kw, 0)
        if n:
            counts[kw] = n
    return ScriptFeatureSet(digest, counts)


def load_vocabulary(path) -> tuple:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    return tuple(dict.fromkeys(words))


def executable_digests(record: SampleRecord) -> frozenset:
    """Digests of the ELF and text executables anywhere inside a sample."""
    return frozenset(r.content_digest for r in record.resources if r.file_type in EXECUTABLE_TYPES)


def common_resources(family: str, resources: Mapping[str, Iterable[str]], cutoff=0.30,
                     min_family_size: Optional[int] = None) -> frozenset:
    """Digests present in at least ``ceil(cutoff * n)`` of the family's samples (exact hashes only)."""
    n = len(resources)
    if min_family_size is not None and n < min_family_size:
        raise RiderscopeError("FAMILY_TOO_SMALL", f"{family}: {n} samples < minimum {min_family_size}")
    if n == 0:
        return frozenset()
    counts: Counter = Counter()
    for digests in resources.values():
        counts.update(set(digests))
    need = threshold(cutoff, n)
    return frozenset(d for d, k in counts.items() if k >= need)


def resource_features(data: bytes, file_type: FileType, vocabulary=SCRIPT_VOCABULARY,
                      digest: Optional[str] = None) -> ElfFeatureSet | ScriptFeatureSet:
    if file_type is FileType.ELF_EXEC:
        return parse_elf_features(data, digest)
    if file_type is FileType.TEXT_EXEC:
        return extract_script_features(data, vocabulary, digest)
    raise ValueError(f"no feature extractor for {file_type}")
