"""Corpus loading: manifest parsing, magic-number typing and recursive
archive walking (nested APK/DEX members surface as deeper executables)."""
from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import re
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from riderscope.errors import Diagnostic, RiderscopeError

log = logging.getLogger(__name__)

NEST_SEP = "!"
DEFAULT_MAX_DEPTH = 3
DEFAULT_MAX_MEMBER_SIZE = 256 * 1024 * 1024
MAIN_EXECUTABLE = "classes.dex"
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


class FileType(str, enum.Enum):
    DALVIK_EXEC = "DALVIK_EXEC"
    APP_ARCHIVE = "APP_ARCHIVE"
    ELF_EXEC = "ELF_EXEC"
    TEXT_EXEC = "TEXT_EXEC"
    OTHER = "OTHER"


def classify_magic(prefix: bytes) -> FileType:
    prefix = bytes(prefix[:8])
    if prefix.startswith(b"\x7fELF"):
        return FileType.ELF_EXEC
    if len(prefix) == 8 and prefix[:4] == b"dex\n" and prefix[4:7].isdigit() and prefix[7] == 0:
        return FileType.DALVIK_EXEC
    if prefix.startswith(b"PK\x03\x04"):
        return FileType.APP_ARCHIVE
    if prefix.startswith(b"#!"):
        return FileType.TEXT_EXEC
    return FileType.OTHER


def printable_ratio(data: bytes) -> float:
    text = data.decode("utf-8", errors="replace")
    body = [c for c in text if not c.isspace()]
    if not body:
        return 1.0
    return sum(1 for c in body if c.isprintable() and c != "�") / len(body)


def is_mostly_text(data: bytes, threshold: float = 0.9) -> bool:
    return printable_ratio(data) >= threshold


def classify_member(path: str, data: bytes) -> FileType:
    kind = classify_magic(data[:8])
    if kind is FileType.OTHER and path.lower().endswith(".sh") and data and is_mostly_text(data):
        return FileType.TEXT_EXEC
    return kind


@dataclass(frozen=True)
class ExecutableRef:
    parent_sample: str
    member_path: str
    content_digest: str
    depth: int
    size: int = 0
    modified: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "member_path": self.member_path, "content_digest": self.content_digest,
            "depth": self.depth, "size": self.size, "modified": self.modified,
        }


@dataclass(frozen=True)
class ResourceRef:
    parent_sample: str
    member_path: str
    file_type: FileType
    content_digest: str
    depth: int
    size: int = 0
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "member_path": self.member_path, "file_type": self.file_type.value,
            "content_digest": self.content_digest, "depth": self.depth, "size": self.size,
            "flags": list(self.flags),
        }


@dataclass
class SampleRecord:
    sample_id: str
    family: Optional[str]
    first_seen: datetime
    dex_date: Optional[datetime]
    source_path: str
    av_labels: dict = field(default_factory=dict)
    executables: list = field(default_factory=list)
    resources: list = field(default_factory=list)
    malformed: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "family": self.family,
            "first_seen": format_ts(self.first_seen),
            "dex_date": format_ts(self.dex_date) if self.dex_date else None,
            "source_path": self.source_path,
            "av_labels": dict(sorted(self.av_labels.items())),
            "malformed": self.malformed,
            "flags": list(self.flags),
            "executables": [e.to_dict() for e in self.executables],
            "resources": [r.to_dict() for r in self.resources],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        sid = d["sample_id"]
        return cls(
            sample_id=sid,
            family=d.get("family"),
            first_seen=parse_ts(d["first_seen"]),
            dex_date=parse_ts(d["dex_date"]) if d.get("dex_date") else None,
            source_path=d["source_path"],
            av_labels=dict(d.get("av_labels") or {}),
            executables=[ExecutableRef(sid, **e) for e in d.get("executables", [])],
            resources=[
                ResourceRef(sid, r["member_path"], FileType(r["file_type"]), r["content_digest"], r["depth"],
                            r.get("size", 0), tuple(r.get("flags", ())))
                for r in d.get("resources", [])
            ],
            malformed=d.get("malformed", False),
            flags=list(d.get("flags", [])),
        )


def parse_ts(value) -> datetime:
    if not isinstance(value, str):
        raise ValueError(f"timestamp must be a string, got {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S") + (
        f".{ts.microsecond:06d}" if ts.microsecond else "") + "Z"


def normalize_family_name(name: str) -> str:
    return name.strip().lower()


# -- manifest ----------------------------------------------------------------

def load_manifest(path) -> tuple[list[SampleRecord], list[Diagnostic]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise RiderscopeError("MANIFEST_IO", f"cannot read manifest {path}: {exc}") from exc
    records: list[SampleRecord] = []
    diagnostics: list[Diagnostic] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = _parse_manifest_line(line)
        except (ValueError, TypeError, KeyError) as exc:
            diagnostics.append(Diagnostic("MANIFEST_SCHEMA", f"line {lineno}: {exc}", line=lineno))
            continue
        if rec.sample_id in seen:
            diagnostics.append(Diagnostic(
                "MANIFEST_SCHEMA", f"line {lineno}: duplicate sample {rec.sample_id}", line=lineno,
                sample_id=rec.sample_id))
            continue
        seen.add(rec.sample_id)
        records.append(rec)
    return records, diagnostics


def _parse_manifest_line(line: str) -> SampleRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    digest = obj.get("sha256")
    if not isinstance(digest, str) or not _HEX64.match(digest.lower()):
        raise ValueError("missing or malformed sha256")
    for key in ("first_seen", "path"):
        if key not in obj:
            raise ValueError(f"missing required key {key!r}")
    try:
        first_seen = parse_ts(obj["first_seen"])
    except ValueError:
        raise ValueError(f"unparseable first_seen {obj['first_seen']!r}") from None
    dex_date = None
    if obj.get("dex_date") is not None:
        try:
            dex_date = parse_ts(obj["dex_date"])
        except ValueError:
            raise ValueError(f"unparseable dex_date {obj['dex_date']!r}") from None
    labels = obj.get("av_labels") or {}
    if not isinstance(labels, dict):
        raise ValueError("av_labels must be an object")
    family = obj.get("family")
    if family is not None and (not isinstance(family, str) or not family.strip()):
        raise ValueError("family must be a non-empty string")
    if family is None and not labels:
        raise ValueError("neither family nor av_labels given")
    if not isinstance(obj["path"], str):
        raise ValueError("path must be a string")
    return SampleRecord(
        sample_id=digest.lower(),
        family=normalize_family_name(family) if family else None,
        first_seen=first_seen,
        dex_date=dex_date,
        source_path=obj["path"],
        av_labels={str(k): str(v) for k, v in labels.items()},
    )


# -- archives ----------------------------------------------------------------

def _zip_time(info: zipfile.ZipInfo) -> Optional[str]:
    try:
        return format_ts(datetime(*info.date_time, tzinfo=timezone.utc))
    except ValueError:
        return None


def walk_archive(
    source,
    max_depth: int = DEFAULT_MAX_DEPTH,
    sample_id: str = "",
    max_member_size: int = DEFAULT_MAX_MEMBER_SIZE,
    diagnostics: Optional[list] = None,
) -> tuple[list[ExecutableRef], list[ResourceRef]]:
    """Type and digest every member; expand nested archives up to ``max_depth``.

    ``source`` is a path or the archive bytes. Member-level problems become
    flags or diagnostics; only an unreadable outer container raises.
    """
    executables: list[ExecutableRef] = []
    resources: list[ResourceRef] = []
    diags = diagnostics if diagnostics is not None else []
    try:
        if isinstance(source, (bytes, bytearray)):
            zf = zipfile.ZipFile(io.BytesIO(source))
        else:
            zf = zipfile.ZipFile(source)
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise RiderscopeError("ARCHIVE_CORRUPT", f"{source if isinstance(source, (str, Path)) else 'archive'}: {exc}",
                              sample_id=sample_id) from exc
    with zf:
        _walk(zf, "", 0, max_depth, sample_id, max_member_size, executables, resources, diags)
    return executables, resources


def _read_member(zf: zipfile.ZipFile, info: zipfile.ZipInfo, limit: int) -> bytes:
    if info.file_size > limit:
        raise RiderscopeError("ARCHIVE_CORRUPT", f"{info.filename}: {info.file_size} bytes exceeds ceiling {limit}")
    with zf.open(info) as fh:
        data = fh.read(limit + 1)
    if len(data) > limit:
        raise RiderscopeError("ARCHIVE_CORRUPT", f"{info.filename}: decompressed size exceeds ceiling {limit}")
    return data


def _walk(zf, prefix, depth, max_depth, sample_id, limit, executables, resources, diags):
    infos = sorted((i for i in zf.infolist() if not i.is_dir()), key=lambda i: i.filename.encode("utf-8"))
    for info in infos:
        member_path = prefix + info.filename
        try:
            data = _read_member(zf, info, limit)
        except RiderscopeError as exc:
            diags.append(Diagnostic("ARCHIVE_CORRUPT", f"{member_path}: {exc.message}", sample_id=sample_id))
            continue
        except (zipfile.BadZipFile, OSError, EOFError, NotImplementedError, RuntimeError, ValueError) as exc:
            diags.append(Diagnostic("ARCHIVE_CORRUPT", f"{member_path}: {exc}", sample_id=sample_id))
            continue
        kind = classify_member(info.filename, data)
        digest = hashlib.sha256(data).hexdigest()
        if kind is FileType.DALVIK_EXEC:
            executables.append(ExecutableRef(sample_id, member_path, digest, depth, len(data), _zip_time(info)))
            continue
        flags: tuple = ()
        nested = None
        if kind is FileType.APP_ARCHIVE:
            if depth + 1 > max_depth:
                flags = ("DEPTH_EXCEEDED",)
                diags.append(Diagnostic("DEPTH_EXCEEDED", f"{member_path}: not expanded beyond depth {max_depth}",
                                        sample_id=sample_id))
            else:
                try:
                    nested = zipfile.ZipFile(io.BytesIO(data))
                except (zipfile.BadZipFile, ValueError) as exc:
                    flags = ("ARCHIVE_CORRUPT",)
                    diags.append(Diagnostic("ARCHIVE_CORRUPT", f"{member_path}: {exc}", sample_id=sample_id))
        resources.append(ResourceRef(sample_id, member_path, kind, digest, depth, len(data), flags))
        if nested is not None:
            with nested:
                _walk(nested, member_path + NEST_SEP, depth + 1, max_depth, sample_id, limit,
                      executables, resources, diags)


def read_member(archive, member_path: str, max_member_size: int = DEFAULT_MAX_MEMBER_SIZE) -> bytes:
    """Fetch the bytes of a (possibly nested) member, e.g. ``assets/x.apk!classes.dex``."""
    parts = member_path.split(NEST_SEP)
    data = None
    src = archive
    for part in parts:
        zf = zipfile.ZipFile(io.BytesIO(src) if isinstance(src, (bytes, bytearray)) else src)
        with zf:
            data = _read_member(zf, zf.getinfo(part), max_member_size)
        src = data
    return data


# -- corpus ------------------------------------------------------------------

def resolve_path(record: SampleRecord, base_dir) -> Path:
    p = Path(record.source_path)
    return p if p.is_absolute() else Path(base_dir) / p


def ingest_sample(record: SampleRecord, base_dir, max_depth: int = DEFAULT_MAX_DEPTH,
                  max_member_size: int = DEFAULT_MAX_MEMBER_SIZE) -> tuple[SampleRecord, list[Diagnostic]]:
    diags: list[Diagnostic] = []
    path = resolve_path(record, base_dir)
    try:
        exes, res = walk_archive(path, max_depth, record.sample_id, max_member_size, diags)
    except RiderscopeError as exc:
        diags.append(Diagnostic("ARCHIVE_CORRUPT", exc.message, sample_id=record.sample_id))
        return replace(record, executables=[], resources=[], malformed=True, flags=["ARCHIVE_CORRUPT"]), diags
    flags = []
    main = next((e for e in exes if e.depth == 0 and e.member_path == MAIN_EXECUTABLE), None)
    if main is None:
        flags.append("NO_MAIN_EXECUTABLE")
        diags.append(Diagnostic("ARCHIVE_CORRUPT", "no main Dalvik executable", sample_id=record.sample_id))
    dex_date = record.dex_date
    if dex_date is None and main is not None and main.modified:
        dex_date = parse_ts(main.modified)
        flags.append("DEX_DATE_FROM_ARCHIVE")
    return replace(record, executables=exes, resources=res, dex_date=dex_date,
                   malformed=main is None, flags=flags), diags


def ingest_corpus(manifest_path, threads: int = 1, max_depth: int = DEFAULT_MAX_DEPTH):
    """Load the manifest and walk every archive. Returns (records, diagnostics)."""
    records, diags = load_manifest(manifest_path)
    base = Path(manifest_path).resolve().parent
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda r: ingest_sample(r, base, max_depth), records))
    else:
        results = [ingest_sample(r, base, max_depth) for r in records]
    out = []
    for rec, d in results:
        out.append(rec)
        diags.extend(d)
    return out, diags
