"""On-disk intermediate store: a directory of canonical JSON, JSONL and CSV files.

Every write is deterministic (sorted keys, fixed float repr, no timestamps),
so re-running a stage over unchanged inputs leaves the bytes untouched.
``index.json`` maps every stored file to its SHA-256 digest.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
from pathlib import Path
from typing import Iterable

ENV_VAR = "RIDERSCOPE_STORE"
DEFAULT_STORE = "riderscope-store"
INDEX = "index.json"


def default_store_path() -> Path:
    return Path(os.environ.get(ENV_VAR) or DEFAULT_STORE)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def family_file(family: str) -> str:
    """Filesystem-safe, collision-free file stem for a family name."""
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in family)
    if safe != family:
        safe += "-" + hashlib.sha256(family.encode()).hexdigest()[:8]
    return safe


class Store:
    def __init__(self, root):
        self.root = Path(root)
        self._stale: set = set()

    def path(self, rel: str) -> Path:
        return self.root / rel

    def exists(self, rel: str) -> bool:
        return self.path(rel).exists()

    def _write(self, rel: str, text: str) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        self._stale.discard(rel)
        if p.exists() and p.read_bytes() == data:
            return
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, p)

    def write_json(self, rel: str, obj) -> None:
        self._write(rel, dumps(obj))

    def read_json(self, rel: str):
        return json.loads(self.path(rel).read_text(encoding="utf-8"))

    def write_jsonl(self, rel: str, rows: Iterable) -> None:
        self._write(rel, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows))

    def read_jsonl(self, rel: str) -> list:
        text = self.path(rel).read_text(encoding="utf-8")
        return [json.loads(line) for line in text.splitlines() if line.strip()]

    def write_csv(self, rel: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)
        self._write(rel, buf.getvalue())

    def write_text(self, rel: str, text: str) -> None:
        self._write(rel, text)

    def clear(self, rel_dir: str) -> None:
        """Mark a stage directory for rewriting; files not written again are dropped by ``sweep``."""
        p = self.path(rel_dir)
        if p.is_dir():
            self._stale |= {f.relative_to(self.root).as_posix() for f in p.rglob("*") if f.is_file()}

    def sweep(self) -> None:
        for rel in sorted(self._stale):
            self.path(rel).unlink(missing_ok=True)
        self._stale.clear()

    def abandon(self) -> None:
        self._stale.clear()

    def files(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.relative_to(self.root).as_posix() for p in self.root.rglob("*")
                      if p.is_file() and p.name != INDEX and not p.name.endswith(".tmp"))

    def reindex(self) -> dict:
        index = {rel: hashlib.sha256(self.path(rel).read_bytes()).hexdigest() for rel in self.files()}
        self.write_json(INDEX, index)
        return index

    def copy_to(self, other: "Store") -> "Store":
        if other.root.resolve() == self.root.resolve():
            return other
        if self.root.exists():
            shutil.copytree(self.root, other.root, dirs_exist_ok=True)
        return other
