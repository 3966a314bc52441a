import json
from pathlib import Path

import pytest

from riderscope.dex.writer import ACC_PUBLIC, ACC_STATIC, DexBuilder, Insn, MethodSym

FIXTURES = Path(__file__).parent / "fixtures"

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def build_dex(methods, cls="Lcom/example/Sample;", version="035") -> bytes:
    """``methods`` maps method name -> list of Insn/Label."""
    b = DexBuilder(version)
    c = b.add_class(cls)
    for name, code in methods.items():
        c.add_method(name, code, access=ACC_PUBLIC | ACC_STATIC, registers=6)
    return b.build()


def call(api: str, op: str = "invoke-static") -> Insn:
    return Insn(op, ref=MethodSym.from_dotted(api))


@pytest.fixture(scope="session")
def synth_factory(tmp_path_factory):
    """Generate (and cache) a synthetic corpus per spec; returns (manifest, ground truth)."""
    from riderscope.synth import generate

    cache = {}

    def make(spec: dict):
        key = json.dumps(spec, sort_keys=True)
        if key not in cache:
            out = tmp_path_factory.mktemp("synth")
            manifest = generate(spec, out)
            cache[key] = (manifest, json.loads((out / "ground_truth.json").read_text()))
        return cache[key]

    return make


def manifest_rows(manifest) -> dict:
    rows = [json.loads(line) for line in Path(manifest).read_text().splitlines() if line.strip()]
    return {r["sha256"]: r for r in rows}


def truth_rider_prints(manifest, family_truth) -> set:
    """Fingerprints of the generator's core rider methods, taken straight from one genuine sample."""
    from riderscope.cfg import fingerprint_module
    from riderscope.dex.parser import parse_dex
    from riderscope.ingest import read_member, walk_archive

    rows = manifest_rows(manifest)
    foreign = set(family_truth["foreign_samples"])
    sid = next(s for s in family_truth["samples"] if s not in foreign)
    apk = Path(manifest).parent / rows[sid]["path"]
    wanted = {tuple(m) for m in family_truth["rider_methods"]}
    out = set()
    for exe in walk_archive(apk)[0]:
        for p in fingerprint_module(parse_dex(read_member(apk, exe.member_path))):
            if (p.class_name, p.method_name) in wanted:
                out.add(p.fingerprint.hex)
    assert len(out) == len(wanted)
    return out


def score(found, expected) -> tuple:
    """(precision, recall) of a recovered rider set."""
    found, expected = set(found), set(expected)
    tp = len(found & expected)
    precision = tp / len(found) if found else (1.0 if not expected else 0.0)
    recall = tp / len(expected) if expected else 1.0
    return precision, recall


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c.split("-")[1])):
        ok, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {cid}: {detail}")
