"""Synthetic repackaged-malware corpora with known ground truth.

Every family is a set of unique carrier apps, each piggybacked with the same
rider methods. The generator writes the app archives, a manifest and a
``ground_truth.json`` describing what a correct analysis must find.

Spec format (JSON)::

    {
      "seed": 7,
      "families": [{
        "name": "dowgin",
        "carrier_count": 20,
        "rider_methods": 15,                  # or [{"apis": ["android.telephony.SmsManager.sendTextMessage"]}, ...]
        "variants": [{"fraction": 0.6, "methods": 3}, {"fraction": 0.4, "methods": 2}],
        "label_noise_fraction": 0.05,
        "quarters": ["2014Q1", "2014Q2"],     # round-robin, or {"2014Q1": 12, "2014Q2": 8}
        "stealth_days": [0, 60],
        "resources": [{"kind": "elf", "count": 6, "imports": ["memcpy", "open"], "needed": ["libc.so"]},
                      {"kind": "script", "fraction": 0.5, "text": "mount -o remount,rw /system"}],
        "carrier_methods": [6, 12],
        "carrier_library": 0,                 # identical benign methods injected into every carrier
        "clone": null,                        # {"shared": 80, "unique": 1}: one carrier for all samples
        "incognito": false,                   # riders hidden in assets/payload.apk
        "av_labels": false,                   # manifest carries vendor labels instead of a family
        "omit_dex_date": false
      }]
    }
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import random
import zipfile
from dataclasses import dataclass, field
from datetime import timedelta
from fractions import Fraction
from pathlib import Path

from riderscope.analytics import parse_quarter, quarter_start
from riderscope.diff import as_fraction
from riderscope.dex.writer import ACC_PUBLIC, ACC_STATIC, DexBuilder, Insn, Label, MethodSym
from riderscope.elf import build_shared_object
from riderscope.errors import RiderscopeError
from riderscope.ingest import format_ts
from riderscope.taxonomy import DEFAULT_TAXONOMY

log = logging.getLogger(__name__)

TAG_BITS = 20

RIDER_API_POOL = (
    "android.telephony.SmsManager.sendTextMessage",
    "android.telephony.SmsManager.getDefault",
    "android.telephony.TelephonyManager.getDeviceId",
    "android.content.ContentResolver.query",
    "android.content.Context.getSystemService",
    "android.net.ConnectivityManager.getActiveNetworkInfo",
    "android.app.PendingIntent.getBroadcast",
    "android.location.LocationManager.getLastKnownLocation",
    "android.webkit.WebView.loadUrl",
    "android.database.sqlite.SQLiteDatabase.query",
    "android.util.Base64.decode",
    "java.lang.Runtime.exec",
    "java.lang.System.loadLibrary",
    "java.lang.reflect.Method.invoke",
    "javax.crypto.Cipher.getInstance",
    "dalvik.system.DexClassLoader.loadClass",
    "java.io.File.delete",
)

BENIGN_API_POOL = (
    "android.widget.TextView.setText",
    "android.view.View.setVisibility",
    "android.graphics.Bitmap.createBitmap",
    "android.text.TextUtils.isEmpty",
    "android.animation.ValueAnimator.start",
)

_FILLER = ("const/4", "const", "move", "add-int", "mul-int/lit8", "neg-int", "array-length", "cmpl-float")
_VENDOR_FORMATS = (
    ("AegisLab", "Trojan.AndroidOS.{n}.{l}"),
    ("Avira", "ANDROID/{N}.{L}.Gen"),
    ("ESET", "a variant of Android/{N}.{L}"),
    ("Sophos", "Andr/{N}-{L}"),
    ("Ikarus", "Adware.{N}"),
)


@dataclass
class _Method:
    class_descriptor: str
    name: str
    code: list
    apis: tuple = ()


@dataclass
class _State:
    rng: random.Random
    serial: int = 0
    carrier_seq: int = 0
    truth: dict = field(default_factory=dict)

    def next_serial(self) -> int:
        self.serial += 1
        if self.serial >= 1 << TAG_BITS:
            raise RiderscopeError("SYNTH_IO", "too many generated methods")
        return self.serial


def _tag(serial: int) -> list:
    # each bit becomes a move or an arithmetic instruction: unique block shape per method
    return [Insn("add-int/2addr" if serial >> b & 1 else "move", 0, 1) for b in range(TAG_BITS)]


def _filler(rng: random.Random, n: int) -> list:
    out = []
    for _ in range(n):
        op = rng.choice(_FILLER)
        if op == "const/4":
            out.append(Insn(op, rng.randrange(4), rng.randrange(-8, 8)))
        elif op == "const":
            out.append(Insn(op, rng.randrange(4), rng.getrandbits(32) - (1 << 31)))
        elif op in ("move", "neg-int", "array-length"):
            out.append(Insn(op, rng.randrange(4), rng.randrange(4)))
        elif op == "mul-int/lit8":
            out.append(Insn(op, rng.randrange(4), rng.randrange(4), rng.randrange(-128, 128)))
        else:
            out.append(Insn(op, rng.randrange(4), rng.randrange(4), rng.randrange(4)))
    return out


def _carrier_body(st: _State) -> list:
    """Random 1-8 block CFG with forward branches and no framework calls."""
    rng = st.rng
    nblocks = rng.randint(1, 8)
    code = _tag(st.next_serial()) + [Insn("const", 2, rng.getrandbits(32) - (1 << 31))]
    for b in range(nblocks):
        code.append(Label(f"b{b}"))
        code += _filler(rng, rng.randint(1, 6))
        if b == nblocks - 1:
            code.append(Insn("return-void"))
            break
        later = [f"b{k}" for k in range(b + 1, nblocks)]
        kind = rng.choice(("fall", "if", "goto", "switch") if len(later) > 1 else ("fall", "if", "goto"))
        if kind == "if":
            code.append(Insn(rng.choice(("if-eqz", "if-nez", "if-ltz")), rng.randrange(4), target=rng.choice(later)))
        elif kind == "goto":
            code.append(Insn("goto", target=rng.choice(later)))
        elif kind == "switch":
            picks = rng.sample(later, min(len(later), rng.randint(2, 3)))
            code.append(Insn("packed-switch", 0, targets=tuple(picks), keys=(rng.randrange(10),)))
    return code


def _api_body(st: _State, apis) -> list:
    code = _tag(st.next_serial()) + _filler(st.rng, st.rng.randint(0, 3))
    for api in apis:
        code.append(Insn("invoke-static", ref=MethodSym.from_dotted(api)))
    code.append(Insn("return-void"))
    return code


def _rider_specs(spec, rng: random.Random, pool=RIDER_API_POOL) -> list:
    if isinstance(spec, int):
        return [tuple(sorted(rng.sample(pool, rng.randint(1, 3)))) for _ in range(spec)]
    return [tuple(item["apis"]) for item in spec]


def _rider_methods(st: _State, owner: str, specs) -> list:
    return [_Method(owner, f"m{i}", _api_body(st, apis), tuple(apis)) for i, apis in enumerate(specs)]


def _carrier(st: _State, lo: int, hi: int) -> list:
    st.carrier_seq += 1
    pkg = f"Lorg/app{st.carrier_seq:05d}/"
    methods = []
    for i in range(st.rng.randint(lo, hi)):
        cls = f"{pkg}C{i % 3};"
        methods.append(_Method(cls, f"f{i}", _carrier_body(st)))
    return methods


def _dex(methods) -> bytes:
    builder = DexBuilder()
    by_class: dict = {}
    for m in methods:
        by_class.setdefault(m.class_descriptor, []).append(m)
    for cls in sorted(by_class):
        spec = builder.add_class(cls)
        for m in by_class[cls]:
            spec.add_method(m.name, m.code, access=ACC_PUBLIC | ACC_STATIC, registers=4)
    return builder.build()


def _zip(members: dict, date_time) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=date_time)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])
    return buf.getvalue()


def _quarter_plan(spec, n: int) -> list:
    q = spec.get("quarters") or ["2014Q1"]
    if isinstance(q, dict):
        plan = [parse_quarter(k) for k in sorted(q, key=parse_quarter) for _ in range(q[k])]
        if len(plan) != n:
            raise ValueError(f"quarter counts sum to {len(plan)}, expected {n}")
        return plan
    quarters = [parse_quarter(x) for x in q]
    return [quarters[i * len(quarters) // n] for i in range(n)]


def _resource_blob(res: dict) -> bytes:
    if res["kind"] == "elf":
        return build_shared_object(res.get("imports", ()), res.get("needed", ()), res.get("machine", 40),
                                   res.get("elf_class", 32), res.get("big_endian", False),
                                   res.get("comment", "").encode())
    if res["kind"] == "script":
        text = res.get("text", "#!/system/bin/sh\n")
        return text.encode() if text.endswith("\n") else (text + "\n").encode()
    raise ValueError(f"unknown resource kind {res['kind']!r}")


def _resource_count(res: dict, n: int) -> int:
    if "count" in res:
        return int(res["count"])
    return math.floor(as_fraction(res.get("fraction", 1.0)) * n)


def _av_labels(name: str, rng: random.Random) -> dict:
    picks = rng.sample(_VENDOR_FORMATS, rng.randint(3, len(_VENDOR_FORMATS)))
    letter = rng.choice("abc")  # variant suffixes the default stopwords absorb
    return {v: f.format(n=name.capitalize(), N=name.capitalize(), l=letter, L=letter.upper()) for v, f in sorted(picks)}


def _generate_family(st: _State, fam: dict, out: Path, defaults: dict) -> tuple[list, dict]:
    rng = st.rng
    name = fam["name"].lower()
    n = int(fam.get("carrier_count", 20))
    lo, hi = fam.get("carrier_methods", defaults.get("carrier_methods", (6, 12)))
    payload = f"Lcom/{name}/payload/"

    core = _rider_methods(st, f"{payload}Core;", _rider_specs(fam.get("rider_methods", 10), rng))
    variants = []
    for j, v in enumerate(fam.get("variants", ())):
        specs = _rider_specs(v.get("methods", 2), rng)
        variants.append((as_fraction(v["fraction"]), _rider_methods(st, f"{payload}V{j};", specs)))
    library = [_Method(f"Lcom/lib/{name}/Util;", f"u{i}", _api_body(st, (rng.choice(BENIGN_API_POOL),)),
                       ()) for i in range(int(fam.get("carrier_library", 0)))]
    clone = fam.get("clone")
    shared_carrier = _carrier(st, clone["shared"], clone["shared"]) if clone else None

    noise = math.floor(as_fraction(fam.get("label_noise_fraction", 0)) * n)
    order = list(range(n))
    rng.shuffle(order)
    foreign = set(order[:noise])
    genuine = [i for i in range(n) if i not in foreign]
    variant_of = {}
    start = 0
    for j, (frac, _) in enumerate(variants):
        k = math.floor(frac * len(genuine))
        for i in genuine[start:start + k]:
            variant_of[i] = j
        start += k

    resources = []
    for r, res in enumerate(fam.get("resources", ())):
        blob = _resource_blob(res)
        k = _resource_count(res, n)
        holders = set(rng.sample(range(n), k))
        default_path = f"assets/bin/exploit{r}" if res["kind"] == "elf" else f"assets/run{r}.sh"
        resources.append((res.get("path", default_path), blob, holders, res["kind"]))

    plan = _quarter_plan(fam, n)
    s_lo, s_hi = fam.get("stealth_days", (0, 60))
    records, sample_ids, foreign_ids = [], [], []
    sample_variant: dict = {}
    for i in range(n):
        methods = list(shared_carrier) if shared_carrier else _carrier(st, lo, hi)
        if clone and clone.get("unique", 0):
            methods += _carrier(st, clone["unique"], clone["unique"])
        methods += library
        rider_part = []
        if i in foreign:
            ghost = _rider_specs(rng.randint(3, 6), rng)
            rider_part = _rider_methods(st, f"Lnet/stray{st.carrier_seq:05d}/Payload;", ghost)
        else:
            rider_part = list(core)
            if i in variant_of:
                rider_part += variants[variant_of[i]][1]
        members = {"res/drawable/icon.png": b"\x89PNG\r\n\x1a\n" + hashlib.sha256(f"{name}{i}{rng.random()}".encode()).digest()}
        if fam.get("incognito"):
            members["classes.dex"] = _dex(methods)
            members["assets/payload.apk"] = _zip({"classes.dex": _dex(rider_part)}, (1980, 1, 1, 0, 0, 0))
        else:
            members["classes.dex"] = _dex(methods + rider_part)
        for path, blob, holders, _kind in resources:
            if i in holders:
                members[path] = blob
        first_seen = quarter_start(plan[i]) + timedelta(days=rng.randint(0, 80), seconds=rng.randrange(86400))
        dex_date = first_seen - timedelta(days=rng.randint(s_lo, s_hi), seconds=rng.randrange(86400))
        dt = dex_date.replace(second=dex_date.second - dex_date.second % 2)
        apk = _zip(members, (dt.year, dt.month, dt.day, dt.hour, dt.minute, dt.second))
        sid = hashlib.sha256(apk).hexdigest()
        rel = Path("samples") / name / f"{name}-{i:03d}.apk"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        (out / rel).write_bytes(apk)
        line = {"sha256": sid, "first_seen": format_ts(first_seen), "path": rel.as_posix()}
        if not fam.get("omit_dex_date"):
            line["dex_date"] = format_ts(dex_date)
        if fam.get("av_labels"):
            line["av_labels"] = _av_labels(name, rng)
        else:
            line["family"] = name
        records.append(line)
        sample_ids.append(sid)
        if i in foreign:
            foreign_ids.append(sid)
        if i in variant_of:
            sample_variant.setdefault(variant_of[i], []).append(sid)

    rider_apis = [m.apis for m in core]
    categories = set()
    for apis in rider_apis:
        for api in apis:
            categories |= DEFAULT_TAXONOMY.categories(api)
    common = []
    for path, blob, holders, kind in resources:
        common.append({"path": path, "kind": kind, "digest": hashlib.sha256(blob).hexdigest(), "samples": len(holders)})
    truth = {
        "samples": sample_ids,
        "foreign_samples": foreign_ids,
        "rider_methods": [[m.class_descriptor, m.name] for m in core],
        "rider_apis": [list(a) for a in rider_apis],
        "expected_rider_count": len(core),
        "expected_categories": sorted(categories),
        "variants": [
            {"fraction": str(frac), "methods": [[m.class_descriptor, m.name] for m in ms],
             "samples": sample_variant.get(j, [])}
            for j, (frac, ms) in enumerate(variants)
        ],
        "carrier_library_methods": [[m.class_descriptor, m.name] for m in library],
        "early_stage": bool(clone),
        "resources": common,
        "quarters": sorted({q for q in plan}),
    }
    return records, truth


def expected_common_resources(family_truth: dict, cutoff=0.30) -> list:
    n = len(family_truth["samples"])
    c = as_fraction(cutoff)
    return sorted(r["digest"] for r in family_truth["resources"] if Fraction(r["samples"]) >= c * n)


def generate(spec: dict, out_dir) -> Path:
    """Write archives, ``manifest.jsonl`` and ``ground_truth.json``; returns the manifest path."""
    out = Path(out_dir)
    seed = int(spec.get("seed", 0))
    st = _State(random.Random(seed))
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines, truth = [], {}
        for fam in spec["families"]:
            recs, t = _generate_family(st, fam, out, spec)
            lines += recs
            truth[fam["name"].lower()] = t
        manifest = out / "manifest.jsonl"
        manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))
        (out / "ground_truth.json").write_text(
            json.dumps({"seed": seed, "families": truth}, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise RiderscopeError("SYNTH_IO", f"cannot write synthetic corpus to {out}: {exc}") from exc
    log.info("generated %d samples in %d families under %s", len(lines), len(truth), out)
    return manifest


def load_spec(path) -> dict:
    return json.loads(Path(path).read_text())
