import struct

import pytest
import xxhash
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_dex, call
from riderscope.cfg import (
    MethodFingerprint,
    annotate,
    build_cfg,
    canonical_serialization,
    fingerprint,
    fingerprint_module,
    render_cfg,
)
from riderscope.dex.parser import Instruction, MethodBody, parse_dex
from riderscope.dex.rewrite import rename_identifiers
from riderscope.dex.writer import DexBuilder, FieldSym, Insn, Label, MethodSym, TryRange
from riderscope.errors import RiderscopeError


def cfg_of(code, name="m", **kw):
    mod = parse_dex(build_dex({name: code}))
    body = mod.classes[0].methods[0].body
    return annotate(build_cfg(body, **kw), mod), mod


DIAMOND = [
    Insn("if-eqz", 0, target="else"),
    Insn("const/4", 1, 1),
    Insn("goto", target="join"),
    Label("else"),
    Insn("const/4", 1, 2),
    Label("join"),
    Insn("return-void"),
]

SWITCH3 = [
    Insn("const/4", 0, 1),
    Insn("packed-switch", 0, targets=("a", "b", "c"), keys=(0,)),
    Insn("const/4", 1, 0),
    Label("a"),
    Insn("const/4", 1, 1),
    Label("b"),
    Insn("const/4", 1, 2),
    Label("c"),
    Insn("return-void"),
]


def test_straight_line():
    cfg, _ = cfg_of([Insn("const/4", 0, 1), Insn("move", 1, 0), Insn("return-void")])
    assert len(cfg.blocks) == 1
    assert cfg.edges == ()


def test_diamond():
    cfg, _ = cfg_of(DIAMOND)
    assert len(cfg.blocks) == 4
    assert len(cfg.edges) == 4
    assert cfg.successors[0] == (1, 2)
    assert cfg.successors[3] == ()


def test_three_case_switch():
    cfg, _ = cfg_of(SWITCH3)
    assert len(cfg.successors[0]) == 4
    assert not any(b.unreachable for b in cfg.blocks)


def test_switch_matches_androguard_blocks():
    pytest.importorskip("androguard")
    from loguru import logger

    logger.remove()
    from androguard.core.analysis.analysis import Analysis
    from androguard.core.dex import DEX

    data = build_dex({"sw": SWITCH3, "dia": DIAMOND})
    dx = DEX(data)
    an = Analysis(dx)
    an.create_xref()
    theirs = {}
    for ma in an.get_methods():
        if ma.is_external():
            continue
        edges = set()
        for bb in ma.get_basic_blocks():
            if any(i.get_name().endswith("-payload") for i in bb.get_instructions()):
                continue
            for nxt in bb.get_next():
                edges.add((bb.get_start() // 2, nxt[2].get_start() // 2))
        theirs[ma.get_method().get_name()] = edges
    mod = parse_dex(data)
    for _, em in mod.bodies():
        cfg = build_cfg(em.body)
        ours = {(cfg.blocks[a].offset, cfg.blocks[b].offset) for a, b in cfg.edges}
        assert ours == theirs[mod.methods[em.method_idx].name]


def test_annotation_framework_call():
    cfg, _ = cfg_of([call("java.lang.System.loadLibrary"), Insn("return-void")])
    assert cfg.annotations == (("java.lang.System.loadLibrary",),)


def test_annotation_ignores_app_calls():
    cfg, _ = cfg_of([call("com.foo.Bar.baz"), Insn("return-void")])
    assert cfg.annotations == ((),)


def test_annotation_multiset():
    ctor = Insn("invoke-direct", 0, ref=MethodSym("Ldalvik/system/DexClassLoader;", "<init>"))
    cfg, _ = cfg_of([ctor, ctor, Insn("return-void")])
    assert cfg.annotations == (("dalvik.system.DexClassLoader.<init>",) * 2,)


def test_annotation_custom_prefixes():
    mod = parse_dex(build_dex({"m": [call("com.foo.Bar.baz"), call("android.util.Log.d"), Insn("return-void")]}))
    cfg = annotate(build_cfg(mod.classes[0].methods[0].body), mod, ("com.foo.",))
    assert cfg.annotations == (("com.foo.Bar.baz",),)


def test_fingerprint_hand_oracle():
    cfg, _ = cfg_of([Insn("const/4", 0, 1), Insn("return-void")])
    # one block: count, [count, const=1, return=8], no successors
    expected = struct.pack("<I", 1) + struct.pack("<I", 2) + bytes([1, 8]) + struct.pack("<H", 0)
    assert canonical_serialization(cfg) == expected
    fp = fingerprint(cfg)
    assert fp.structural == xxhash.xxh64_intdigest(expected, seed=0)
    assert fp.features == xxhash.xxh64_intdigest(b"", seed=0)
    assert len(fp.hex) == 32
    assert MethodFingerprint.from_hex(fp.hex) == fp


def test_fingerprint_features_hand_oracle():
    apis = ["javax.crypto.Cipher.getInstance", "android.util.Log.d"]
    cfg, _ = cfg_of([call(a) for a in apis] + [call(apis[0]), Insn("return-void")])
    hashes = sorted(xxhash.xxh64_intdigest(a.encode(), seed=0) for a in apis)
    assert fingerprint(cfg).features == xxhash.xxh64_intdigest(struct.pack("<2Q", *hashes), seed=0)


def test_diamond_serialization_hand_oracle():
    cfg, _ = cfg_of(DIAMOND)
    # preorder: entry, fall-through (then-arm), join, else-arm
    expected = struct.pack("<I", 4)
    expected += struct.pack("<I", 1) + bytes([3]) + struct.pack("<HII", 2, 1, 3)
    expected += struct.pack("<I", 2) + bytes([1, 3]) + struct.pack("<HI", 1, 2)
    expected += struct.pack("<I", 1) + bytes([8]) + struct.pack("<H", 0)
    expected += struct.pack("<I", 1) + bytes([1]) + struct.pack("<HI", 1, 2)
    assert canonical_serialization(cfg) == expected


def test_length_changes_structural():
    one, _ = cfg_of([Insn("return-void")])
    two, _ = cfg_of([Insn("nop"), Insn("return-void")])
    assert fingerprint(one).structural != fingerprint(two).structural


def test_names_do_not_matter():
    def body(app_cls, field, text):
        return [
            Insn("const-string", 0, ref=text),
            Insn("sget", 1, ref=FieldSym(app_cls, "I", field)),
            Insn("invoke-static", ref=MethodSym(app_cls, field + "Run")),
            call("android.telephony.TelephonyManager.getDeviceId", "invoke-virtual"),
            Insn("if-eqz", 1, target="x"),
            Insn("nop"),
            Label("x"),
            Insn("return-void"),
        ]

    a = parse_dex(build_dex({"alpha": body("Lcom/a/A;", "f", "one")}, cls="Lcom/a/A;"))
    b = parse_dex(build_dex({"zz": body("Lnet/q/Zed;", "gg", "other text")}, cls="Lnet/q/Zed;"))
    assert fingerprint_module(a)[0].fingerprint == fingerprint_module(b)[0].fingerprint


def test_swapped_invoke_changes_only_features():
    base, _ = cfg_of([call("com.foo.Util.helper"), Insn("return-void")])
    crypto, _ = cfg_of([call("javax.crypto.Cipher.getInstance"), Insn("return-void")])
    fa, fb = fingerprint(base), fingerprint(crypto)
    assert fa.structural == fb.structural
    assert fa.features != fb.features
    assert fa.combined != fb.combined


def test_added_invoke_changes_combined():
    base, _ = cfg_of([Insn("return-void")])
    more, _ = cfg_of([call("javax.crypto.Cipher.getInstance"), Insn("return-void")])
    assert fingerprint(base).features != fingerprint(more).features
    assert fingerprint(base).combined != fingerprint(more).combined


def test_extra_edge_changes_structure():
    plain, _ = cfg_of([Insn("const/4", 0, 0), Insn("nop"), Insn("nop"), Insn("return-void")])
    branchy, _ = cfg_of([Insn("const/4", 0, 0), Insn("if-eqz", 0, target="r"), Insn("nop"),
                         Label("r"), Insn("return-void")])
    assert canonical_serialization(plain) != canonical_serialization(branchy)
    # same blocks and categories (if and goto are both branches), one edge fewer
    g1, _ = cfg_of([Insn("if-eqz", 0, target="b"), Insn("nop"), Label("b"), Insn("return-void")])
    g2, _ = cfg_of([Insn("goto", target="b"), Insn("nop"), Label("b"), Insn("return-void")])
    assert [g1.block_categories(i) for i in range(3)] == [g2.block_categories(i) for i in range(3)]
    assert len(g1.edges) == len(g2.edges) + 1
    assert fingerprint(g1).structural != fingerprint(g2).structural


def test_mid_instruction_branch_is_malformed():
    insns = (
        Instruction(0, 0x14, (0, 5)),  # const, 3 units
        Instruction(3, 0x28, (), targets=(1,)),  # goto into the middle of const
        Instruction(4, 0x0E),
    )
    with pytest.raises(RiderscopeError) as e:
        build_cfg(MethodBody(0, 1, 0, 0, insns, ()))
    assert e.value.code == "CFG_MALFORMED"


def test_empty_body_is_malformed():
    with pytest.raises(RiderscopeError):
        build_cfg(MethodBody(0, 1, 0, 0, (), ()))


def test_malformed_method_skipped_in_module():
    mod = parse_dex(build_dex({"a": [Insn("return-void")], "b": [Insn("nop"), Insn("return-void")]}))
    bad = mod.classes[0].methods[0]
    broken = MethodBody(bad.body.method_ref, 1, 0, 0, (Instruction(0, 0x28, (), targets=(7,)),), ())
    cls = mod.classes[0]
    methods = (type(bad)(bad.method_idx, bad.access_flags, broken),) + cls.methods[1:]
    from dataclasses import replace

    mod2 = replace(mod, classes=(replace(cls, methods=methods),))
    diags = []
    prints = fingerprint_module(mod2, diagnostics=diags)
    assert len(prints) == 1
    assert [d.code for d in diags] == ["CFG_MALFORMED"]


def _try_dex():
    b = DexBuilder()
    c = b.add_class("Lcom/example/T;")
    code = [Label("s"), call("java.io.File.delete"), Label("e"), Insn("return-void"),
            Label("h"), Insn("move-exception", 0), Insn("return-void")]
    c.add_method("t", code, registers=2, tries=[TryRange("s", "e", (("Ljava/io/IOException;", "h"),))])
    return parse_dex(b.build())


def test_no_exceptional_edges_by_default():
    mod = _try_dex()
    cfg = build_cfg(mod.classes[0].methods[0].body)
    assert cfg.blocks[-1].unreachable
    assert all(b != len(cfg.blocks) - 1 for _, b in cfg.edges)


def test_exceptional_edges_knob():
    mod = _try_dex()
    body = mod.classes[0].methods[0].body
    cfg = build_cfg(body, exceptional_edges=True)
    handler = len(cfg.blocks) - 1
    assert (0, handler) in cfg.edges
    assert not cfg.blocks[handler].unreachable
    assert fingerprint(cfg).structural != fingerprint(build_cfg(body)).structural


def test_render_cfg_lists_blocks():
    cfg, mod = cfg_of([call("java.lang.Runtime.exec")] + DIAMOND)
    text = render_cfg(cfg, mod)
    assert "B0 @0000 -> B1, B2" in text
    assert "java.lang.Runtime.exec" in text


def test_renaming_keeps_fingerprints(synth_factory):
    import zipfile

    manifest, _ = synth_factory({"seed": 5, "families": [{"name": "ren", "carrier_count": 7, "rider_methods": 6,
                                                            "carrier_library": 2}]})
    for apk in sorted((manifest.parent / "samples" / "ren").glob("*.apk"))[:3]:
        data = zipfile.ZipFile(apk).read("classes.dex")
        before = sorted(p.fingerprint for p in fingerprint_module(parse_dex(data)))
        renamed = rename_identifiers(data, seed=11)
        mod = parse_dex(renamed)
        after = sorted(p.fingerprint for p in fingerprint_module(mod))
        assert before == after
        assert not any(c.descriptor.startswith(("Lorg/app", "Lcom/ren")) for c in mod.classes)


# -- properties ---------------------------------------------------------------

@st.composite
def bodies(draw):
    n = draw(st.integers(1, 20))
    code = []
    for i in range(n):
        code.append(Label(f"l{i}"))
        kind = draw(st.sampled_from(["nop", "const", "if", "goto", "ret", "switch", "call"]))
        tgt = lambda: f"l{draw(st.integers(0, n))}"  # noqa: E731
        if kind == "if":
            code.append(Insn("if-nez", 0, target=tgt()))
        elif kind == "goto":
            code.append(Insn("goto/16", target=tgt()))
        elif kind == "ret":
            code.append(Insn("return-void"))
        elif kind == "switch":
            k = draw(st.integers(1, 3))
            code.append(Insn("packed-switch", 0, targets=tuple(tgt() for _ in range(k)), keys=(0,)))
        elif kind == "call":
            code.append(call(draw(st.sampled_from(["android.util.Log.d", "com.x.Y.z", "java.io.File.delete"]))))
        elif kind == "const":
            code.append(Insn("const/4", 0, 1))
        else:
            code.append(Insn("nop"))
    code += [Label(f"l{n}"), Insn("return-void")]
    return code


@settings(max_examples=80, deadline=None)
@given(bodies())
def test_cfg_invariants(code):
    cfg, _ = cfg_of(code)
    n = len(cfg.instructions)
    spans = [(b.start, b.end) for b in cfg.blocks]
    assert spans[0][0] == 0 and spans[-1][1] == n
    assert all(a[1] == b[0] and a[0] < a[1] for a, b in zip(spans, spans[1:]))
    k = len(cfg.blocks)
    preds = {b for _, b in cfg.edges}
    for a, b in cfg.edges:
        assert 0 <= a < k and 0 <= b < k
    for i, blk in enumerate(cfg.blocks[1:], 1):
        assert i in preds or blk.unreachable
    assert fingerprint(cfg) == fingerprint(cfg_of(code)[0])
