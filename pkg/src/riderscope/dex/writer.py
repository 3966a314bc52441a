"""Minimal Dalvik executable assembler.

Used by the synthetic corpus generator and by the identifier-renaming
rewriter. Methods are given as lists of :class:`Insn` and :class:`Label`
items with symbolic constant-pool references; the builder interns the pools,
sorts them in canonical order, lays out the data section and fills the
checksum and signature.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Union

from riderscope.dex.opcodes import BY_NAME, FIELD, METHOD, PROTO, STRING, TYPE, Opcode

ACC_PUBLIC = 0x1
ACC_PRIVATE = 0x2
ACC_STATIC = 0x8
ACC_CONSTRUCTOR = 0x10000

OBJECT = "Ljava/lang/Object;"


@dataclass(frozen=True)
class MethodSym:
    class_descriptor: str
    name: str
    return_type: str = "V"
    parameters: tuple = ()

    @classmethod
    def from_dotted(cls, name: str, return_type: str = "V", parameters: tuple = ()) -> "MethodSym":
        """``android.telephony.SmsManager.sendTextMessage`` -> symbol."""
        owner, _, meth = name.rpartition(".")
        return cls("L" + owner.replace(".", "/") + ";", meth, return_type, tuple(parameters))


@dataclass(frozen=True)
class FieldSym:
    class_descriptor: str
    type: str
    name: str


@dataclass(frozen=True)
class Label:
    name: str


@dataclass
class Insn:
    op: str
    operands: tuple = ()
    ref: Union[None, int, str, MethodSym, FieldSym] = None
    targets: tuple = ()  # label names
    keys: tuple = ()  # switch keys, parallel to targets
    array_data: Optional[tuple] = None  # (element width, bytes)

    def __init__(self, op, *operands, ref=None, targets=(), target=None, keys=(), array_data=None):
        self.op = op
        self.operands = tuple(operands)
        self.ref = ref
        self.targets = (target,) if target is not None else tuple(targets)
        self.keys = tuple(keys)
        self.array_data = array_data


@dataclass
class TryRange:
    start: str
    end: str  # exclusive label
    handlers: tuple = ()  # (exception descriptor, label)
    catch_all: Optional[str] = None


@dataclass
class MethodDef:
    name: str
    return_type: str = "V"
    parameters: tuple = ()
    access: int = ACC_PUBLIC | ACC_STATIC
    code: Optional[list] = None
    registers: Optional[int] = None
    virtual: bool = False
    tries: list = field(default_factory=list)


@dataclass
class ClassDefSpec:
    descriptor: str
    superclass: Optional[str] = OBJECT
    access: int = ACC_PUBLIC
    methods: list = field(default_factory=list)

    def add_method(self, name, code=None, *, return_type="V", parameters=(), access=ACC_PUBLIC | ACC_STATIC,
                   registers=None, virtual=False, tries=None) -> MethodDef:
        m = MethodDef(name, return_type, tuple(parameters), access, code, registers, virtual, list(tries or []))
        self.methods.append(m)
        return m


def _shorty(return_type: str, parameters) -> str:
    def one(t):
        return "L" if t[0] in "L[" else t
    return one(return_type) + "".join(one(p) for p in parameters)


def _words(t: str) -> int:
    return 2 if t in ("J", "D") else 1


def encode_mutf8(s: str) -> bytes:
    out = bytearray()
    units = s.encode("utf-16-le", errors="surrogatepass")
    for i in range(0, len(units), 2):
        c = units[i] | (units[i + 1] << 8)
        if c != 0 and c < 0x80:
            out.append(c)
        elif c < 0x800:
            out += bytes((0xC0 | (c >> 6), 0x80 | (c & 0x3F)))
        else:
            out += bytes((0xE0 | (c >> 12), 0x80 | ((c >> 6) & 0x3F), 0x80 | (c & 0x3F)))
    return bytes(out)


def _uleb(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _sleb(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        done = (value == 0 and not b & 0x40) or (value == -1 and b & 0x40)
        out.append(b if done else b | 0x80)
        if done:
            return bytes(out)


def _align(buf: bytearray, n: int = 4) -> None:
    while len(buf) % n:
        buf.append(0)


class DexBuilder:
    def __init__(self, version: str = "035"):
        self.version = version
        self.classes: list[ClassDefSpec] = []

    def add_class(self, descriptor: str, superclass: Optional[str] = OBJECT, access: int = ACC_PUBLIC) -> ClassDefSpec:
        c = ClassDefSpec(descriptor, superclass, access)
        self.classes.append(c)
        return c

    # -- pools ---------------------------------------------------------------

    def _collect(self):
        strings, types, protos, fields, methods = set(), set(), set(), set(), set()

        def add_type(t):
            types.add(t)
            strings.add(t)

        def add_proto(ret, params):
            protos.add((ret, tuple(params)))
            strings.add(_shorty(ret, params))
            add_type(ret)
            for p in params:
                add_type(p)

        def add_method(sym: MethodSym):
            methods.add(sym)
            add_type(sym.class_descriptor)
            strings.add(sym.name)
            add_proto(sym.return_type, sym.parameters)

        for c in self.classes:
            add_type(c.descriptor)
            if c.superclass:
                add_type(c.superclass)
            for m in c.methods:
                add_method(MethodSym(c.descriptor, m.name, m.return_type, m.parameters))
                for t in m.tries:
                    for exc, _ in t.handlers:
                        add_type(exc)
                for item in m.code or ():
                    if not isinstance(item, Insn) or item.ref is None or isinstance(item.ref, int):
                        continue
                    kind = BY_NAME[item.op].ref
                    if kind == STRING:
                        strings.add(item.ref)
                    elif kind == TYPE:
                        add_type(item.ref)
                    elif kind == FIELD:
                        fields.add(item.ref)
                        add_type(item.ref.class_descriptor)
                        add_type(item.ref.type)
                        strings.add(item.ref.name)
                    elif kind == METHOD:
                        add_method(item.ref)
        return strings, types, protos, fields, methods

    def build(self) -> bytes:
        strings, types, protos, fields, methods = self._collect()
        utf16 = lambda s: s.encode("utf-16-be", errors="surrogatepass")  # noqa: E731
        string_list = sorted(strings, key=utf16)
        sidx = {s: i for i, s in enumerate(string_list)}
        type_list = sorted(types, key=lambda t: sidx[t])
        tidx = {t: i for i, t in enumerate(type_list)}
        proto_list = sorted(protos, key=lambda p: (tidx[p[0]], [tidx[x] for x in p[1]]))
        pidx = {p: i for i, p in enumerate(proto_list)}
        field_list = sorted(fields, key=lambda f: (tidx[f.class_descriptor], sidx[f.name], tidx[f.type]))
        fidx = {f: i for i, f in enumerate(field_list)}
        method_list = sorted(methods, key=lambda m: (
            tidx[m.class_descriptor], sidx[m.name], pidx[(m.return_type, m.parameters)]))
        midx = {m: i for i, m in enumerate(method_list)}
        pools = {STRING: sidx, TYPE: tidx, FIELD: fidx, METHOD: midx, PROTO: pidx}

        n_str, n_typ, n_pro, n_fld, n_met, n_cls = (
            len(string_list), len(type_list), len(proto_list), len(field_list), len(method_list), len(self.classes))
        string_ids_off = 0x70
        type_ids_off = string_ids_off + 4 * n_str
        proto_ids_off = type_ids_off + 4 * n_typ
        field_ids_off = proto_ids_off + 12 * n_pro
        method_ids_off = field_ids_off + 8 * n_fld
        class_defs_off = method_ids_off + 8 * n_met
        data_off = class_defs_off + 32 * n_cls
        buf = bytearray(data_off)
        _align(buf)
        data_off = len(buf)

        # code items
        code_offs = {}
        n_code = 0
        code_start = len(buf)
        for c in self.classes:
            for m in c.methods:
                if m.code is None:
                    continue
                _align(buf)
                code_offs[(c.descriptor, m.name, m.return_type, m.parameters)] = len(buf)
                buf += self._code_item(c, m, pools)
                n_code += 1

        # type lists
        _align(buf)
        tl_start = len(buf)
        tl_offs = {}
        for params in sorted({p[1] for p in proto_list if p[1]}, key=lambda ps: [tidx[x] for x in ps]):
            _align(buf)
            tl_offs[params] = len(buf)
            buf += struct.pack("<I", len(params))
            buf += b"".join(struct.pack("<H", tidx[x]) for x in params)
        n_tl = len(tl_offs)

        # string data
        sd_start = len(buf)
        sd_offs = []
        for s in string_list:
            sd_offs.append(len(buf))
            buf += _uleb(len(s.encode("utf-16-le", errors="surrogatepass")) // 2)
            buf += encode_mutf8(s) + b"\x00"

        # class data
        cd_start = len(buf)
        cd_offs = []
        for c in self.classes:
            if not c.methods:
                cd_offs.append(0)
                continue
            cd_offs.append(len(buf))
            direct, virtual = [], []
            for m in c.methods:
                key = (c.descriptor, m.name, m.return_type, m.parameters)
                entry = (midx[MethodSym(*key)], m.access, code_offs.get(key, 0))
                (virtual if m.virtual else direct).append(entry)
            direct.sort()
            virtual.sort()
            buf += _uleb(0) + _uleb(0) + _uleb(len(direct)) + _uleb(len(virtual))
            for group in (direct, virtual):
                prev = 0
                for idx, acc, off in group:
                    buf += _uleb(idx - prev) + _uleb(acc) + _uleb(off)
                    prev = idx
        n_cd = sum(1 for o in cd_offs if o)

        # map list
        _align(buf)
        map_off = len(buf)
        entries = [(0x0000, 1, 0)]
        for typ, count, off in (
            (0x0001, n_str, string_ids_off), (0x0002, n_typ, type_ids_off), (0x0003, n_pro, proto_ids_off),
            (0x0004, n_fld, field_ids_off), (0x0005, n_met, method_ids_off), (0x0006, n_cls, class_defs_off),
            (0x2001, n_code, code_start), (0x1001, n_tl, tl_start), (0x2002, n_str, sd_start),
            (0x2000, n_cd, cd_start),
        ):
            if count:
                entries.append((typ, count, off))
        entries.append((0x1000, 1, map_off))
        entries.sort(key=lambda e: e[2])
        buf += struct.pack("<I", len(entries))
        for typ, count, off in entries:
            buf += struct.pack("<HHII", typ, 0, count, off)

        # fixed tables
        for i, off in enumerate(sd_offs):
            struct.pack_into("<I", buf, string_ids_off + 4 * i, off)
        for i, t in enumerate(type_list):
            struct.pack_into("<I", buf, type_ids_off + 4 * i, sidx[t])
        for i, (ret, params) in enumerate(proto_list):
            struct.pack_into("<III", buf, proto_ids_off + 12 * i, sidx[_shorty(ret, params)], tidx[ret],
                             tl_offs.get(params, 0))
        for i, f in enumerate(field_list):
            struct.pack_into("<HHI", buf, field_ids_off + 8 * i, tidx[f.class_descriptor], tidx[f.type], sidx[f.name])
        for i, m in enumerate(method_list):
            struct.pack_into("<HHI", buf, method_ids_off + 8 * i, tidx[m.class_descriptor],
                             pidx[(m.return_type, m.parameters)], sidx[m.name])
        for i, c in enumerate(self.classes):
            struct.pack_into("<8I", buf, class_defs_off + 32 * i, tidx[c.descriptor], c.access,
                             tidx[c.superclass] if c.superclass else 0xFFFFFFFF, 0, 0xFFFFFFFF, 0, cd_offs[i], 0)

        # header
        buf[0:8] = b"dex\n" + self.version.encode() + b"\x00"
        struct.pack_into("<I", buf, 0x20, len(buf))
        struct.pack_into("<I", buf, 0x24, 0x70)
        struct.pack_into("<I", buf, 0x28, 0x12345678)
        struct.pack_into("<III", buf, 0x2C, 0, 0, map_off)
        tables = ((n_str, string_ids_off), (n_typ, type_ids_off), (n_pro, proto_ids_off),
                  (n_fld, field_ids_off), (n_met, method_ids_off), (n_cls, class_defs_off))
        for i, (count, off) in enumerate(tables):
            struct.pack_into("<II", buf, 0x38 + 8 * i, count, off if count else 0)
        struct.pack_into("<II", buf, 0x68, len(buf) - data_off, data_off)
        buf[12:32] = hashlib.sha1(bytes(buf[32:])).digest()
        struct.pack_into("<I", buf, 8, zlib.adler32(bytes(buf[12:])))
        return bytes(buf)

    # -- code ----------------------------------------------------------------

    def _code_item(self, c: ClassDefSpec, m: MethodDef, pools) -> bytes:
        insns, outs, max_reg = assemble(m.code, pools)
        ins = sum(_words(p) for p in m.parameters) + (0 if m.access & ACC_STATIC else 1)
        registers = m.registers if m.registers is not None else max(max_reg + 1, ins)
        labels = insns.labels
        out = bytearray(struct.pack("<4HII", registers, ins, outs, len(m.tries), 0, len(insns.units)))
        out += struct.pack(f"<{len(insns.units)}H", *insns.units)
        if m.tries:
            if len(insns.units) % 2:
                out += b"\x00\x00"
            handler_blob = bytearray(_uleb(len(m.tries)))
            handler_offs = []
            for t in m.tries:
                handler_offs.append(len(handler_blob))
                n = len(t.handlers)
                handler_blob += _sleb(-n if t.catch_all else n)
                for exc, lab in t.handlers:
                    handler_blob += _uleb(pools[TYPE][exc]) + _uleb(labels[lab])
                if t.catch_all:
                    handler_blob += _uleb(labels[t.catch_all])
            for t, hoff in zip(m.tries, handler_offs):
                start = labels[t.start]
                out += struct.pack("<IHH", start, labels[t.end] - start, hoff)
            out += handler_blob
        return bytes(out)


@dataclass
class Assembled:
    units: list
    labels: dict


def _resolve(ref, kind, pools) -> int:
    if isinstance(ref, int):
        return ref
    return pools[kind][ref]


def assemble(code, pools) -> tuple[Assembled, int, int]:
    """Two-pass assembly. Returns (code units + label offsets, outs, max register)."""
    labels: dict[str, int] = {}
    pc = 0
    layout = []
    for item in code:
        if isinstance(item, Label):
            labels[item.name] = pc
            continue
        op = BY_NAME[item.op]
        layout.append((pc, op, item))
        pc += op.width
    payload_items = [(p, op, it) for p, op, it in layout if op.fmt == "31t"]
    payload_at = {}
    for p, op, it in payload_items:
        if pc % 2:
            pc += 1  # alignment nop
        payload_at[p] = pc
        if op.name == "packed-switch":
            pc += len(it.targets) * 2 + 4
        elif op.name == "sparse-switch":
            pc += len(it.targets) * 4 + 2
        else:
            width, raw = it.array_data
            pc += (len(raw) + 1) // 2 + 4

    units: list[int] = []
    outs = 0
    max_reg = 0
    for p, op, it in layout:
        ref = None if op.ref is None or it.ref is None else _resolve(it.ref, op.ref, pools)
        rel = None
        if op.fmt == "31t":
            rel = payload_at[p] - p
        elif it.targets:
            rel = labels[it.targets[0]] - p
        units += _encode(op, it.operands, ref, rel)
        if op.is_invoke:
            words = it.operands[1] if op.fmt in ("3rc", "4rcc") else len(it.operands) - (op.fmt == "45cc")
            outs = max(outs, words)
        max_reg = max([max_reg] + _registers(op, it.operands))
    for p, op, it in payload_items:
        while len(units) < payload_at[p]:
            units.append(0)
        if op.name == "packed-switch":
            first = it.keys[0] if it.keys else 0
            units += [0x0100, len(it.targets)] + _u32(first)
            for lab in it.targets:
                units += _u32(labels[lab] - p)
        elif op.name == "sparse-switch":
            units += [0x0200, len(it.targets)]
            for k in it.keys:
                units += _u32(k)
            for lab in it.targets:
                units += _u32(labels[lab] - p)
        else:
            width, raw = it.array_data
            count = len(raw) // width
            padded = raw + b"\x00" * (len(raw) % 2)
            units += [0x0300, width] + _u32(count) + list(struct.unpack(f"<{len(padded) // 2}H", padded))
    return Assembled(units, labels), outs, max_reg


def _u32(v: int) -> list:
    v &= 0xFFFFFFFF
    return [v & 0xFFFF, v >> 16]


def _registers(op: Opcode, operands) -> list:
    fmt = op.fmt
    if fmt in ("3rc", "4rcc"):
        first, count = operands[0], operands[1]
        return [first + count - 1] if count else []
    if fmt in ("11n", "21s", "21h", "31i", "51l"):
        return [operands[0]]
    if fmt in ("22b", "22s"):
        return list(operands[:2])
    if fmt == "45cc":
        return list(operands[:-1])
    return list(operands)


def _fits(v: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= v < (1 << (bits - 1))


def _encode(op: Opcode, o: tuple, ref: Optional[int], rel: Optional[int]) -> list:
    fmt, v = op.fmt, op.value
    if rel is not None:
        bits = {"10t": 8, "20t": 16, "21t": 16, "22t": 16}.get(fmt, 32)
        if not _fits(rel, bits):
            raise ValueError(f"{op.name}: branch offset {rel} does not fit {bits} bits")
    if fmt == "10x":
        return [v]
    if fmt == "12x":
        return [v | (o[0] << 8) | (o[1] << 12)]
    if fmt == "11n":
        return [v | (o[0] << 8) | ((o[1] & 0xF) << 12)]
    if fmt == "11x":
        return [v | (o[0] << 8)]
    if fmt == "10t":
        return [v | ((rel & 0xFF) << 8)]
    if fmt == "20t":
        return [v, rel & 0xFFFF]
    if fmt in ("22x", "20bc", "21h"):
        return [v | (o[0] << 8), o[1] & 0xFFFF]
    if fmt == "21t":
        return [v | (o[0] << 8), rel & 0xFFFF]
    if fmt == "21s":
        return [v | (o[0] << 8), o[1] & 0xFFFF]
    if fmt == "21c":
        return [v | (o[0] << 8), ref]
    if fmt == "23x":
        return [v | (o[0] << 8), o[1] | (o[2] << 8)]
    if fmt == "22b":
        return [v | (o[0] << 8), o[1] | ((o[2] & 0xFF) << 8)]
    if fmt == "22t":
        return [v | (o[0] << 8) | (o[1] << 12), rel & 0xFFFF]
    if fmt == "22s":
        return [v | (o[0] << 8) | (o[1] << 12), o[2] & 0xFFFF]
    if fmt in ("22c", "22cs"):
        return [v | (o[0] << 8) | (o[1] << 12), ref]
    if fmt == "30t":
        return [v] + _u32(rel)
    if fmt == "32x":
        return [v, o[0], o[1]]
    if fmt == "31i":
        return [v | (o[0] << 8)] + _u32(o[1])
    if fmt == "31t":
        return [v | (o[0] << 8)] + _u32(rel)
    if fmt == "31c":
        return [v | (o[0] << 8)] + _u32(ref)
    if fmt in ("35c", "35ms", "35mi", "45cc"):
        regs = list(o[:-1] if fmt == "45cc" else o)
        if len(regs) > 5:
            raise ValueError(f"{op.name}: more than 5 argument registers")
        count = len(regs)
        regs += [0] * (5 - count)
        unit0 = v | (regs[4] << 8) | (count << 12)
        unit2 = regs[0] | (regs[1] << 4) | (regs[2] << 8) | (regs[3] << 12)
        return [unit0, ref, unit2] + ([o[-1]] if fmt == "45cc" else [])
    if fmt in ("3rc", "3rms", "3rmi"):
        return [v | (o[1] << 8), ref, o[0]]
    if fmt == "4rcc":
        return [v | (o[1] << 8), ref, o[0], o[2]]
    if fmt == "51l":
        x = o[1] & 0xFFFFFFFFFFFFFFFF
        return [v | (o[0] << 8), x & 0xFFFF, (x >> 16) & 0xFFFF, (x >> 32) & 0xFFFF, x >> 48]
    raise AssertionError(fmt)
