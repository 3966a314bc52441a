"""Parser for the subset of the Dalvik executable format needed to build
per-method control-flow graphs: identifier tables, class definitions and
fully decoded instruction streams."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

from riderscope.dex.opcodes import (
    CALL_SITE,
    FIELD,
    FILL_ARRAY_DATA_PAYLOAD,
    METHOD,
    METHOD_HANDLE,
    OPCODES,
    PACKED_SWITCH_PAYLOAD,
    PROTO,
    SPARSE_SWITCH_PAYLOAD,
    STRING,
    TYPE,
    Opcode,
)
from riderscope.errors import Diagnostic, RiderscopeError

log = logging.getLogger(__name__)

DEX_MAGIC = b"dex\n"
SUPPORTED_VERSIONS = (b"035", b"036", b"037", b"038", b"039")
ENDIAN_CONSTANT = 0x12345678
HEADER_SIZE = 0x70
NO_INDEX = 0xFFFFFFFF

ACC_STATIC = 0x8
ACC_NATIVE = 0x100
ACC_ABSTRACT = 0x400


@dataclass(frozen=True, slots=True)
class Instruction:
    offset: int
    opcode: int
    operands: tuple = ()
    targets: tuple = ()
    ref: Optional[int] = None
    # switch keys (parallel to targets) / fill-array payload (element width, raw bytes)
    keys: tuple = ()
    array_data: Optional[tuple] = None

    @property
    def op(self) -> Opcode:
        return OPCODES[self.opcode]

    @property
    def name(self) -> str:
        return OPCODES[self.opcode].name

    @property
    def width(self) -> int:
        return OPCODES[self.opcode].width


@dataclass(frozen=True)
class TryBlock:
    start: int
    count: int
    handlers: tuple  # handler addresses, catch-all last when present
    exception_types: tuple = ()  # type index per typed handler (catch-all has none)


@dataclass(frozen=True)
class MethodBody:
    method_ref: int
    registers: int
    ins: int
    outs: int
    instructions: tuple
    invoked_methods: tuple
    tries: tuple = ()
    insns_size: int = 0


@dataclass(frozen=True)
class MethodRef:
    class_descriptor: str
    name: str
    proto: int


@dataclass(frozen=True)
class Proto:
    shorty: str
    return_type: str
    parameters: tuple


@dataclass(frozen=True)
class EncodedMethod:
    method_idx: int
    access_flags: int
    body: Optional[MethodBody]
    virtual: bool = False


@dataclass(frozen=True)
class ClassDef:
    descriptor: str
    access_flags: int
    superclass: Optional[str]
    methods: tuple  # of EncodedMethod, direct then virtual


@dataclass(frozen=True)
class DexModule:
    version: str
    strings: tuple
    types: tuple
    protos: tuple
    fields: tuple
    methods: tuple
    classes: tuple
    source_digest: str
    diagnostics: tuple = field(default=(), compare=False)

    def method_name(self, index: int) -> str:
        return method_signature(self, index)

    def bodies(self):
        for cls in self.classes:
            for m in cls.methods:
                if m.body is not None:
                    yield cls, m


def descriptor_to_dotted(descriptor: str) -> str:
    """``Lcom/foo/Bar;`` -> ``com.foo.Bar``; arrays get a ``[]`` suffix."""
    dims = 0
    while descriptor.startswith("["):
        dims += 1
        descriptor = descriptor[1:]
    if descriptor.startswith("L") and descriptor.endswith(";"):
        base = descriptor[1:-1].replace("/", ".")
    else:
        base = _PRIMITIVES.get(descriptor, descriptor)
    return base + "[]" * dims


_PRIMITIVES = {
    "V": "void", "Z": "boolean", "B": "byte", "S": "short", "C": "char",
    "I": "int", "J": "long", "F": "float", "D": "double",
}


def method_signature(module: DexModule, index: int) -> str:
    ref = module.methods[index]
    return f"{descriptor_to_dotted(ref.class_descriptor)}.{ref.name}"


# -- low-level readers -------------------------------------------------------

def read_uleb128(data, pos: int) -> tuple[int, int]:
    result = shift = 0
    for i in range(5):
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7
    raise IndexError("uleb128 longer than 5 bytes")


def read_sleb128(data, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        shift += 7
        if b < 0x80:
            if b & 0x40:
                result -= 1 << shift
            return result, pos
        if shift >= 35:
            raise IndexError("sleb128 longer than 5 bytes")


def decode_mutf8(raw: bytes) -> str:
    raw = raw.replace(b"\xc0\x80", b"\x00")
    text = raw.decode("utf-8", errors="surrogatepass")
    # re-pair surrogates that MUTF-8 stores as two 3-byte sequences
    return text.encode("utf-16-le", errors="surrogatepass").decode("utf-16-le", errors="replace")


def _s(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


# -- instruction decoding ----------------------------------------------------

class _MethodError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _payload_width(units, pc: int) -> int:
    ident = units[pc]
    if ident == PACKED_SWITCH_PAYLOAD:
        return units[pc + 1] * 2 + 4
    if ident == SPARSE_SWITCH_PAYLOAD:
        return units[pc + 1] * 4 + 2
    elem = units[pc + 1]
    count = units[pc + 2] | (units[pc + 3] << 16)
    return (count * elem + 1) // 2 + 4


def _read_payload(units, addr: int, expected: int):
    if not 0 <= addr < len(units) or units[addr] != expected:
        raise _MethodError("DEX_BAD_INDEX", f"payload at {addr} missing")
    try:
        if expected == PACKED_SWITCH_PAYLOAD:
            size = units[addr + 1]
            first = _s(units[addr + 2] | (units[addr + 3] << 16), 32)
            rel = [_s(units[addr + 4 + 2 * i] | (units[addr + 5 + 2 * i] << 16), 32) for i in range(size)]
            return tuple(first + i for i in range(size)), rel
        if expected == SPARSE_SWITCH_PAYLOAD:
            size = units[addr + 1]
            base = addr + 2
            keys = [_s(units[base + 2 * i] | (units[base + 2 * i + 1] << 16), 32) for i in range(size)]
            base += 2 * size
            rel = [_s(units[base + 2 * i] | (units[base + 2 * i + 1] << 16), 32) for i in range(size)]
            return tuple(keys), rel
        elem = units[addr + 1]
        count = units[addr + 2] | (units[addr + 3] << 16)
        nbytes = elem * count
        raw = struct.pack(f"<{(nbytes + 1) // 2}H", *units[addr + 4: addr + 4 + (nbytes + 1) // 2])
        return (elem, raw[:nbytes]), None
    except (IndexError, struct.error):
        raise _MethodError("DEX_TRUNCATED", f"payload at {addr} runs past code end")


def decode_instructions(units) -> list[Instruction]:
    """Decode a code-unit sequence into instructions.

    Payload pseudo-instructions (and the alignment nop in front of them) are
    consumed for width only; the switch/fill-array instruction that points at
    a payload carries its resolved contents.
    """
    n = len(units)
    raw: list[tuple[int, Opcode, tuple, Optional[int], Optional[int]]] = []
    payload_starts = set()
    pc = 0
    while pc < n:
        u = units[pc]
        opv = u & 0xFF
        if opv == 0 and u in (PACKED_SWITCH_PAYLOAD, SPARSE_SWITCH_PAYLOAD, FILL_ARRAY_DATA_PAYLOAD):
            try:
                width = _payload_width(units, pc)
            except IndexError:
                raise _MethodError("DEX_TRUNCATED", f"payload header at {pc} truncated") from None
            if pc + width > n:
                raise _MethodError("DEX_TRUNCATED", f"payload at {pc} runs past code end")
            payload_starts.add(pc)
            pc += width
            continue
        op = OPCODES[opv]
        w = op.width
        if pc + w > n:
            raise _MethodError("DEX_TRUNCATED", f"{op.name} at {pc} runs past code end")
        operands, ref, rel = _decode_fields(op, units, pc, u)
        raw.append((pc, op, operands, ref, rel))
        pc += w

    out = []
    for i, (pc, op, operands, ref, rel) in enumerate(raw):
        if op.value == 0 and pc + 1 in payload_starts:
            continue  # alignment padding
        targets: tuple = ()
        keys: tuple = ()
        array_data = None
        if op.fmt == "31t":
            addr = pc + rel
            if op.name == "packed-switch":
                keys, rels = _read_payload(units, addr, PACKED_SWITCH_PAYLOAD)
                targets = tuple(pc + r for r in rels)
            elif op.name == "sparse-switch":
                keys, rels = _read_payload(units, addr, SPARSE_SWITCH_PAYLOAD)
                targets = tuple(pc + r for r in rels)
            else:
                array_data, _ = _read_payload(units, addr, FILL_ARRAY_DATA_PAYLOAD)
        elif rel is not None:
            targets = (pc + rel,)
        out.append(Instruction(pc, op.value, operands, targets, ref, keys, array_data))
    return out


def _decode_fields(op: Opcode, u, pc: int, w0: int):
    """Returns (operands, ref index, relative branch offset)."""
    fmt = op.fmt
    a8 = w0 >> 8
    if fmt == "10x":
        return (), None, None
    if fmt == "12x":
        return (a8 & 0xF, a8 >> 4), None, None
    if fmt == "11n":
        return (a8 & 0xF, _s(a8 >> 4, 4)), None, None
    if fmt == "11x":
        return (a8,), None, None
    if fmt == "10t":
        return (), None, _s(a8, 8)
    w1 = u[pc + 1]
    if fmt == "20t":
        return (), None, _s(w1, 16)
    if fmt in ("22x", "20bc", "21h"):
        return (a8, w1), None, None
    if fmt == "21t":
        return (a8,), None, _s(w1, 16)
    if fmt == "21s":
        return (a8, _s(w1, 16)), None, None
    if fmt == "21c":
        return (a8,), w1, None
    if fmt == "23x":
        return (a8, w1 & 0xFF, w1 >> 8), None, None
    if fmt == "22b":
        return (a8, w1 & 0xFF, _s(w1 >> 8, 8)), None, None
    if fmt == "22t":
        return (a8 & 0xF, a8 >> 4), None, _s(w1, 16)
    if fmt == "22s":
        return (a8 & 0xF, a8 >> 4, _s(w1, 16)), None, None
    if fmt in ("22c", "22cs"):
        return (a8 & 0xF, a8 >> 4), w1, None
    w2 = u[pc + 2]
    v32 = w1 | (w2 << 16)
    if fmt == "30t":
        return (), None, _s(v32, 32)
    if fmt == "32x":
        return (w1, w2), None, None
    if fmt == "31i":
        return (a8, _s(v32, 32)), None, None
    if fmt == "31t":
        return (a8,), None, _s(v32, 32)
    if fmt == "31c":
        return (a8,), v32, None
    if fmt in ("35c", "35ms", "35mi", "45cc"):
        count = a8 >> 4
        regs = (w2 & 0xF, (w2 >> 4) & 0xF, (w2 >> 8) & 0xF, w2 >> 12, a8 & 0xF)[:count]
        if fmt == "45cc":
            return regs + (u[pc + 3],), w1, None
        return regs, w1, None
    if fmt in ("3rc", "3rms", "3rmi"):
        return (w2, a8), w1, None
    if fmt == "4rcc":
        return (w2, a8, u[pc + 3]), w1, None
    if fmt == "51l":
        v = w1 | (w2 << 16) | (u[pc + 3] << 32) | (u[pc + 4] << 48)
        return (a8, _s(v, 64)), None, None
    raise AssertionError(fmt)


# -- container parsing -------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.size = len(data)

    def u32(self, off: int) -> int:
        return struct.unpack_from("<I", self.data, off)[0]

    def u16(self, off: int) -> int:
        return struct.unpack_from("<H", self.data, off)[0]

    def table(self, off: int, count: int, item: int, what: str):
        if count and (off <= 0 or off + count * item > self.size):
            raise RiderscopeError("DEX_TRUNCATED", f"{what} table [{off}, +{count}x{item}) outside file")


def parse_dex(data: bytes) -> DexModule:
    data = bytes(data)
    if len(data) < 8 or data[:4] != DEX_MAGIC or data[7] != 0:
        raise RiderscopeError("DEX_MAGIC", "not a Dalvik executable")
    version = data[4:7]
    if version not in SUPPORTED_VERSIONS:
        raise RiderscopeError("DEX_MAGIC", f"unsupported dex version {version.decode(errors='replace')}")
    if len(data) < HEADER_SIZE:
        raise RiderscopeError("DEX_TRUNCATED", "header truncated")
    r = _Reader(data)
    file_size = r.u32(0x20)
    if file_size > len(data):
        raise RiderscopeError("DEX_TRUNCATED", f"declared size {file_size} > actual {len(data)}")
    if r.u32(0x28) != ENDIAN_CONSTANT:
        raise RiderscopeError("DEX_MAGIC", "unsupported endian tag")

    (string_ids_size, string_ids_off, type_ids_size, type_ids_off,
     proto_ids_size, proto_ids_off, field_ids_size, field_ids_off,
     method_ids_size, method_ids_off, class_defs_size, class_defs_off) = struct.unpack_from("<12I", data, 0x38)
    r.table(string_ids_off, string_ids_size, 4, "string_ids")
    r.table(type_ids_off, type_ids_size, 4, "type_ids")
    r.table(proto_ids_off, proto_ids_size, 12, "proto_ids")
    r.table(field_ids_off, field_ids_size, 8, "field_ids")
    r.table(method_ids_off, method_ids_size, 8, "method_ids")
    r.table(class_defs_off, class_defs_size, 32, "class_defs")

    try:
        strings = []
        for i in range(string_ids_size):
            off = r.u32(string_ids_off + 4 * i)
            _, start = read_uleb128(data, off)
            end = data.index(b"\x00", start)
            strings.append(decode_mutf8(data[start:end]))
    except (IndexError, ValueError, struct.error) as exc:
        raise RiderscopeError("DEX_TRUNCATED", f"string data: {exc}") from None

    def string(idx):
        if idx >= len(strings):
            raise RiderscopeError("DEX_BAD_INDEX", f"string index {idx} out of range")
        return strings[idx]

    types = tuple(string(r.u32(type_ids_off + 4 * i)) for i in range(type_ids_size))

    def type_(idx):
        if idx >= len(types):
            raise RiderscopeError("DEX_BAD_INDEX", f"type index {idx} out of range")
        return types[idx]

    def type_list(off):
        if off == 0:
            return ()
        if off + 4 > len(data):
            raise RiderscopeError("DEX_TRUNCATED", "type_list outside file")
        n = r.u32(off)
        if off + 4 + 2 * n > len(data):
            raise RiderscopeError("DEX_TRUNCATED", "type_list outside file")
        return tuple(type_(r.u16(off + 4 + 2 * k)) for k in range(n))

    protos = []
    for i in range(proto_ids_size):
        shorty_idx, ret_idx, params_off = struct.unpack_from("<3I", data, proto_ids_off + 12 * i)
        protos.append(Proto(string(shorty_idx), type_(ret_idx), type_list(params_off)))

    fields = []
    for i in range(field_ids_size):
        cls_idx, type_idx, name_idx = struct.unpack_from("<HHI", data, field_ids_off + 8 * i)
        fields.append((type_(cls_idx), type_(type_idx), string(name_idx)))

    methods = []
    for i in range(method_ids_size):
        cls_idx, proto_idx, name_idx = struct.unpack_from("<HHI", data, method_ids_off + 8 * i)
        if proto_idx >= len(protos):
            raise RiderscopeError("DEX_BAD_INDEX", f"proto index {proto_idx} out of range")
        methods.append(MethodRef(type_(cls_idx), string(name_idx), proto_idx))

    limits = {STRING: len(strings), TYPE: len(types), FIELD: len(fields), METHOD: len(methods), PROTO: len(protos)}
    diagnostics: list[Diagnostic] = []
    classes = []
    for i in range(class_defs_size):
        (cls_idx, access, super_idx, _ifaces, _src, _annot,
         class_data_off, _static) = struct.unpack_from("<8I", data, class_defs_off + 32 * i)
        descriptor = type_(cls_idx)
        superclass = None if super_idx == NO_INDEX else type_(super_idx)
        encoded = []
        if class_data_off:
            encoded = _parse_class_data(data, r, class_data_off, descriptor, limits, diagnostics)
        classes.append(ClassDef(descriptor, access, superclass, tuple(encoded)))

    module = DexModule(
        version=version.decode(),
        strings=tuple(strings),
        types=types,
        protos=tuple(protos),
        fields=tuple(fields),
        methods=tuple(methods),
        classes=tuple(classes),
        source_digest=hashlib.sha256(data).hexdigest(),
        diagnostics=tuple(diagnostics),
    )
    return module


def _parse_class_data(data, r, off, descriptor, limits, diagnostics):
    try:
        sf, off = read_uleb128(data, off)
        inf, off = read_uleb128(data, off)
        dm, off = read_uleb128(data, off)
        vm, off = read_uleb128(data, off)
        for _ in range(sf + inf):
            _, off = read_uleb128(data, off)
            _, off = read_uleb128(data, off)
        entries = []
        for count, virtual in ((dm, False), (vm, True)):
            idx = 0
            for _ in range(count):
                diff, off = read_uleb128(data, off)
                flags, off = read_uleb128(data, off)
                code_off, off = read_uleb128(data, off)
                idx += diff
                entries.append((idx, flags, code_off, virtual))
    except IndexError:
        raise RiderscopeError("DEX_TRUNCATED", f"class_data for {descriptor} truncated") from None

    out = []
    for idx, flags, code_off, virtual in entries:
        if idx >= limits[METHOD]:
            diagnostics.append(Diagnostic("DEX_BAD_INDEX", f"{descriptor}: method index {idx} out of range"))
            continue
        body = None
        if code_off:
            try:
                body = _parse_code_item(data, r, code_off, idx, limits)
            except _MethodError as exc:
                diagnostics.append(Diagnostic(exc.code, f"{descriptor} method {idx}: {exc}"))
                continue
        out.append(EncodedMethod(idx, flags, body, virtual))
    return out


def _parse_code_item(data, r, off, method_idx, limits) -> MethodBody:
    if off + 16 > len(data):
        raise _MethodError("DEX_TRUNCATED", "code_item header outside file")
    registers, ins, outs, tries_size, _debug, insns_size = struct.unpack_from("<4H2I", data, off)
    start = off + 16
    if start + 2 * insns_size > len(data):
        raise _MethodError("DEX_TRUNCATED", "insns outside file")
    units = struct.unpack_from(f"<{insns_size}H", data, start)
    instructions = decode_instructions(units)

    invoked = []
    for insn in instructions:
        kind = insn.op.ref
        if kind is None or kind in (CALL_SITE, METHOD_HANDLE):
            continue
        if insn.ref >= limits[kind]:
            raise _MethodError("DEX_BAD_INDEX", f"{insn.name} at {insn.offset}: {kind} index {insn.ref} out of range")
        if kind == METHOD:
            invoked.append(insn.ref)

    tries = ()
    if tries_size:
        tries = _parse_tries(data, start + 2 * insns_size + (2 if insns_size % 2 else 0), tries_size)
    return MethodBody(method_idx, registers, ins, outs, tuple(instructions), tuple(invoked), tries, insns_size)


def _parse_tries(data, off, tries_size):
    try:
        items = [struct.unpack_from("<IHH", data, off + 8 * i) for i in range(tries_size)]
        list_off = off + 8 * tries_size
        out = []
        for start, count, handler_off in items:
            pos = list_off + handler_off
            size, pos = read_sleb128(data, pos)
            addrs, types = [], []
            for _ in range(abs(size)):
                type_idx, pos = read_uleb128(data, pos)
                addr, pos = read_uleb128(data, pos)
                types.append(type_idx)
                addrs.append(addr)
            if size <= 0:
                addr, pos = read_uleb128(data, pos)
                addrs.append(addr)
            out.append(TryBlock(start, count, tuple(addrs), tuple(types)))
        return tuple(out)
    except (IndexError, struct.error):
        raise _MethodError("DEX_TRUNCATED", "try/catch data outside file") from None
