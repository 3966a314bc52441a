"""Identifier-renaming rewriter: a ProGuard-style obfuscation of app-defined symbols.

Parses a Dalvik executable, renames every class, method and field that is not
under a framework prefix, and reassembles it. Instruction streams, register
usage and control flow are preserved exactly.
"""
from __future__ import annotations

import random
import string as _string
from typing import Iterable

from riderscope.cfg import DEFAULT_API_PREFIXES
from riderscope.dex.opcodes import FIELD, METHOD, PROTO, STRING, TYPE
from riderscope.dex.parser import DexModule, descriptor_to_dotted, parse_dex
from riderscope.dex.writer import DexBuilder, FieldSym, Insn, Label, MethodSym, TryRange

KEEP_METHOD_NAMES = frozenset({"<init>", "<clinit>"})


class _Namer:
    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self._used: set = set()

    def fresh(self, length: int = 6) -> str:
        while True:
            name = "".join(self._rng.choice(_string.ascii_lowercase) for _ in range(length))
            if name not in self._used:
                self._used.add(name)
                return name


class Renamer:
    def __init__(self, module: DexModule, seed: int = 0, framework_prefixes: Iterable[str] = DEFAULT_API_PREFIXES):
        self.module = module
        self.prefixes = tuple(framework_prefixes)
        namer = _Namer(seed)
        self.classes: dict = {}
        for t in sorted(module.types):
            base = t.lstrip("[")
            if base.startswith("L") and not self.is_framework(base) and base not in self.classes:
                self.classes[base] = f"Lo/{namer.fresh()};"
        defined = {(cls.descriptor, module.methods[m.method_idx].name) for cls in module.classes for m in cls.methods}
        self.methods: dict = {}
        for key in sorted(defined):
            if key[1] not in KEEP_METHOD_NAMES and not self.is_framework(key[0]):
                self.methods[key] = namer.fresh(4)
        self.fields: dict = {}
        for cls, _typ, name in sorted(set(module.fields)):
            if not self.is_framework(cls):
                self.fields.setdefault((cls, name), namer.fresh(3))

    def is_framework(self, descriptor: str) -> bool:
        return descriptor_to_dotted(descriptor).startswith(self.prefixes)

    def type(self, t: str) -> str:
        dims = len(t) - len(t.lstrip("["))
        return "[" * dims + self.classes.get(t[dims:], t[dims:])

    def method_sym(self, idx: int) -> MethodSym:
        ref = self.module.methods[idx]
        proto = self.module.protos[ref.proto]
        name = self.methods.get((ref.class_descriptor, ref.name), ref.name)
        return MethodSym(self.type(ref.class_descriptor), name, self.type(proto.return_type),
                         tuple(self.type(p) for p in proto.parameters))

    def field_sym(self, idx: int) -> FieldSym:
        cls, typ, name = self.module.fields[idx]
        return FieldSym(self.type(cls), self.type(typ), self.fields.get((cls, name), name))

    def symbol(self, kind, idx):
        if kind == STRING:
            return self.module.strings[idx]
        if kind == TYPE:
            return self.type(self.module.types[idx])
        if kind == FIELD:
            return self.field_sym(idx)
        if kind == METHOD:
            return self.method_sym(idx)
        if kind == PROTO:
            raise ValueError("proto references are not supported by the rewriter")
        return idx


def _lift_code(body, renamer: Renamer):
    insns = body.instructions
    wanted = set()
    for insn in insns:
        wanted.update(insn.targets)
    for tb in body.tries:
        wanted.update((tb.start, tb.start + tb.count))
        wanted.update(tb.handlers)
    label = {off: f"L{off}" for off in wanted}
    code = []
    for insn in insns:
        if insn.offset in label:
            code.append(Label(label[insn.offset]))
        ref = None
        if insn.op.ref is not None and insn.ref is not None:
            ref = renamer.symbol(insn.op.ref, insn.ref)
        code.append(Insn(insn.name, *insn.operands, ref=ref, targets=tuple(label[t] for t in insn.targets),
                         keys=insn.keys, array_data=insn.array_data))
    end = insns[-1].offset + insns[-1].width if insns else 0
    for off in sorted(o for o in label if o >= end):
        code.append(Label(label[off]))
    tries = []
    for tb in body.tries:
        typed = [(renamer.type(renamer.module.types[t]), label[h]) for t, h in zip(tb.exception_types, tb.handlers)]
        catch_all = label[tb.handlers[-1]] if len(tb.handlers) > len(tb.exception_types) else None
        tries.append(TryRange(label[tb.start], label[tb.start + tb.count], tuple(typed), catch_all))
    return code, tries


def rename_identifiers(data: bytes, seed: int = 0,
                       framework_prefixes: Iterable[str] = DEFAULT_API_PREFIXES) -> bytes:
    """Rewrite ``data`` with all app-defined identifiers replaced by random names."""
    module = parse_dex(data)
    renamer = Renamer(module, seed, framework_prefixes)
    builder = DexBuilder(module.version)
    for cls in module.classes:
        spec = builder.add_class(renamer.type(cls.descriptor),
                                 renamer.type(cls.superclass) if cls.superclass else None, cls.access_flags)
        for em in cls.methods:
            sym = renamer.method_sym(em.method_idx)
            code, tries, registers = None, [], None
            if em.body is not None:
                code, tries = _lift_code(em.body, renamer)
                registers = em.body.registers
            spec.add_method(sym.name, code, return_type=sym.return_type, parameters=sym.parameters,
                            access=em.access_flags, registers=registers, virtual=em.virtual, tries=tries)
    return builder.build()
