"""Per-method basic-block CFGs, framework-API annotation, and fingerprints.

A fingerprint is two 64-bit xxh64 digests (seed 0):

* ``structural`` hashes a canonical serialization of the CFG shape: blocks
  in depth-first preorder from the entry (fall-through successor first, then
  branch targets in operand order), each block written as its instruction
  count, its opcode-category codes and its successor preorder numbers.
  Unreachable blocks follow in offset order.
* ``features`` hashes the ascending list of token hashes of the distinct
  framework APIs invoked anywhere in the method.

Identifiers of non-framework classes, methods, fields and string constants
never enter either digest.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import xxhash

from riderscope.dex.opcodes import CATEGORY_CODE, METHOD
from riderscope.dex.parser import DexModule, MethodBody, descriptor_to_dotted, method_signature
from riderscope.errors import Diagnostic, RiderscopeError

log = logging.getLogger(__name__)

DEFAULT_API_PREFIXES = ("android.", "java.", "javax.", "dalvik.")
HASH_SEED = 0


def hash64(data: bytes) -> int:
    return xxhash.xxh64_intdigest(data, seed=HASH_SEED)


def token_hash(token: str) -> int:
    return hash64(token.encode("utf-8"))


@dataclass(frozen=True)
class BasicBlock:
    start: int  # index into the instruction list
    end: int  # exclusive
    offset: int  # code-unit offset of the first instruction
    unreachable: bool = False


@dataclass(frozen=True)
class AnnotatedCfg:
    blocks: tuple
    edges: tuple
    annotations: tuple  # per block: sorted tuple of API tokens (multiset)
    successors: tuple  # per block: ordered successor indices
    instructions: tuple

    def block_categories(self, i: int) -> tuple:
        b = self.blocks[i]
        return tuple(CATEGORY_CODE[insn.op.category] for insn in self.instructions[b.start:b.end])

    def tokens(self) -> frozenset:
        return frozenset(t for ann in self.annotations for t in ann)


@dataclass(frozen=True, order=True)
class MethodFingerprint:
    structural: int
    features: int

    @property
    def combined(self) -> int:
        return (self.structural << 64) | self.features

    @property
    def hex(self) -> str:
        return f"{self.combined:032x}"

    @classmethod
    def from_hex(cls, text: str) -> "MethodFingerprint":
        v = int(text, 16)
        return cls(v >> 64, v & 0xFFFFFFFFFFFFFFFF)

    def __str__(self) -> str:
        return self.hex


def build_cfg(body: MethodBody, exceptional_edges: bool = False) -> AnnotatedCfg:
    insns = body.instructions
    if not insns:
        raise RiderscopeError("CFG_MALFORMED", f"method {body.method_ref} has no instructions")
    index_of = {insn.offset: i for i, insn in enumerate(insns)}

    def target_index(offset, insn):
        try:
            return index_of[offset]
        except KeyError:
            raise RiderscopeError(
                "CFG_MALFORMED", f"{insn.name} at {insn.offset} targets {offset}, not an instruction boundary"
            ) from None

    leaders = {0}
    for i, insn in enumerate(insns):
        for t in insn.targets:
            leaders.add(target_index(t, insn))
        if insn.op.ends_block and i + 1 < len(insns):
            leaders.add(i + 1)
    handler_blocks = []
    if exceptional_edges:
        for tb in body.tries:
            hs = []
            for addr in tb.handlers:
                if addr not in index_of:
                    raise RiderscopeError("CFG_MALFORMED", f"handler at {addr} is not an instruction boundary")
                leaders.add(index_of[addr])
                hs.append(index_of[addr])
            handler_blocks.append((tb.start, tb.start + tb.count, hs))

    starts = sorted(leaders)
    block_of = {}
    bounds = []
    for k, s in enumerate(starts):
        e = starts[k + 1] if k + 1 < len(starts) else len(insns)
        bounds.append((s, e))
        block_of[s] = k

    succs = []
    for k, (s, e) in enumerate(bounds):
        last = insns[e - 1]
        out = []
        if last.op.can_continue and e < len(insns):
            out.append(block_of[e])
        for t in last.targets:
            out.append(block_of[index_of[t]])
        for lo, hi, hs in handler_blocks:
            first, end_off = insns[s].offset, last.offset + last.width
            if first < hi and end_off > lo:
                out.extend(block_of[h] for h in hs)
        seen = []
        for b in out:
            if b not in seen:
                seen.append(b)
        succs.append(tuple(seen))

    reachable = {0}
    stack = [0]
    while stack:
        for nxt in succs[stack.pop()]:
            if nxt not in reachable:
                reachable.add(nxt)
                stack.append(nxt)
    blocks = tuple(
        BasicBlock(s, e, insns[s].offset, unreachable=k not in reachable) for k, (s, e) in enumerate(bounds)
    )
    edges = tuple((k, t) for k, ts in enumerate(succs) for t in ts)
    return AnnotatedCfg(blocks, edges, tuple(() for _ in blocks), tuple(succs), insns)


def annotate(cfg: AnnotatedCfg, module: DexModule, api_prefixes: Iterable[str] = DEFAULT_API_PREFIXES) -> AnnotatedCfg:
    prefixes = tuple(api_prefixes)
    annotations = []
    for b in cfg.blocks:
        tokens = []
        for insn in cfg.instructions[b.start:b.end]:
            if insn.op.is_invoke and insn.op.ref == METHOD:
                name = method_signature(module, insn.ref)
                if name.startswith(prefixes):
                    tokens.append(name)
        annotations.append(tuple(sorted(tokens)))
    return replace(cfg, annotations=tuple(annotations))


def _preorder(cfg: AnnotatedCfg) -> list[int]:
    order, seen = [], set()
    stack = [0]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        order.append(b)
        stack.extend(reversed([s for s in cfg.successors[b] if s not in seen]))
    order.extend(k for k in range(len(cfg.blocks)) if k not in seen)
    return order


def canonical_serialization(cfg: AnnotatedCfg) -> bytes:
    order = _preorder(cfg)
    number = {b: n for n, b in enumerate(order)}
    out = bytearray(struct.pack("<I", len(order)))
    for b in order:
        cats = cfg.block_categories(b)
        out += struct.pack("<I", len(cats)) + bytes(cats)
        succ = cfg.successors[b]
        out += struct.pack(f"<H{len(succ)}I", len(succ), *(number[s] for s in succ))
    return bytes(out)


def fingerprint(cfg: AnnotatedCfg) -> MethodFingerprint:
    structural = hash64(canonical_serialization(cfg))
    hashes = sorted({token_hash(t) for t in cfg.tokens()})
    features = hash64(struct.pack(f"<{len(hashes)}Q", *hashes))
    return MethodFingerprint(structural, features)


@dataclass(frozen=True)
class MethodPrint:
    method_idx: int
    class_name: str  # type descriptor of the defining class
    method_name: str
    fingerprint: MethodFingerprint
    tokens: tuple  # sorted distinct framework APIs invoked

    @property
    def dotted_class(self) -> str:
        return descriptor_to_dotted(self.class_name)


def fingerprint_module(
    module: DexModule,
    api_prefixes: Iterable[str] = DEFAULT_API_PREFIXES,
    exceptional_edges: bool = False,
    diagnostics: Optional[list] = None,
) -> list[MethodPrint]:
    """Fingerprint every method with a body; malformed ones are skipped and reported."""
    prefixes = tuple(api_prefixes)
    out = []
    for cls, em in module.bodies():
        ref = module.methods[em.method_idx]
        try:
            cfg = annotate(build_cfg(em.body, exceptional_edges), module, prefixes)
        except RiderscopeError as exc:
            if diagnostics is not None:
                diagnostics.append(Diagnostic(exc.code, f"{cls.descriptor}->{ref.name}: {exc.message}"))
            continue
        out.append(MethodPrint(em.method_idx, cls.descriptor, ref.name, fingerprint(cfg), tuple(sorted(cfg.tokens()))))
    return out


def render_cfg(cfg: AnnotatedCfg, module: Optional[DexModule] = None) -> str:
    """Textual dump used by the ``cfg`` debug command."""
    lines = []
    for k, b in enumerate(cfg.blocks):
        flag = " (unreachable)" if b.unreachable else ""
        succ = ", ".join(f"B{s}" for s in cfg.successors[k]) or "-"
        lines.append(f"B{k} @{b.offset:04x}{flag} -> {succ}")
        for insn in cfg.instructions[b.start:b.end]:
            extra = ""
            if insn.op.ref == METHOD and module is not None:
                extra = " " + method_signature(module, insn.ref)
            elif insn.targets:
                extra = " " + ", ".join(f"@{t:04x}" for t in insn.targets)
            lines.append(f"    {insn.offset:04x}: {insn.name}{extra}")
        if cfg.annotations[k]:
            lines.append(f"    api: {{{', '.join(cfg.annotations[k])}}}")
    return "\n".join(lines) + "\n"
