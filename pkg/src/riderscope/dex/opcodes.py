"""Dalvik opcode table.

Each entry carries the mnemonic, the instruction format identifier (which
fixes the width in 16-bit code units), the kind of constant-pool reference
the instruction carries, and the coarse category used by the CFG
fingerprint.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

# width in 16-bit code units per format
FORMAT_WIDTH = {
    "10x": 1, "12x": 1, "11n": 1, "11x": 1, "10t": 1,
    "20t": 2, "20bc": 2, "22x": 2, "21t": 2, "21s": 2, "21h": 2, "21c": 2,
    "23x": 2, "22b": 2, "22t": 2, "22s": 2, "22c": 2, "22cs": 2,
    "30t": 3, "32x": 3, "31i": 3, "31t": 3, "31c": 3,
    "35c": 3, "35ms": 3, "35mi": 3, "3rc": 3, "3rms": 3, "3rmi": 3,
    "45cc": 4, "4rcc": 4, "51l": 5,
}

CATEGORIES = (
    "move", "const", "invoke", "branch", "compare", "arith",
    "field", "array", "return", "throw", "monitor", "other",
)
CATEGORY_CODE = {name: i for i, name in enumerate(CATEGORIES)}

# reference kinds
STRING, TYPE, FIELD, METHOD, CALL_SITE, METHOD_HANDLE, PROTO = (
    "string", "type", "field", "method", "call_site", "method_handle", "proto",
)


@dataclass(frozen=True)
class Opcode:
    value: int
    name: str
    fmt: str
    category: str
    ref: Optional[str] = None

    @property
    def width(self) -> int:
        return FORMAT_WIDTH[self.fmt]

    @property
    def is_invoke(self) -> bool:
        return self.category == "invoke"

    @property
    def is_branch(self) -> bool:
        return self.name.startswith(("goto", "if-"))

    @property
    def is_switch(self) -> bool:
        return self.name in ("packed-switch", "sparse-switch")

    @property
    def is_conditional(self) -> bool:
        return self.name.startswith("if-")

    @property
    def ends_block(self) -> bool:
        return self.is_branch or self.is_switch or self.category in ("return", "throw")

    @property
    def can_continue(self) -> bool:
        """Whether control may fall through to the next instruction."""
        if self.category in ("return", "throw"):
            return False
        return not self.name.startswith("goto")


OPCODES: dict[int, Opcode] = {}
BY_NAME: dict[str, Opcode] = {}


def _op(value, name, fmt, category, ref=None):
    op = Opcode(value, name, fmt, category, ref)
    OPCODES[value] = op
    if not name.startswith("unused"):
        BY_NAME[name] = op


_op(0x00, "nop", "10x", "other")
_op(0x01, "move", "12x", "move")
_op(0x02, "move/from16", "22x", "move")
_op(0x03, "move/16", "32x", "move")
_op(0x04, "move-wide", "12x", "move")
_op(0x05, "move-wide/from16", "22x", "move")
_op(0x06, "move-wide/16", "32x", "move")
_op(0x07, "move-object", "12x", "move")
_op(0x08, "move-object/from16", "22x", "move")
_op(0x09, "move-object/16", "32x", "move")
_op(0x0A, "move-result", "11x", "move")
_op(0x0B, "move-result-wide", "11x", "move")
_op(0x0C, "move-result-object", "11x", "move")
_op(0x0D, "move-exception", "11x", "move")
_op(0x0E, "return-void", "10x", "return")
_op(0x0F, "return", "11x", "return")
_op(0x10, "return-wide", "11x", "return")
_op(0x11, "return-object", "11x", "return")
_op(0x12, "const/4", "11n", "const")
_op(0x13, "const/16", "21s", "const")
_op(0x14, "const", "31i", "const")
_op(0x15, "const/high16", "21h", "const")
_op(0x16, "const-wide/16", "21s", "const")
_op(0x17, "const-wide/32", "31i", "const")
_op(0x18, "const-wide", "51l", "const")
_op(0x19, "const-wide/high16", "21h", "const")
_op(0x1A, "const-string", "21c", "const", STRING)
_op(0x1B, "const-string/jumbo", "31c", "const", STRING)
_op(0x1C, "const-class", "21c", "const", TYPE)
_op(0x1D, "monitor-enter", "11x", "monitor")
_op(0x1E, "monitor-exit", "11x", "monitor")
_op(0x1F, "check-cast", "21c", "other", TYPE)
_op(0x20, "instance-of", "22c", "other", TYPE)
_op(0x21, "array-length", "12x", "array")
_op(0x22, "new-instance", "21c", "other", TYPE)
_op(0x23, "new-array", "22c", "array", TYPE)
_op(0x24, "filled-new-array", "35c", "array", TYPE)
_op(0x25, "filled-new-array/range", "3rc", "array", TYPE)
_op(0x26, "fill-array-data", "31t", "array")
_op(0x27, "throw", "11x", "throw")
_op(0x28, "goto", "10t", "branch")
_op(0x29, "goto/16", "20t", "branch")
_op(0x2A, "goto/32", "30t", "branch")
_op(0x2B, "packed-switch", "31t", "branch")
_op(0x2C, "sparse-switch", "31t", "branch")
for _i, _n in enumerate(("cmpl-float", "cmpg-float", "cmpl-double", "cmpg-double", "cmp-long")):
    _op(0x2D + _i, _n, "23x", "compare")
for _i, _n in enumerate(("eq", "ne", "lt", "ge", "gt", "le")):
    _op(0x32 + _i, f"if-{_n}", "22t", "branch")
    _op(0x38 + _i, f"if-{_n}z", "21t", "branch")
for _v in range(0x3E, 0x44):
    _op(_v, f"unused-{_v:02x}", "10x", "other")
_SUFFIXES = ("", "-wide", "-object", "-boolean", "-byte", "-char", "-short")
for _i, _s in enumerate(_SUFFIXES):
    _op(0x44 + _i, f"aget{_s}", "23x", "array")
    _op(0x4B + _i, f"aput{_s}", "23x", "array")
    _op(0x52 + _i, f"iget{_s}", "22c", "field", FIELD)
    _op(0x59 + _i, f"iput{_s}", "22c", "field", FIELD)
    _op(0x60 + _i, f"sget{_s}", "21c", "field", FIELD)
    _op(0x67 + _i, f"sput{_s}", "21c", "field", FIELD)
for _i, _n in enumerate(("virtual", "super", "direct", "static", "interface")):
    _op(0x6E + _i, f"invoke-{_n}", "35c", "invoke", METHOD)
    _op(0x74 + _i, f"invoke-{_n}/range", "3rc", "invoke", METHOD)
_op(0x73, "unused-73", "10x", "other")
_op(0x79, "unused-79", "10x", "other")
_op(0x7A, "unused-7a", "10x", "other")
_UNARY = (
    "neg-int", "not-int", "neg-long", "not-long", "neg-float", "neg-double",
    "int-to-long", "int-to-float", "int-to-double", "long-to-int", "long-to-float",
    "long-to-double", "float-to-int", "float-to-long", "float-to-double",
    "double-to-int", "double-to-long", "double-to-float", "int-to-byte",
    "int-to-char", "int-to-short",
)
for _i, _n in enumerate(_UNARY):
    _op(0x7B + _i, _n, "12x", "arith")
_BINOPS = []
for _t, _ops in (
    ("int", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
    ("long", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
    ("float", ("add", "sub", "mul", "div", "rem")),
    ("double", ("add", "sub", "mul", "div", "rem")),
):
    _BINOPS.extend(f"{o}-{_t}" for o in _ops)
for _i, _n in enumerate(_BINOPS):
    _op(0x90 + _i, _n, "23x", "arith")
    _op(0xB0 + _i, f"{_n}/2addr", "12x", "arith")
for _i, _n in enumerate(("add-int", "rsub-int", "mul-int", "div-int", "rem-int", "and-int", "or-int", "xor-int")):
    _op(0xD0 + _i, f"{_n}/lit16" if _n != "rsub-int" else "rsub-int", "22s", "arith")
for _i, _n in enumerate(("add", "rsub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")):
    _op(0xD8 + _i, f"{_n}-int/lit8", "22b", "arith")
for _v in range(0xE3, 0xFA):
    _op(_v, f"unused-{_v:02x}", "10x", "other")
_op(0xFA, "invoke-polymorphic", "45cc", "invoke", METHOD)
_op(0xFB, "invoke-polymorphic/range", "4rcc", "invoke", METHOD)
_op(0xFC, "invoke-custom", "35c", "invoke", CALL_SITE)
_op(0xFD, "invoke-custom/range", "3rc", "invoke", CALL_SITE)
_op(0xFE, "const-method-handle", "21c", "const", METHOD_HANDLE)
_op(0xFF, "const-method-type", "21c", "const", PROTO)

assert len(OPCODES) == 256

# pseudo-instruction identifiers (low byte 0x00 = nop)
PACKED_SWITCH_PAYLOAD = 0x0100
SPARSE_SWITCH_PAYLOAD = 0x0200
FILL_ARRAY_DATA_PAYLOAD = 0x0300
