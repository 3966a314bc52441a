"""ELF import extraction.

Walks the section header table, resolves ``SHT_DYNSYM`` names through the
string table named by each section's ``sh_link`` and reads ``DT_NEEDED``
entries from ``SHT_DYNAMIC``. Both classes and both byte orders.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from riderscope.errors import RiderscopeError

ELF_MAGIC = b"\x7fELF"
SHT_NOBITS = 8
SHT_DYNAMIC = 6
SHT_DYNSYM = 11
DT_NULL = 0
DT_NEEDED = 1
DT_STRTAB, DT_SYMTAB, DT_STRSZ, DT_SYMENT = 5, 6, 10, 11
SHN_UNDEF = 0
PT_LOAD, PT_DYNAMIC = 1, 2
STB_GLOBAL, STB_WEAK = 1, 2
STT_NOTYPE, STT_FUNC, STT_GNU_IFUNC = 0, 2, 10

MACHINES = {
    3: "x86", 8: "MIPS", 20: "PowerPC", 21: "PowerPC64", 40: "ARM", 62: "x86-64",
    183: "AArch64", 243: "RISC-V",
}


@dataclass(frozen=True)
class ElfFeatureSet:
    resource: str
    imported_functions: frozenset
    needed_libraries: frozenset
    machine: str
    elf_class: int = 32
    big_endian: bool = False

    def to_dict(self) -> dict:
        return {
            "resource": self.resource,
            "machine": self.machine,
            "elf_class": self.elf_class,
            "big_endian": self.big_endian,
            "imported_functions": sorted(self.imported_functions),
            "needed_libraries": sorted(self.needed_libraries),
        }


def _malformed(msg: str):
    return RiderscopeError("ELF_MALFORMED", msg)


def strip_version(name: str) -> str:
    return name.split("@", 1)[0]


def parse_elf_features(data: bytes, digest: str | None = None) -> ElfFeatureSet:
    data = bytes(data)
    if len(data) < 16 or data[:4] != ELF_MAGIC:
        raise _malformed("missing ELF magic or truncated identification")
    ei_class, ei_data = data[4], data[5]
    if ei_class not in (1, 2):
        raise RiderscopeError("ELF_UNSUPPORTED_CLASS", f"EI_CLASS {ei_class}")
    if ei_data not in (1, 2):
        raise _malformed(f"EI_DATA {ei_data}")
    is64 = ei_class == 2
    e = ">" if ei_data == 2 else "<"
    ehdr = struct.Struct(e + ("HHIQQQIHHHHHH" if is64 else "HHIIIIIHHHHHH"))
    if len(data) < 16 + ehdr.size:
        raise _malformed("ELF header truncated")
    (_type, machine, _ver, _entry, _phoff, shoff, _flags, _ehsize, _phentsize, _phnum,
     shentsize, shnum, shstrndx) = ehdr.unpack_from(data, 16)
    digest = digest or hashlib.sha256(data).hexdigest()
    machine_name = MACHINES.get(machine, f"EM_{machine}")

    shdr = struct.Struct(e + ("IIQQQQIIQQ" if is64 else "IIIIIIIIII"))
    sections = []
    if shoff:
        if shentsize < shdr.size:
            raise _malformed(f"e_shentsize {shentsize} too small")
        if shnum == 0:
            if shoff + shdr.size > len(data):
                raise _malformed("section header table outside file")
            shnum = shdr.unpack_from(data, shoff)[5]
        if shoff + shnum * shentsize > len(data):
            raise _malformed("section header table outside file")
        for i in range(shnum):
            name, typ, _fl, _addr, off, size, link, _info, _align, entsize = shdr.unpack_from(data, shoff + i * shentsize)
            if typ != SHT_NOBITS and size and off + size > len(data):
                raise _malformed(f"section {i} [{off}, +{size}) outside file")
            sections.append((typ, off, size, link, entsize))

    def string_at(link: int, idx: int) -> str:
        if link >= len(sections):
            raise _malformed(f"sh_link {link} out of range")
        _t, off, size, _l, _e = sections[link]
        if idx >= size:
            raise _malformed(f"string offset {idx} outside table")
        end = data.find(b"\x00", off + idx, off + size)
        if end < 0:
            raise _malformed("unterminated string")
        return data[off + idx:end].decode("utf-8", errors="replace")

    imports, needed = set(), set()
    sym = struct.Struct(e + ("IBBHQQ" if is64 else "IIIBBH"))
    dyn = struct.Struct(e + ("qQ" if is64 else "iI"))
    for typ, off, size, link, entsize in sections:
        if typ == SHT_DYNSYM:
            step = entsize or sym.size
            if step < sym.size:
                raise _malformed(f"dynsym entsize {entsize} too small")
            for k in range(1, size // step):
                fields = sym.unpack_from(data, off + k * step)
                if is64:
                    name_idx, info, _other, shndx, _v, _s = fields
                else:
                    name_idx, _v, _s, info, _other, shndx = fields
                if shndx != SHN_UNDEF or not name_idx:
                    continue
                if info >> 4 not in (STB_GLOBAL, STB_WEAK) or info & 0xF not in (STT_NOTYPE, STT_FUNC, STT_GNU_IFUNC):
                    continue
                name = strip_version(string_at(link, name_idx))
                if name:
                    imports.add(name)
        elif typ == SHT_DYNAMIC:
            step = entsize or dyn.size
            for k in range(size // step):
                tag, val = dyn.unpack_from(data, off + k * step)
                if tag == DT_NULL:
                    break
                if tag == DT_NEEDED:
                    needed.add(string_at(link, val))
    return ElfFeatureSet(digest, frozenset(imports), frozenset(needed), machine_name, 64 if is64 else 32, ei_data == 2)


# -- tiny writer for synthetic corpora ----------------------------------------

def build_shared_object(imports, needed=(), machine: int = 40, elf_class: int = 32, big_endian: bool = False,
                        comment: bytes = b"") -> bytes:
    """Section-only ELF shared object whose dynamic symbol table imports ``imports``.

    Carries no code; enough for import extraction and ``readelf``.
    """
    is64 = elf_class == 64
    e = ">" if big_endian else "<"
    dynstr = bytearray(b"\x00")
    offs = {}
    for name in list(needed) + list(imports):
        if name not in offs:
            offs[name] = len(dynstr)
            dynstr += name.encode() + b"\x00"
    sym = struct.Struct(e + ("IBBHQQ" if is64 else "IIIBBH"))
    dynsym = bytearray(sym.size)
    for name in imports:
        info = (STB_GLOBAL << 4) | STT_FUNC
        fields = (offs[name], info, 0, SHN_UNDEF, 0, 0) if is64 else (offs[name], 0, 0, info, 0, SHN_UNDEF)
        dynsym += sym.pack(*fields)
    dyn = struct.Struct(e + ("qQ" if is64 else "iI"))
    n_dyn_entries = len(needed) + 5

    def dynamic_section(strtab, symtab):
        entries = [(DT_NEEDED, offs[n]) for n in needed]
        entries += [(DT_STRTAB, strtab), (DT_STRSZ, len(dynstr)), (DT_SYMTAB, symtab), (DT_SYMENT, sym.size),
                    (DT_NULL, 0)]
        return b"".join(dyn.pack(*t) for t in entries)

    shstr = b"\x00.dynstr\x00.dynsym\x00.dynamic\x00.comment\x00.shstrtab\x00"
    names = {n: shstr.index(n.encode() + b"\x00") for n in (".dynstr", ".dynsym", ".dynamic", ".comment", ".shstrtab")}

    ehsize = 64 if is64 else 52
    phdr = struct.Struct(e + ("IIQQQQQQ" if is64 else "IIIIIIII"))
    body = bytearray(ehsize + 2 * phdr.size)
    layout = []
    for blob in (bytes(dynstr), bytes(dynsym), bytes(n_dyn_entries * dyn.size), comment, shstr):
        while len(body) % 8:
            body.append(0)
        layout.append((len(body), len(blob)))
        body += blob
    while len(body) % 8:
        body.append(0)
    shoff = len(body)
    shdr = struct.Struct(e + ("IIQQQQIIQQ" if is64 else "IIIIIIIIII"))
    (o_str, n_str), (o_sym, n_sym), (o_dyn, n_dyn), (o_com, n_com), (o_shs, n_shs) = layout
    body[o_dyn:o_dyn + n_dyn] = dynamic_section(o_str, o_sym)
    # virtual addresses equal file offsets: one PT_LOAD maps the whole image
    headers = [
        (0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
        (names[".dynstr"], 3, 2, o_str, o_str, n_str, 0, 0, 1, 0),
        (names[".dynsym"], SHT_DYNSYM, 2, o_sym, o_sym, n_sym, 1, 1, 8, sym.size),
        (names[".dynamic"], SHT_DYNAMIC, 3, o_dyn, o_dyn, n_dyn, 1, 0, 8, dyn.size),
        (names[".comment"], 1, 0, 0, o_com, n_com, 0, 0, 1, 0),
        (names[".shstrtab"], 3, 0, 0, o_shs, n_shs, 0, 0, 1, 0),
    ]
    for h in headers:
        body += shdr.pack(*h)
    if is64:
        load = (PT_LOAD, 6, 0, 0, 0, shoff, shoff, 0x1000)
        dseg = (PT_DYNAMIC, 6, o_dyn, o_dyn, o_dyn, n_dyn, n_dyn, 8)
    else:
        load = (PT_LOAD, 0, 0, 0, shoff, shoff, 6, 0x1000)
        dseg = (PT_DYNAMIC, o_dyn, o_dyn, o_dyn, n_dyn, n_dyn, 6, 8)
    body[ehsize:ehsize + 2 * phdr.size] = phdr.pack(*load) + phdr.pack(*dseg)
    ident = ELF_MAGIC + bytes((2 if is64 else 1, 2 if big_endian else 1, 1, 0)) + b"\x00" * 8
    ehdr = struct.Struct(e + ("HHIQQQIHHHHHH" if is64 else "HHIIIIIHHHHHH"))
    body[0:ehsize] = ident + ehdr.pack(3, machine, 1, 0, ehsize, shoff, 0, ehsize, phdr.size, 2, shdr.size,
                                       len(headers), 5)
    return bytes(body)
