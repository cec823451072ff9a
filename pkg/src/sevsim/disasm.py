"""Minimal x86-64 decoder over the closed instruction subset the attack and
the synthetic images use. Decoding may start at any byte offset; x86 is not
prefix-free, so the same bytes decode differently per offset, which is the
whole trick. Anything outside the table decodes as a 1-byte Unknown so a
scan can resynchronize.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import BadLength, OffsetOutOfRange


class Kind(Enum):
    CPUID = "cpuid"
    MOV_ESP_ECX = "mov esp, ecx"
    RET = "ret"
    POP_RAX = "pop rax"
    POP_RCX = "pop rcx"
    POP_RDX = "pop rdx"
    POP_RSI = "pop rsi"
    POP_RDI = "pop rdi"
    MOV_MEM_RAX_RDX = "mov [rax], rdx"
    REP_MOVSB = "rep movsb"
    HLT = "hlt"
    NOP = "nop"
    JMP_REL8 = "jmp rel8"
    JMP_REL32 = "jmp rel32"
    UNKNOWN = "(bad)"


@dataclass(frozen=True)
class Instr:
    kind: Kind
    length: int
    disp: int = 0  # signed displacement, jumps only

    def end(self, offset: int) -> int:
        return offset + self.length


# kind -> (opcode bytes, displacement width). Each encoding was cross-checked
# against GNU binutils before being frozen here.
ENCODINGS: dict[Kind, tuple[bytes, int]] = {
    Kind.CPUID: (b"\x0f\xa2", 0),
    Kind.MOV_ESP_ECX: (b"\x89\xcc", 0),
    Kind.RET: (b"\xc3", 0),
    Kind.POP_RAX: (b"\x58", 0),
    Kind.POP_RCX: (b"\x59", 0),
    Kind.POP_RDX: (b"\x5a", 0),
    Kind.POP_RSI: (b"\x5e", 0),
    Kind.POP_RDI: (b"\x5f", 0),
    Kind.MOV_MEM_RAX_RDX: (b"\x48\x89\x10", 0),
    Kind.REP_MOVSB: (b"\xf3\xa4", 0),
    Kind.HLT: (b"\xf4", 0),
    Kind.NOP: (b"\x90", 0),
    Kind.JMP_REL8: (b"\xeb", 1),
    Kind.JMP_REL32: (b"\xe9", 4),
}

# longest opcodes first so multi-byte patterns win over any 1-byte overlap
_TABLE = sorted(ENCODINGS.items(), key=lambda kv: -len(kv[1][0]))

UNKNOWN = Instr(Kind.UNKNOWN, 1)


def encode(kind: Kind, disp: int = 0) -> bytes:
    """Emit the canonical bytes for a table instruction."""
    opcode, disp_len = ENCODINGS[kind]
    if disp_len == 0:
        return opcode
    return opcode + disp.to_bytes(disp_len, "little", signed=True)


def decode_at(data: bytes, offset: int) -> Instr:
    """Decode one instruction at ``offset``.

    Longest match against the table; no match, or a candidate truncated by
    the end of the buffer, yields a 1-byte Unknown.
    """
    if not 0 <= offset < len(data):
        raise OffsetOutOfRange(f"offset {offset} outside buffer of {len(data)}")
    for kind, (opcode, disp_len) in _TABLE:
        if data[offset : offset + len(opcode)] != opcode:
            continue
        total = len(opcode) + disp_len
        if offset + total > len(data):
            return UNKNOWN
        if disp_len == 0:
            return Instr(kind, total)
        disp = int.from_bytes(data[offset + len(opcode) : offset + total], "little", signed=True)
        return Instr(kind, total, disp)
    return UNKNOWN


@dataclass(frozen=True)
class WindowDecode:
    """Walk of one 16-byte block: the instructions decoded from the entry
    offset, how many bytes they consumed, and whether the walk stopped at an
    instruction crossing the block edge."""

    instrs: tuple[Instr, ...]
    consumed: int
    crossed: bool


def _crosses_window(window: bytes, offset: int) -> bool:
    """True if the bytes at ``offset`` open a table encoding that cannot end
    inside the window."""
    avail = len(window) - offset
    for _kind, (opcode, disp_len) in _TABLE:
        head = min(len(opcode), avail)
        if window[offset : offset + head] != opcode[:head]:
            continue
        if len(opcode) + disp_len > avail:
            return True
    return False


def decode_window(block: bytes, entry: int) -> WindowDecode:
    """Sequentially decode a 16-byte block from ``entry``.

    Stops when the block is exhausted or an instruction would run past
    offset 16; the crossing flag records the latter.
    """
    if len(block) != 16:
        raise BadLength("decode_window expects exactly one 16-byte block")
    if not 0 <= entry < 16:
        raise OffsetOutOfRange(f"entry {entry} outside block")
    instrs: list[Instr] = []
    off = entry
    while off < 16:
        instr = decode_at(block, off)
        if instr.kind is Kind.UNKNOWN and _crosses_window(block, off):
            return WindowDecode(tuple(instrs), consumed=off - entry, crossed=True)
        instrs.append(instr)
        off += instr.length
    return WindowDecode(tuple(instrs), consumed=off - entry, crossed=False)


def find_all(data: bytes, kind: Kind) -> list[int]:
    """Every offset where decoding yields ``kind``; overlaps included."""
    return [off for off in range(len(data)) if decode_at(data, off).kind is kind]
