"""Physical memory with per-page encryption flags and the GPA-to-HPA map.

The hypervisor sees raw bytes; the guest sees pages through its address
space, where the per-page C bit selects encrypted or shared access and
instruction fetches always decrypt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .crypto import BLOCK_SIZE, MemoryCipher
from .errors import OutOfBounds, UnalignedAddress, UnmappedAddress

PAGE_SIZE = 4096
DEFAULT_MEMORY_SIZE = 16 * 1024 * 1024


class PhysicalMemory:
    """Flat byte store. Reads and writes here are the hypervisor's raw view:
    no cipher is ever applied, bounds are the only check."""

    def __init__(self, size: int = DEFAULT_MEMORY_SIZE):
        self.size = size
        self.data = bytearray(size)

    def _check(self, hpa: int, length: int):
        if length < 0 or hpa < 0 or hpa + length > self.size:
            raise OutOfBounds(f"access [{hpa:#x}, {hpa + length:#x}) outside {self.size:#x}")

    def read(self, hpa: int, length: int) -> bytes:
        self._check(hpa, length)
        return bytes(self.data[hpa : hpa + length])

    def write(self, hpa: int, data: bytes):
        self._check(hpa, len(data))
        self.data[hpa : hpa + len(data)] = data


@dataclass
class PageAttributes:
    """Mapping record for one guest page. Many GPAs may alias one HPA; that
    asymmetry is exactly the hypervisor's remapping power."""

    hpa: int
    c_bit: bool


class GuestAddressSpace:
    """Guest view of memory: a flat GPA page map plus the VM's memory cipher.

    Data accesses honor the page's C bit; fetches decrypt unconditionally.
    Sub-block encrypted accesses read-modify-write the containing 16-byte
    blocks, matching the cipher granularity.
    """

    def __init__(self, memory: PhysicalMemory, cipher: MemoryCipher | None):
        self.memory = memory
        self.cipher = cipher
        self.pages: dict[int, PageAttributes] = {}
        self.ghcb_gpa: int | None = None

    def map_page(self, gpa: int, hpa: int, c_bit: bool = True):
        if gpa % PAGE_SIZE or hpa % PAGE_SIZE:
            raise UnalignedAddress(f"page map {gpa:#x}->{hpa:#x} not page aligned")
        if hpa + PAGE_SIZE > self.memory.size:
            raise OutOfBounds(f"backing page {hpa:#x} outside physical memory")
        self.pages[gpa] = PageAttributes(hpa=hpa, c_bit=c_bit)

    def set_ghcb(self, gpa: int, hpa: int | None = None):
        """Designate the shared communication page; it is always mapped plain."""
        if hpa is None:
            attrs = self._attrs(gpa)
            attrs.c_bit = False
        else:
            self.map_page(gpa, hpa, c_bit=False)
        self.ghcb_gpa = gpa

    def remap(self, gpa: int, new_hpa: int):
        """Point an existing guest page at different backing memory.

        No data moves; only the translation changes. This models the
        hypervisor's control over the nested page tables.
        """
        if gpa % PAGE_SIZE or new_hpa % PAGE_SIZE:
            raise UnalignedAddress(f"remap {gpa:#x}->{new_hpa:#x} not page aligned")
        if new_hpa + PAGE_SIZE > self.memory.size:
            raise OutOfBounds(f"backing page {new_hpa:#x} outside physical memory")
        self._attrs(gpa).hpa = new_hpa

    def _attrs(self, gpa: int) -> PageAttributes:
        try:
            return self.pages[gpa - gpa % PAGE_SIZE]
        except KeyError:
            raise UnmappedAddress(f"gpa {gpa:#x} is not mapped") from None

    def translate(self, gpa: int) -> int:
        return self._attrs(gpa).hpa + gpa % PAGE_SIZE

    def _segments(self, gpa: int, length: int):
        """Split a guest range at page boundaries, yielding per-page pieces."""
        while length > 0:
            attrs = self._attrs(gpa)
            off = gpa % PAGE_SIZE
            take = min(length, PAGE_SIZE - off)
            yield attrs, attrs.hpa + off, take
            gpa += take
            length -= take

    def _read_segment(self, hpa: int, length: int, decrypt: bool) -> bytes:
        if not decrypt:
            return self.memory.read(hpa, length)
        lo = hpa - hpa % BLOCK_SIZE
        hi = -(-(hpa + length) // BLOCK_SIZE) * BLOCK_SIZE
        plain = self.cipher.decrypt(self.memory.read(lo, hi - lo), lo)
        return plain[hpa - lo : hpa - lo + length]

    def _write_segment(self, hpa: int, data: bytes, encrypt: bool):
        if not encrypt:
            self.memory.write(hpa, data)
            return
        lo = hpa - hpa % BLOCK_SIZE
        hi = -(-(hpa + len(data)) // BLOCK_SIZE) * BLOCK_SIZE
        plain = bytearray(self.cipher.decrypt(self.memory.read(lo, hi - lo), lo))
        plain[hpa - lo : hpa - lo + len(data)] = data
        self.memory.write(lo, self.cipher.encrypt(bytes(plain), lo))

    def read(self, gpa: int, length: int) -> bytes:
        """Guest data read: decrypts on C-bit pages, raw on shared pages."""
        out = bytearray()
        for attrs, hpa, take in self._segments(gpa, length):
            out += self._read_segment(hpa, take, decrypt=attrs.c_bit)
        return bytes(out)

    def write(self, gpa: int, data: bytes):
        """Guest data write: encrypts on C-bit pages, raw on shared pages."""
        pos = 0
        for attrs, hpa, take in self._segments(gpa, len(data)):
            self._write_segment(hpa, data[pos : pos + take], encrypt=attrs.c_bit)
            pos += take

    def fetch(self, gpa: int, length: int) -> bytes:
        """Instruction fetch: always decrypts, whatever the C bit says.

        Fetching from a page holding plaintext therefore yields garbage;
        that property forces attackers to encrypt injected code first.
        """
        out = bytearray()
        for _attrs, hpa, take in self._segments(gpa, length):
            out += self._read_segment(hpa, take, decrypt=True)
        return bytes(out)

    def page_map(self) -> list[tuple[int, int, bool]]:
        """Snapshot of (gpa, hpa, c_bit) triples, sorted by gpa."""
        return [(gpa, a.hpa, a.c_bit) for gpa, a in sorted(self.pages.items())]


def save_memory_image(path: str | Path, memory: PhysicalMemory, space: GuestAddressSpace):
    """Store raw memory plus a JSON manifest of (gpa, hpa, c_bit) page triples."""
    path = Path(path)
    path.write_bytes(bytes(memory.data))
    manifest = {
        "page_size": PAGE_SIZE,
        "memory_size": memory.size,
        "pages": [
            {"gpa": gpa, "hpa": hpa, "c_bit": c_bit} for gpa, hpa, c_bit in space.page_map()
        ],
        "ghcb_gpa": space.ghcb_gpa,
    }
    path.with_suffix(path.suffix + ".pages.json").write_text(json.dumps(manifest, indent=2))


def load_memory_image(
    path: str | Path, cipher: MemoryCipher | None = None
) -> tuple[PhysicalMemory, GuestAddressSpace]:
    """Inverse of :func:`save_memory_image`; the cipher cannot be serialized,
    so the caller supplies one (or none, for shared-only use)."""
    path = Path(path)
    raw = path.read_bytes()
    manifest = json.loads(path.with_suffix(path.suffix + ".pages.json").read_text())
    memory = PhysicalMemory(size=manifest["memory_size"])
    memory.data[: len(raw)] = raw
    space = GuestAddressSpace(memory, cipher)
    for page in manifest["pages"]:
        space.map_page(page["gpa"], page["hpa"], page["c_bit"])
    if manifest.get("ghcb_gpa") is not None:
        space.ghcb_gpa = manifest["ghcb_gpa"]
    return memory, space
