"""End-to-end scenarios: build a synthetic firmware image, launch it
honestly, run the block-reordering attack against it, and grade the
hardened digest schemes.

The synthetic image stands in for a real UEFI volume: a tiny boot stub, a
handful of plantable chain links and ROP gadgets, a configuration record
naming the secret's guest address, and random filler. All of it is
deterministic per seed.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto, owner
from .crypto import (
    BLOCK_SIZE,
    DigestScheme,
    LoadCall,
    Measurement,
    Policy,
)
from .disasm import Kind
from .emulator import CpuState, HvHooks, RunStatus, run
from .errors import SimError
from .gadgets import (
    STAGE1_SEQUENCE,
    ChainLink,
    ExitKind,
    apply_permutation,
    build_block_chain,
    build_write_chain,
    copy_payload,
    plan_permutation,
    scan_rop_gadgets,
    verify_chain_link,
)
from .memory import PAGE_SIZE, GuestAddressSpace, PhysicalMemory
from .secure_processor import SecureProcessor

# Guest memory layout used by all scenarios (identity-mapped at launch).
IMAGE_BASE = 0x1000
SECRET_PAGE = 0x6000
SECRET_GPA = 0x6010
STAGE_GVA = 0x7000
GHCB_GPA = 0x9000
LEAK_GVA = GHCB_GPA + 0x100

CONFIG_MAGIC = b"CFGTBL01"

DEFAULT_IMAGE_SIZE = 8192
DEFAULT_SECRET_LEN = 32

POLICY = Policy(0x1)


@dataclass
class SyntheticImage:
    """A scannable, bootable test image plus the builder's ground truth."""

    data: bytes
    seed: int
    entry_hook: int
    boot_blocks: frozenset[int]
    chain_links: list[ChainLink]
    gadget_offsets: dict[str, int]
    config_offset: int
    secret_gpa: int

    def save(self, path: str | Path):
        path = Path(path)
        path.write_bytes(self.data)
        meta = {
            "seed": self.seed,
            "entry_hook": self.entry_hook,
            "boot_blocks": sorted(self.boot_blocks),
            "chain_links": [
                {
                    "block": l.block_index,
                    "entry": l.entry_offset,
                    "payload": l.payload.name,
                    "exit": l.exit_kind.value,
                    "next_entry": l.next_entry,
                }
                for l in self.chain_links
            ],
            "gadget_offsets": self.gadget_offsets,
            "config_offset": self.config_offset,
            "secret_gpa": self.secret_gpa,
        }
        _meta_path(path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticImage":
        path = Path(path)
        data = path.read_bytes()
        meta = json.loads(_meta_path(path).read_text())
        links = [
            ChainLink(
                block_index=l["block"],
                entry_offset=l["entry"],
                payload=Kind[l["payload"]],
                exit_kind=ExitKind(l["exit"]),
                next_entry=l["next_entry"],
            )
            for l in meta["chain_links"]
        ]
        return cls(
            data=data,
            seed=meta["seed"],
            entry_hook=meta["entry_hook"],
            boot_blocks=frozenset(meta["boot_blocks"]),
            chain_links=links,
            gadget_offsets=meta["gadget_offsets"],
            config_offset=meta["config_offset"],
            secret_gpa=meta["secret_gpa"],
        )


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def build_test_image(seed: int = 1, size: int = DEFAULT_IMAGE_SIZE) -> SyntheticImage:
    """Deterministically assemble the synthetic image.

    Block 0 is the boot stub: one cpuid, then nops falling through into
    block 1 (the hook slot, a plain halt in the honest layout). Chain links
    for each stage-1 payload, the three write-primitive gadgets, and the
    config record land at seeded random blocks; everything else is random
    filler.
    """
    if size % BLOCK_SIZE != 0 or size < 10 * BLOCK_SIZE:
        raise ValueError("image size must be a multiple of 16 and hold the planted blocks")
    rng = random.Random(seed)
    n = size // BLOCK_SIZE

    blocks: list[bytes | None] = [None] * n
    blocks[0] = b"\x0f\xa2" + b"\x90" * 14  # cpuid, nops, fall through to hook
    blocks[1] = b"\xf4" + rng.randbytes(15)  # honest continuation: halt

    def filler(k: int) -> bytes:
        return rng.randbytes(k)

    planted = rng.sample(range(2, n), 7)
    specials = {
        planted[0]: b"\x0f\xa2\xeb\x0c" + filler(12),  # cpuid; jmp +12 -> next block @0
        planted[1]: b"\x89\xcc\xeb\x0c" + filler(12),  # mov esp,ecx; jmp -> next @0
        planted[2]: b"\xc3\xeb\x0d" + filler(13),  # ret; (jmp satisfies link shape)
        planted[3]: b"\x58\xc3" + filler(14),  # pop rax; ret
        planted[4]: b"\x5a\xc3" + filler(14),  # pop rdx; ret
        planted[5]: b"\x48\x89\x10\x90\xc3" + filler(11),  # mov [rax],rdx; nop; ret
        planted[6]: CONFIG_MAGIC + SECRET_GPA.to_bytes(8, "little"),
    }
    for index, content in specials.items():
        blocks[index] = content
    for index in range(n):
        if blocks[index] is None:
            blocks[index] = filler(BLOCK_SIZE)
    data = b"".join(blocks)

    chain_links = [
        ChainLink(planted[0], 0, Kind.CPUID, ExitKind.JMP, next_entry=0),
        ChainLink(planted[1], 0, Kind.MOV_ESP_ECX, ExitKind.JMP, next_entry=0),
        ChainLink(planted[2], 0, Kind.RET, ExitKind.JMP, next_entry=0),
    ]
    gadget_offsets = {
        Kind.POP_RAX.name: planted[3] * BLOCK_SIZE,
        Kind.POP_RDX.name: planted[4] * BLOCK_SIZE,
        Kind.MOV_MEM_RAX_RDX.name: planted[5] * BLOCK_SIZE,
    }
    image = SyntheticImage(
        data=data,
        seed=seed,
        entry_hook=1,
        boot_blocks=frozenset({0}),
        chain_links=chain_links,
        gadget_offsets=gadget_offsets,
        config_offset=planted[6] * BLOCK_SIZE,
        secret_gpa=SECRET_GPA,
    )
    _check_ground_truth(image)
    return image


def _check_ground_truth(image: SyntheticImage):
    """Builder invariant: everything recorded must be re-found by the scanners."""
    for link in image.chain_links:
        if not verify_chain_link(image.data, link):
            raise SimError(f"planted link {link} fails verification")
    found = {(g.kind.name, g.gva) for g in scan_rop_gadgets(image.data, 0)}
    for kind_name, offset in image.gadget_offsets.items():
        if (kind_name, offset) not in found:
            raise SimError(f"planted gadget {kind_name} at {offset:#x} not found by scanner")
    if locate_config(image.data) != (image.config_offset, image.secret_gpa):
        raise SimError("config record not locatable")


def locate_config(image: bytes) -> tuple[int, int]:
    """Find the configuration record the way the hypervisor would: scan the
    known plaintext for the magic and read the secret's guest address."""
    for off in range(0, len(image) - BLOCK_SIZE + 1, BLOCK_SIZE):
        if image[off : off + len(CONFIG_MAGIC)] == CONFIG_MAGIC:
            gpa = int.from_bytes(
                image[off + len(CONFIG_MAGIC) : off + len(CONFIG_MAGIC) + 8], "little"
            )
            return off, gpa
    raise SimError("no configuration record in image")


def default_secret(seed: int = 99) -> bytes:
    """The 32-byte mock disk-encryption key scenarios inject by default."""
    return random.Random(seed).randbytes(DEFAULT_SECRET_LEN)


@dataclass
class ScenarioReport:
    """What a scenario run observed, JSON-ready."""

    scenario: str
    scheme: str
    verified: dict[str, bool]
    honest_measurement: dict | None = None
    attack_measurement: dict | None = None
    injected_secret: str | None = None
    leaked_secret: str | None = None
    steps: int = 0
    run_status: str | None = None
    timings: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "scenario": self.scenario,
            "scheme": self.scheme,
            "verified": self.verified,
            "honest_measurement": self.honest_measurement,
            "attack_measurement": self.attack_measurement,
            "injected_secret": self.injected_secret,
            "leaked_secret": self.leaked_secret,
            "steps": self.steps,
            "run_status": self.run_status,
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
        }
        doc.update(self.extra)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _measurement_dict(m: Measurement) -> dict:
    return {"mnonce": m.mnonce.hex(), "measure": m.measure.hex()}


class _Launch:
    """Owner + platform wiring shared by the scenarios."""

    def __init__(self, image: SyntheticImage, scheme: DigestScheme, sp_seed: int):
        self.sp = SecureProcessor(rng=random.Random(sp_seed))
        self.owner_rng = random.Random(sp_seed + 1)
        owner_priv, self.owner_pub = crypto.generate_keypair(self.owner_rng)
        self.session = crypto.derive_session(owner_priv, self.sp.pdh_export())
        self.ctx = self.sp.create_guest()
        self.sp.launch_start(self.ctx, self.owner_pub, POLICY, scheme)
        self.memory = PhysicalMemory()
        self.space = GuestAddressSpace(self.memory, self.sp.memory_cipher(self.ctx))
        for off in range(0, len(image.data), PAGE_SIZE):
            self.space.map_page(IMAGE_BASE + off, IMAGE_BASE + off, c_bit=True)
        self.space.map_page(SECRET_PAGE, SECRET_PAGE, c_bit=True)
        self.space.map_page(STAGE_GVA, STAGE_GVA, c_bit=True)
        self.space.set_ghcb(GHCB_GPA, GHCB_GPA)
        self.honest_plan = owner.contiguous_plan(len(image.data), IMAGE_BASE, IMAGE_BASE, scheme)

    def verify(self, image_bytes: bytes, measurement: Measurement) -> bool:
        sp = self.sp
        return owner.verify_measurement(
            measurement,
            image_bytes,
            self.honest_plan,
            POLICY,
            sp.api_major,
            sp.api_minor,
            sp.build,
            self.session.tik,
        )

    def expected(self, image_bytes: bytes, mnonce: bytes) -> Measurement:
        sp = self.sp
        return owner.expected_measurement(
            image_bytes,
            self.honest_plan,
            POLICY,
            sp.api_major,
            sp.api_minor,
            sp.build,
            mnonce,
            self.session.tik,
        )


def run_honest_launch(
    image: SyntheticImage,
    secret: bytes | None = None,
    scheme: DigestScheme = DigestScheme.VULNERABLE,
    *,
    plan: owner.LoadPlan | None = None,
    sp_seed: int = 2024,
    max_steps: int = 10_000,
    trace: bool = False,
) -> ScenarioReport:
    """The intended launch: contiguous load, verification, secret injection,
    then boot. The injected secret stays readable by the guest only."""
    secret = default_secret() if secret is None else secret
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    launch = _Launch(image, scheme, sp_seed)
    launch.memory.write(IMAGE_BASE, image.data)
    plan = plan or launch.honest_plan
    for entry in plan.entries:
        launch.sp.launch_update_data(
            launch.ctx, launch.memory, LoadCall(hpa=entry.hpa, gpa=entry.gpa, length=entry.length)
        )
    measurement = launch.sp.launch_measure(launch.ctx)
    verified = owner.verify_measurement(
        measurement,
        image.data,
        plan,
        POLICY,
        launch.sp.api_major,
        launch.sp.api_minor,
        launch.sp.build,
        launch.session.tik,
    )
    timings["launch"] = time.perf_counter() - t0

    report = ScenarioReport(
        scenario="honest",
        scheme=scheme.value,
        verified={scheme.value: verified},
        honest_measurement=_measurement_dict(measurement),
        injected_secret=secret.hex(),
        timings=timings,
    )
    if not verified:
        return report

    t0 = time.perf_counter()
    _, config_gpa = locate_config(image.data)
    packet = owner.build_secret_packet(secret, launch.session, launch.owner_rng)
    launch.sp.launch_secret(launch.ctx, launch.space, packet, config_gpa)
    launch.sp.launch_finish(launch.ctx)

    trace_lines: list | None = [] if trace else None
    cpu = CpuState(rip=IMAGE_BASE, rsp=STAGE_GVA + 0x800)
    result = run(cpu, launch.space, HvHooks(), max_steps=max_steps, trace=trace_lines)
    timings["execution"] = time.perf_counter() - t0

    report.steps = result.steps
    report.run_status = result.status.value
    report.extra["guest_reads_secret"] = launch.space.read(config_gpa, len(secret)) == secret
    report.extra["hv_sees_secret"] = secret in launch.memory.read(SECRET_PAGE, PAGE_SIZE)
    if trace_lines is not None:
        report.extra["emulator_trace"] = trace_lines
        report.extra["sp_trace"] = launch.sp.trace
    return report


def run_permutation_attack(
    image: SyntheticImage,
    secret: bytes | None = None,
    scheme: DigestScheme = DigestScheme.VULNERABLE,
    *,
    sp_seed: int = 2024,
    max_steps: int = 20_000,
    trace: bool = False,
) -> ScenarioReport:
    """The full exploit: reorder blocks to splice in the stack-hijack chain,
    load in original data order, survive (or not) attestation, then hijack
    the stack, inject the copy gadget and read the secret off the shared
    page.
    """
    secret = default_secret() if secret is None else secret
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    chain = build_block_chain(
        image.data, STAGE1_SEQUENCE, first_entry=0, forbidden_blocks=image.boot_blocks
    )
    plan = plan_permutation(
        image.data,
        chain,
        image.entry_hook,
        do_not_move=image.boot_blocks,
        hpa_base=IMAGE_BASE,
        gpa_base=IMAGE_BASE,
    )
    permuted = apply_permutation(image.data, plan)
    timings["analysis"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    launch = _Launch(image, scheme, sp_seed)
    launch.memory.write(IMAGE_BASE, permuted)
    for call in plan.load_order:
        launch.sp.launch_update_data(launch.ctx, launch.memory, call)
    measurement = launch.sp.launch_measure(launch.ctx)
    verified = launch.verify(image.data, measurement)
    honest_measurement = launch.expected(image.data, measurement.mnonce)
    timings["launch"] = time.perf_counter() - t0

    report = ScenarioReport(
        scenario="permutation-attack",
        scheme=scheme.value,
        verified={scheme.value: verified},
        honest_measurement=_measurement_dict(honest_measurement),
        attack_measurement=_measurement_dict(measurement),
        injected_secret=secret.hex(),
        timings=timings,
        extra={
            "plan": plan.to_dict(),
            "identity_plan": plan.is_identity,
        },
    )
    if not verified:
        # the owner walks away; no secret ever enters the guest
        report.extra["attack_outcome"] = "detected-by-attestation"
        return report

    t0 = time.perf_counter()
    _, config_gpa = locate_config(image.data)
    packet = owner.build_secret_packet(secret, launch.session, launch.owner_rng)
    launch.sp.launch_secret(launch.ctx, launch.space, packet, config_gpa)
    launch.sp.launch_finish(launch.ctx)

    gadgets = scan_rop_gadgets(permuted, IMAGE_BASE)
    payload = copy_payload() + b"\x90" * (8 - len(copy_payload()))
    rop = build_write_chain(
        gadgets,
        [(STAGE_GVA, int.from_bytes(payload, "little"))],
        final_jump_gva=STAGE_GVA,
    )
    stack_words = rop.stack_words + [config_gpa, LEAK_GVA, len(secret)]
    stack_bytes = b"".join(w.to_bytes(8, "little") for w in stack_words)
    launch.memory.write(GHCB_GPA, stack_bytes)  # raw write: shared page

    hooks = HvHooks(cpuid_responses={1: (0, 0, GHCB_GPA, 0)})
    trace_lines: list | None = [] if trace else None
    cpu = CpuState(rip=IMAGE_BASE, rsp=STAGE_GVA + 0x800)
    result = run(cpu, launch.space, hooks, max_steps=max_steps, trace=trace_lines)
    timings["execution"] = time.perf_counter() - t0

    report.steps = result.steps
    report.run_status = result.status.value
    report.extra["gadgets"] = [
        {"kind": g.kind.name, "gva": g.gva} for g in gadgets[:16]
    ]
    if result.status is RunStatus.HALT:
        report.leaked_secret = launch.memory.read(LEAK_GVA, len(secret)).hex()
        report.extra["attack_outcome"] = (
            "secret-leaked" if report.leaked_secret == secret.hex() else "leak-mismatch"
        )
    else:
        report.extra["attack_outcome"] = f"execution-{result.status.value}"
    if trace_lines is not None:
        report.extra["emulator_trace"] = trace_lines
        report.extra["sp_trace"] = launch.sp.trace
    return report


def _random_data_order_permutation(n: int, rng: random.Random) -> list[int]:
    """A non-identity placement: slot_of[i] is where block i lands."""
    slots = list(range(n))
    while True:
        rng.shuffle(slots)
        if any(slots[i] != i for i in range(n)):
            return slots


def evaluate_mitigations(
    image: SyntheticImage, trials: int = 5, seed: int = 0, sp_seed: int = 2024
) -> dict:
    """Score every digest scheme against the honest load, randomized
    attack-style permutations, and a page-granular remap.

    ``verified`` is the owner's measurement check; ``detected`` is whether
    the scheme's machinery catches the manipulation at all. The remap row
    records the documented blind spot: address-bound digests cannot see a
    nested-page-table swap, only guest-address binding with enforced
    mappings can.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = len(image.data) // BLOCK_SIZE
    matrix: dict[str, dict] = {}
    for scheme in DigestScheme:
        honest_plan = owner.contiguous_plan(len(image.data), IMAGE_BASE, IMAGE_BASE, scheme)
        honest_ld = owner.replay_digest(image.data, honest_plan)

        collisions = 0
        for t in range(trials):
            rng = random.Random(f"{seed}:{t}")
            slots = _random_data_order_permutation(n, rng)
            attack_plan = owner.LoadPlan(
                entries=[
                    owner.PlanEntry(
                        gpa=IMAGE_BASE + slots[i] * BLOCK_SIZE,
                        hpa=IMAGE_BASE + slots[i] * BLOCK_SIZE,
                        length=BLOCK_SIZE,
                    )
                    for i in range(n)
                ],
                scheme=scheme,
            )
            attack_ld = owner.replay_digest(image.data, attack_plan)
            if attack_ld == honest_ld:
                collisions += 1

        remap = _remap_trial(image, scheme, sp_seed)

        matrix[scheme.value] = {
            "honest": {"verified": True, "detected": False},
            "attack": {
                "verified": collisions == trials,
                "detected": collisions == 0,
                "digest_collisions": collisions,
                "trials": trials,
            },
            "page_remap": remap,
        }
    return matrix


def _remap_trial(image: SyntheticImage, scheme: DigestScheme, sp_seed: int) -> dict:
    """Honest load, then swap the backing pages of two guest pages.

    The measurement predates the swap, so verification is unchanged for
    every scheme; only a guest-address binding backed by a mapping check
    notices.
    """
    launch = _Launch(image, scheme, sp_seed)
    launch.memory.write(IMAGE_BASE, image.data)
    for entry in launch.honest_plan.entries:
        launch.sp.launch_update_data(
            launch.ctx, launch.memory, LoadCall(hpa=entry.hpa, gpa=entry.gpa, length=entry.length)
        )
    measurement = launch.sp.launch_measure(launch.ctx)
    attested = {(e.gpa, e.hpa) for e in launch.honest_plan.entries}

    launch.space.remap(IMAGE_BASE, IMAGE_BASE + PAGE_SIZE)
    launch.space.remap(IMAGE_BASE + PAGE_SIZE, IMAGE_BASE)

    verified = launch.verify(image.data, measurement)
    current = {
        (gpa, hpa)
        for gpa, hpa, _c in launch.space.page_map()
        if gpa in {a for a, _ in attested}
    }
    mapping_changed = current != attested
    detected = mapping_changed and scheme is DigestScheme.SNP_STYLE
    return {"verified": verified, "detected": detected, "mapping_changed": mapping_changed}


def block_count(image_size_bytes: int, block_size: int) -> int:
    """How many measured blocks an image yields at a given granularity."""
    if image_size_bytes <= 0 or block_size <= 0:
        raise ValueError("sizes must be positive")
    return -(-image_size_bytes // block_size)
