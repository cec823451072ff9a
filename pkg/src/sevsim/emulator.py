"""Deterministic interpreter for the decoder's instruction subset with the
memory semantics that matter for the attack: instruction fetches always
decrypt, data accesses honor the page C bit, and cpuid is answered by the
hypervisor.

Guest virtual addresses are guest physical addresses here; the firmware this
models runs on flat early-boot page tables where the interesting addresses
are small hardcoded constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .disasm import Kind, decode_at
from .errors import OutOfBounds, UnmappedAddress
from .memory import GuestAddressSpace

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

MAX_INSTR_LEN = 5  # jmp rel32

REGISTERS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rip")


@dataclass
class CpuState:
    rax: int = 0
    rbx: int = 0
    rcx: int = 0
    rdx: int = 0
    rsi: int = 0
    rdi: int = 0
    rsp: int = 0
    rip: int = 0
    halted: bool = False
    cpuid_count: int = 0

    def snapshot(self) -> dict:
        return {r: getattr(self, r) for r in REGISTERS}


@dataclass
class HvHooks:
    """Hypervisor's answers to emulated cpuid, keyed by occurrence index.

    Counting executed cpuids is deterministic for a fixed guest image, which
    is what lets the hypervisor time its poisoned answer.
    """

    cpuid_responses: dict[int, tuple[int, int, int, int]] = field(default_factory=dict)
    default: tuple[int, int, int, int] = (0, 0, 0, 0)

    def response(self, occurrence: int) -> tuple[int, int, int, int]:
        return self.cpuid_responses.get(occurrence, self.default)


class Outcome(Enum):
    CONTINUE = "continue"
    HALT = "halt"
    FAULT = "fault"


@dataclass(frozen=True)
class StepOutcome:
    outcome: Outcome
    reason: str | None = None


CONTINUE = StepOutcome(Outcome.CONTINUE)
HALT = StepOutcome(Outcome.HALT)

ILLEGAL_INSTRUCTION = "illegal_instruction"
UNMAPPED_ADDRESS = "unmapped_address"


class RunStatus(Enum):
    HALT = "halt"
    FAULT = "fault"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass
class RunResult:
    cpu: CpuState
    status: RunStatus
    steps: int
    fault_reason: str | None = None


def _fetch_code(space: GuestAddressSpace, rip: int) -> bytes:
    """Fetch up to one instruction's worth of bytes, tolerating the mapped
    region ending mid-window."""
    for length in range(MAX_INSTR_LEN, 0, -1):
        try:
            return space.fetch(rip, length)
        except (UnmappedAddress, OutOfBounds):
            continue
    raise UnmappedAddress(f"rip {rip:#x} is not mapped")


def step(
    cpu: CpuState, space: GuestAddressSpace, hooks: HvHooks, trace: list | None = None
) -> StepOutcome:
    """Execute one instruction. Memory trouble and undecodable bytes come
    back as Fault outcomes, not exceptions."""
    rip = cpu.rip
    try:
        code = _fetch_code(space, rip)
    except (UnmappedAddress, OutOfBounds):
        return StepOutcome(Outcome.FAULT, UNMAPPED_ADDRESS)
    instr = decode_at(code, 0)
    before = cpu.snapshot() if trace is not None else None

    try:
        outcome = _execute(cpu, space, hooks, instr)
    except (UnmappedAddress, OutOfBounds):
        return StepOutcome(Outcome.FAULT, UNMAPPED_ADDRESS)

    if trace is not None:
        delta = " ".join(
            f"{r}={getattr(cpu, r):#x}" for r in REGISTERS if getattr(cpu, r) != before[r]
        )
        trace.append(f"{rip:#06x} {instr.kind.value:<16} {delta}".rstrip())
    return outcome


def _pop(cpu: CpuState, space: GuestAddressSpace) -> int:
    value = int.from_bytes(space.read(cpu.rsp, 8), "little")
    cpu.rsp = (cpu.rsp + 8) & MASK64
    return value


def _execute(cpu: CpuState, space: GuestAddressSpace, hooks: HvHooks, instr) -> StepOutcome:
    kind = instr.kind
    if kind is Kind.UNKNOWN:
        return StepOutcome(Outcome.FAULT, ILLEGAL_INSTRUCTION)

    if kind is Kind.CPUID:
        eax, ebx, ecx, edx = hooks.response(cpu.cpuid_count)
        # 32-bit writes zero-extend to the full register
        cpu.rax = eax & MASK32
        cpu.rbx = ebx & MASK32
        cpu.rcx = ecx & MASK32
        cpu.rdx = edx & MASK32
        cpu.cpuid_count += 1
        cpu.rip += instr.length
    elif kind is Kind.MOV_ESP_ECX:
        cpu.rsp = cpu.rcx & MASK32
        cpu.rip += instr.length
    elif kind is Kind.RET:
        cpu.rip = _pop(cpu, space)
    elif kind is Kind.POP_RAX:
        cpu.rax = _pop(cpu, space)
        cpu.rip += instr.length
    elif kind is Kind.POP_RCX:
        cpu.rcx = _pop(cpu, space)
        cpu.rip += instr.length
    elif kind is Kind.POP_RDX:
        cpu.rdx = _pop(cpu, space)
        cpu.rip += instr.length
    elif kind is Kind.POP_RSI:
        cpu.rsi = _pop(cpu, space)
        cpu.rip += instr.length
    elif kind is Kind.POP_RDI:
        cpu.rdi = _pop(cpu, space)
        cpu.rip += instr.length
    elif kind is Kind.MOV_MEM_RAX_RDX:
        space.write(cpu.rax, cpu.rdx.to_bytes(8, "little"))
        cpu.rip += instr.length
    elif kind is Kind.REP_MOVSB:
        count = cpu.rcx
        data = space.read(cpu.rsi, count)
        space.write(cpu.rdi, data)
        cpu.rsi = (cpu.rsi + count) & MASK64
        cpu.rdi = (cpu.rdi + count) & MASK64
        cpu.rcx = 0
        cpu.rip += instr.length
    elif kind is Kind.HLT:
        cpu.rip += instr.length
        cpu.halted = True
        return HALT
    elif kind in (Kind.JMP_REL8, Kind.JMP_REL32):
        cpu.rip = (cpu.rip + instr.length + instr.disp) & MASK64
    else:  # NOP
        cpu.rip += instr.length
    cpu.rip &= MASK64
    return CONTINUE


def run(
    cpu: CpuState,
    space: GuestAddressSpace,
    hooks: HvHooks,
    max_steps: int = 10_000,
    trace: list | None = None,
) -> RunResult:
    """Step until halt, fault, or the budget runs out."""
    for steps in range(1, max_steps + 1):
        outcome = step(cpu, space, hooks, trace)
        if outcome.outcome is Outcome.HALT:
            return RunResult(cpu, RunStatus.HALT, steps)
        if outcome.outcome is Outcome.FAULT:
            return RunResult(cpu, RunStatus.FAULT, steps, fault_reason=outcome.reason)
    return RunResult(cpu, RunStatus.BUDGET_EXHAUSTED, max_steps)


def execute_rop(
    cpu: CpuState,
    space: GuestAddressSpace,
    chain,
    stack_gva: int | None = None,
    max_steps: int = 10_000,
    hooks: HvHooks | None = None,
    trace: list | None = None,
) -> RunResult:
    """Drop a ROP chain onto the shared page under the stack pointer and run.

    The chain words are written through the hypervisor's raw view, which only
    lands intact because the page under ``rsp`` is shared.
    """
    if stack_gva is not None:
        cpu.rsp = stack_gva
    hpa = space.translate(cpu.rsp)
    space.memory.write(hpa, chain.to_bytes())
    return run(cpu, space, hooks or HvHooks(), max_steps=max_steps, trace=trace)
