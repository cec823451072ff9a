"""Secure-processor model: guest context lifecycle and the launch commands.

The command set and its state gating:

    UNINIT   + LAUNCH_START        -> LUPDATE
    LUPDATE  + LAUNCH_UPDATE_DATA  -> LUPDATE
    LUPDATE  + LAUNCH_UPDATE_VMSA  -> LUPDATE
    LUPDATE  + LAUNCH_MEASURE      -> LSECRET
    LSECRET  + LAUNCH_SECRET       -> LSECRET
    LSECRET  + LAUNCH_FINISH       -> RUNNING

Every other (state, command) pair is rejected with InvalidState. The VEK is
generated here and never leaves; callers get a bound MemoryCipher instead.
"""

from __future__ import annotations

import hashlib
import json
import random
import secrets
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PublicKey

from . import crypto
from .crypto import (
    BLOCK_SIZE,
    DigestScheme,
    LaunchDigestState,
    LoadCall,
    Measurement,
    MemoryCipher,
    Policy,
    SecretPacket,
    SessionKeys,
)
from .errors import InvalidState, LengthNotMultipleOf16, UnalignedAddress
from .memory import PAGE_SIZE, GuestAddressSpace, PhysicalMemory


class GuestState(Enum):
    UNINIT = "UNINIT"
    LUPDATE = "LUPDATE"
    LSECRET = "LSECRET"
    RUNNING = "RUNNING"


VMSA_SIZE = PAGE_SIZE


@dataclass
class GuestContext:
    """Per-VM record the secure processor keeps.

    The VEK is private to this module; the launch digest is touched only by
    the update commands.
    """

    handle: int
    state: GuestState = GuestState.UNINIT
    policy: Policy = Policy(0)
    ld: LaunchDigestState | None = None
    session: SessionKeys | None = None
    api_major: int = 0
    api_minor: int = 0
    build: int = 0
    _vek: bytes | None = field(default=None, repr=False)


def _randbytes(rng: random.Random | None, n: int) -> bytes:
    return rng.randbytes(n) if rng is not None else secrets.token_bytes(n)


class SecureProcessor:
    """The on-chip co-processor: owns per-guest keys and the launch commands.

    An injected, seedable RNG makes VEK/MNONCE draws reproducible in tests;
    without one the OS entropy pool is used. Every command appends a record
    to ``trace`` with the state transition and hashes of its inputs, never
    key material.
    """

    def __init__(
        self,
        rng: random.Random | None = None,
        api_major: int = 0,
        api_minor: int = 24,
        build: int = 10,
    ):
        self._rng = rng
        self.api_major = api_major
        self.api_minor = api_minor
        self.build = build
        self._dh_private, self._dh_public = crypto.generate_keypair(rng)
        self._next_handle = 1
        self.trace: list[dict] = []

    # --- platform side ---------------------------------------------------

    def pdh_export(self) -> X25519PublicKey:
        """Hand out the platform public key. Certificate chain checks are a
        stub here; the key itself is what the handshake needs."""
        return self._dh_public

    def create_guest(self) -> GuestContext:
        ctx = GuestContext(handle=self._next_handle)
        self._next_handle += 1
        return ctx

    def memory_cipher(self, ctx: GuestContext) -> MemoryCipher:
        """Bound encryption engine for this guest; the key stays inside."""
        if ctx._vek is None:
            raise InvalidState("guest has no encryption key before LAUNCH_START")
        return MemoryCipher(ctx._vek)

    # --- launch commands --------------------------------------------------

    def _log(self, command: str, ctx: GuestContext, before: GuestState, ok: bool, **extra):
        entry = {
            "command": command,
            "handle": ctx.handle,
            "state_before": before.value,
            "state_after": ctx.state.value,
            "ok": ok,
        }
        entry.update(extra)
        self.trace.append(entry)

    def _require(self, ctx: GuestContext, command: str, expected: GuestState):
        if ctx.state is not expected:
            self._log(command, ctx, ctx.state, ok=False, error="InvalidState")
            raise InvalidState(f"{command} not allowed in state {ctx.state.value}")

    def launch_start(
        self,
        ctx: GuestContext,
        owner_public: X25519PublicKey,
        policy: Policy,
        scheme: DigestScheme = DigestScheme.VULNERABLE,
    ):
        """Finalize the key handshake and arm the guest for loading.

        Generates a fresh VEK, derives the transport keys from the owner's
        public key, and selects the digest scheme (standing in for the
        firmware version the owner would pin during attestation).
        """
        before = ctx.state
        self._require(ctx, "LAUNCH_START", GuestState.UNINIT)
        ctx.session = crypto.derive_session(self._dh_private, owner_public)
        ctx._vek = _randbytes(self._rng, 16)
        ctx.policy = policy
        ctx.ld = LaunchDigestState(scheme)
        ctx.api_major, ctx.api_minor, ctx.build = self.api_major, self.api_minor, self.build
        ctx.state = GuestState.LUPDATE
        self._log("LAUNCH_START", ctx, before, ok=True, policy=policy.value, scheme=scheme.value)

    def launch_update_data(self, ctx: GuestContext, memory: PhysicalMemory, call: LoadCall):
        """Measure and in-place encrypt ``call.length`` bytes at ``call.hpa``.

        The digest absorbs the plaintext before it is replaced by ciphertext,
        each 16-byte sub-block tweaked with its own address.
        """
        self._require(ctx, "LAUNCH_UPDATE_DATA", GuestState.LUPDATE)
        self._update(ctx, memory, call, command="LAUNCH_UPDATE_DATA")

    def launch_update_vmsa(
        self, ctx: GuestContext, memory: PhysicalMemory, hpa: int, gpa: int | None = None
    ):
        """Like LAUNCH_UPDATE_DATA but fixed at one page: the register save
        area. Not restricted to a single call, matching the firmware."""
        self._require(ctx, "LAUNCH_UPDATE_VMSA", GuestState.LUPDATE)
        if hpa % PAGE_SIZE != 0:
            raise UnalignedAddress(f"vmsa hpa {hpa:#x} is not page aligned")
        call = LoadCall(hpa=hpa, gpa=hpa if gpa is None else gpa, length=VMSA_SIZE)
        self._update(ctx, memory, call, command="LAUNCH_UPDATE_VMSA")

    def _update(self, ctx: GuestContext, memory: PhysicalMemory, call: LoadCall, command: str):
        before = ctx.state
        if call.hpa % BLOCK_SIZE != 0:
            raise UnalignedAddress(f"hpa {call.hpa:#x} is not 16-byte aligned")
        if call.length <= 0 or call.length % BLOCK_SIZE != 0:
            raise LengthNotMultipleOf16(f"length {call.length} is not a positive multiple of 16")
        plaintext = memory.read(call.hpa, call.length)
        resolved = LoadCall(hpa=call.hpa, gpa=call.gpa, length=call.length, data=plaintext)
        ctx.ld = crypto.digest_absorb(ctx.ld, resolved)
        cipher = MemoryCipher(ctx._vek)
        memory.write(call.hpa, cipher.encrypt(plaintext, call.hpa))
        self._log(
            command,
            ctx,
            before,
            ok=True,
            hpa=call.hpa,
            gpa=call.gpa,
            length=call.length,
            data_sha256=hashlib.sha256(plaintext).hexdigest(),
        )

    def launch_measure(self, ctx: GuestContext) -> Measurement:
        """Finalize the digest, tag it under the TIK with a fresh nonce, and
        move to the secret-injection state."""
        before = ctx.state
        self._require(ctx, "LAUNCH_MEASURE", GuestState.LUPDATE)
        mnonce = _randbytes(self._rng, 16)
        ld = crypto.digest_finalize(ctx.ld)
        measurement = crypto.compute_measurement(
            ld, ctx.policy, ctx.api_major, ctx.api_minor, ctx.build, mnonce, ctx.session.tik
        )
        ctx.state = GuestState.LSECRET
        self._log(
            "LAUNCH_MEASURE",
            ctx,
            before,
            ok=True,
            mnonce=mnonce.hex(),
            measure=measurement.measure.hex(),
        )
        return measurement

    def launch_secret(
        self, ctx: GuestContext, space: GuestAddressSpace, packet: SecretPacket, gpa: int
    ):
        """Unwrap an owner-sealed packet and place it through the guest's
        encrypted view at ``gpa``. A failed integrity check aborts before
        anything is written."""
        before = ctx.state
        self._require(ctx, "LAUNCH_SECRET", GuestState.LSECRET)
        plaintext = crypto.unwrap_secret(packet, ctx.session.tek, ctx.session.tik)
        space.write(gpa, plaintext)
        self._log(
            "LAUNCH_SECRET",
            ctx,
            before,
            ok=True,
            gpa=gpa,
            length=len(plaintext),
            packet_sha256=hashlib.sha256(packet.to_bytes()).hexdigest(),
        )

    def launch_finish(self, ctx: GuestContext):
        """Close the launch: the guest runs, the launch commands go dead."""
        before = ctx.state
        self._require(ctx, "LAUNCH_FINISH", GuestState.LSECRET)
        ctx.state = GuestState.RUNNING
        self._log("LAUNCH_FINISH", ctx, before, ok=True)

    def dump_trace(self, path) -> None:
        """Write the command log as JSON lines."""
        Path(path).write_text("".join(json.dumps(e) + "\n" for e in self.trace))
