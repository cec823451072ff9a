"""Guest-owner side: replaying the expected measurement from the negotiated
image and load plan, verifying what the platform reports, and sealing
secrets for injection.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import random
import secrets
from dataclasses import dataclass
from pathlib import Path

from . import crypto
from .crypto import (
    BLOCK_SIZE,
    DigestScheme,
    LaunchDigestState,
    LoadCall,
    Measurement,
    Policy,
    SecretPacket,
    SessionKeys,
)
from .errors import EmptySecret, PlanImageMismatch
from .memory import PAGE_SIZE


@dataclass(frozen=True)
class PlanEntry:
    """One intended load call: where the data goes and how much per call."""

    gpa: int
    hpa: int
    length: int


@dataclass
class LoadPlan:
    """The negotiated load schedule for an image, in intended data order."""

    entries: list[PlanEntry]
    scheme: DigestScheme

    def total_length(self) -> int:
        return sum(e.length for e in self.entries)


def contiguous_plan(
    image_length: int,
    gpa_base: int,
    hpa_base: int,
    scheme: DigestScheme,
    chunk: int = PAGE_SIZE,
) -> LoadPlan:
    """The ordinary honest schedule: contiguous placement, large chunks
    (kernels pick the biggest physically contiguous runs they can)."""
    entries = []
    off = 0
    while off < image_length:
        take = min(chunk, image_length - off)
        entries.append(PlanEntry(gpa=gpa_base + off, hpa=hpa_base + off, length=take))
        off += take
    return LoadPlan(entries=entries, scheme=scheme)


def replay_digest(image: bytes, plan: LoadPlan) -> bytes:
    """Recompute the launch digest the platform should have produced."""
    if plan.total_length() != len(image):
        raise PlanImageMismatch(
            f"plan covers {plan.total_length()} bytes, image has {len(image)}"
        )
    state = LaunchDigestState(plan.scheme)
    off = 0
    for entry in plan.entries:
        if entry.length <= 0 or entry.length % BLOCK_SIZE != 0:
            raise PlanImageMismatch(f"plan entry length {entry.length} not a multiple of 16")
        data = image[off : off + entry.length]
        state = crypto.digest_absorb(
            state, LoadCall(hpa=entry.hpa, gpa=entry.gpa, length=entry.length, data=data)
        )
        off += entry.length
    return crypto.digest_finalize(state)


def expected_measurement(
    image: bytes,
    plan: LoadPlan,
    policy: Policy,
    api_major: int,
    api_minor: int,
    build: int,
    mnonce: bytes,
    tik: bytes,
) -> Measurement:
    """The measurement an honest platform would report for this launch."""
    ld = replay_digest(image, plan)
    return crypto.compute_measurement(ld, policy, api_major, api_minor, build, mnonce, tik)


def verify_measurement(
    received: Measurement,
    image: bytes,
    plan: LoadPlan,
    policy: Policy,
    api_major: int,
    api_minor: int,
    build: int,
    tik: bytes,
) -> bool:
    """Recompute under the received nonce and compare tags. Never raises for
    a mismatch; a False is the owner's signal to walk away."""
    expected = expected_measurement(
        image, plan, policy, api_major, api_minor, build, received.mnonce, tik
    )
    return hmac.compare_digest(expected.measure, received.measure)


def build_secret_packet(
    secret: bytes, keys: SessionKeys, rng: random.Random | None = None
) -> SecretPacket:
    """Seal a secret for the platform, with a fresh IV per packet."""
    if len(secret) == 0:
        raise EmptySecret("refusing to wrap an empty secret")
    iv = rng.randbytes(16) if rng is not None else secrets.token_bytes(16)
    return crypto.wrap_secret(secret, keys.tek, keys.tik, iv)


def write_manifest(
    path: str | Path,
    image_path: str,
    image: bytes,
    plan: LoadPlan,
    policy: Policy,
    api_major: int,
    api_minor: int,
    build: int,
):
    """Record the negotiated initial contents: image identity, load plan and
    version/policy pins, as one JSON document."""
    doc = {
        "image_path": image_path,
        "sha256": hashlib.sha256(image).hexdigest(),
        "plan": [{"gpa": e.gpa, "hpa": e.hpa, "length": e.length} for e in plan.entries],
        "policy": policy.value,
        "api_major": api_major,
        "api_minor": api_minor,
        "build": build,
        "scheme": plan.scheme.value,
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["plan"] = LoadPlan(
        entries=[PlanEntry(p["gpa"], p["hpa"], p["length"]) for p in doc["plan"]],
        scheme=DigestScheme.from_name(doc["scheme"]),
    )
    doc["policy"] = Policy(doc["policy"])
    return doc
