"""Cryptographic core: the four launch-digest schemes, the measurement HMAC,
session-key derivation, secret packets, and the address-tweaked memory cipher.

Everything here is a pure function over value inputs; digest state is passed
in and out rather than mutated in place.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass, field
from enum import Enum

from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    BadHmac,
    BadLength,
    EmptyData,
    InvalidPublicKey,
    LengthNotMultipleOf16,
    NoDataAbsorbed,
    UnalignedAddress,
)

BLOCK_SIZE = 16
ZERO_CHAIN = bytes(32)

# Key block fed to AES under the VEK to derive the per-VM tweak key.
TWEAK_KEY_LABEL = b"tweakkey........"

# Labels separating the transport keys derived from one ECDH shared secret.
TEK_LABEL = b"sev-tek"
TIK_LABEL = b"sev-tik"


class DigestScheme(Enum):
    """How the launch digest absorbs one load call.

    VULNERABLE streams the call data into a single SHA-256 and ignores
    addresses and call boundaries entirely; the other three chain a 32-byte
    value per call and bind the host address, the call size, or (SNP-style)
    the data hash, size and guest address.
    """

    VULNERABLE = "vulnerable"
    HPA_BOUND = "hpa"
    SIZE_BOUND = "size"
    SNP_STYLE = "snp"

    @classmethod
    def from_name(cls, name: str) -> "DigestScheme":
        aliases = {
            "vulnerable": cls.VULNERABLE,
            "hpa": cls.HPA_BOUND,
            "hpa-bound": cls.HPA_BOUND,
            "size": cls.SIZE_BOUND,
            "size-bound": cls.SIZE_BOUND,
            "snp": cls.SNP_STYLE,
            "snp-style": cls.SNP_STYLE,
        }
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown digest scheme {name!r}") from None


ALL_SCHEMES = tuple(DigestScheme)


@dataclass(frozen=True)
class LoadCall:
    """One load-and-encrypt invocation: the unit digests are defined over.

    ``data`` is the plaintext at ``hpa``; the secure processor fills it in
    from physical memory, while replays and plans construct it directly.
    """

    hpa: int
    gpa: int
    length: int
    data: bytes | None = None


class LaunchDigestState:
    """Running launch digest for one guest.

    VULNERABLE keeps a streaming SHA-256 context whose finalization is
    deferred until measurement; the chained schemes keep the current 32-byte
    chaining value, starting from all zeros.
    """

    def __init__(self, scheme: DigestScheme):
        self.scheme = scheme
        self.call_count = 0
        self._stream = hashlib.sha256()
        self._chain = ZERO_CHAIN

    def copy(self) -> "LaunchDigestState":
        dup = LaunchDigestState(self.scheme)
        dup.call_count = self.call_count
        dup._stream = self._stream.copy()
        dup._chain = self._chain
        return dup

    def __repr__(self):
        return f"LaunchDigestState(scheme={self.scheme.value!r}, call_count={self.call_count})"


def _le8(value: int) -> bytes:
    return value.to_bytes(8, "little")


def digest_absorb(state: LaunchDigestState, call: LoadCall) -> LaunchDigestState:
    """Absorb one load call, returning the successor digest state.

    The input state is left untouched. VULNERABLE sees only the data bytes;
    HPA_BOUND chains h = SHA-256(h || hpa || data), SIZE_BOUND chains the
    call length instead of the address, and SNP_STYLE chains
    SHA-256(h || SHA-256(data) || length || gpa), finalized per call.
    """
    if call.data is None or call.length == 0:
        raise EmptyData("load call carries no data")
    if call.length < 0 or call.length % BLOCK_SIZE != 0:
        raise LengthNotMultipleOf16(f"length {call.length} is not a positive multiple of 16")
    if len(call.data) != call.length:
        raise BadLength(f"data is {len(call.data)} bytes but length says {call.length}")

    nxt = state.copy()
    if state.scheme is DigestScheme.VULNERABLE:
        nxt._stream.update(call.data)
    elif state.scheme is DigestScheme.HPA_BOUND:
        nxt._chain = hashlib.sha256(state._chain + _le8(call.hpa) + call.data).digest()
    elif state.scheme is DigestScheme.SIZE_BOUND:
        nxt._chain = hashlib.sha256(state._chain + _le8(call.length) + call.data).digest()
    else:  # SNP_STYLE
        inner = hashlib.sha256(call.data).digest()
        nxt._chain = hashlib.sha256(
            state._chain + inner + _le8(call.length) + _le8(call.gpa)
        ).digest()
    nxt.call_count = state.call_count + 1
    return nxt


def digest_finalize(state: LaunchDigestState) -> bytes:
    """Return the 32-byte launch digest. Idempotent; the state survives."""
    if state.call_count == 0:
        raise NoDataAbsorbed("launch digest finalized before any load")
    if state.scheme is DigestScheme.VULNERABLE:
        return state._stream.digest()
    return state._chain


@dataclass(frozen=True)
class Policy:
    """Guest policy flags; serialized as 4 bytes little-endian in the HMAC."""

    value: int = 0

    def __post_init__(self):
        if not 0 <= self.value < 2**32:
            raise BadLength(f"policy {self.value:#x} does not fit 32 bits")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(4, "little")


@dataclass(frozen=True)
class Measurement:
    """Launch measurement: a fresh 128-bit nonce and the keyed 256-bit tag."""

    mnonce: bytes
    measure: bytes


def compute_measurement(
    ld: bytes,
    policy: Policy,
    api_major: int,
    api_minor: int,
    build: int,
    mnonce: bytes,
    tik: bytes,
) -> Measurement:
    """HMAC-SHA-256 over the fixed 56-byte layout:

    0x04 | api_major | api_minor | build | policy(4B LE) | ld(32B) | mnonce(16B)
    """
    if len(ld) != 32:
        raise BadLength("launch digest must be 32 bytes")
    if len(mnonce) != 16:
        raise BadLength("mnonce must be 16 bytes")
    msg = (
        bytes([0x04, api_major & 0xFF, api_minor & 0xFF, build & 0xFF])
        + policy.to_bytes()
        + ld
        + mnonce
    )
    tag = hmac.new(tik, msg, hashlib.sha256).digest()
    return Measurement(mnonce=mnonce, measure=tag)


@dataclass
class SessionKeys:
    """Transport keys shared by guest owner and secure processor.

    ``vek`` is carried only inside the secure processor; reprs never show
    key bytes.
    """

    tek: bytes = field(repr=False)
    tik: bytes = field(repr=False)
    vek: bytes | None = field(default=None, repr=False)


def generate_keypair(rng=None) -> tuple[X25519PrivateKey, X25519PublicKey]:
    """Fresh ECDH keypair; pass a seeded ``random.Random`` for reproducibility."""
    seed = rng.randbytes(32) if rng is not None else secrets.token_bytes(32)
    private = X25519PrivateKey.from_private_bytes(seed)
    return private, private.public_key()


def derive_session(owner_private: X25519PrivateKey, sp_public: X25519PublicKey) -> SessionKeys:
    """Run the ECDH exchange and split the shared secret into TEK and TIK.

    Distinct derivation labels keep the two keys independent; both sides
    compute identical keys by symmetry.
    """
    try:
        shared = owner_private.exchange(sp_public)
    except (ValueError, TypeError, AttributeError) as exc:
        raise InvalidPublicKey(str(exc)) from exc
    tek = hmac.new(shared, TEK_LABEL, hashlib.sha256).digest()[:16]
    tik = hmac.new(shared, TIK_LABEL, hashlib.sha256).digest()
    return SessionKeys(tek=tek, tik=tik)


@dataclass(frozen=True)
class SecretPacket:
    """Owner-sealed secret: header, AES-128-CTR ciphertext and HMAC tag.

    The header records the true plaintext length (the ciphertext is padded
    to whole 16-byte blocks) and the CTR IV; the tag covers header and
    ciphertext under the TIK.
    """

    length: int
    iv: bytes
    ciphertext: bytes
    mac: bytes

    def header(self) -> bytes:
        return self.length.to_bytes(8, "little") + self.iv

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext + self.mac

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SecretPacket":
        if len(raw) < 8 + 16 + 32 + 16:
            raise BadLength("secret packet too short")
        length = int.from_bytes(raw[:8], "little")
        iv = raw[8:24]
        ciphertext = raw[24:-32]
        mac = raw[-32:]
        return cls(length=length, iv=iv, ciphertext=ciphertext, mac=mac)


def _aes_ctr(key: bytes, iv: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(data) + enc.finalize()


def wrap_secret(plaintext: bytes, tek: bytes, tik: bytes, iv: bytes) -> SecretPacket:
    """Encrypt under the TEK and authenticate header+ciphertext under the TIK."""
    if len(plaintext) == 0:
        raise BadLength("nothing to wrap")
    if len(iv) != 16:
        raise BadLength("iv must be 16 bytes")
    pad = (-len(plaintext)) % BLOCK_SIZE
    ciphertext = _aes_ctr(tek, iv, plaintext + bytes(pad))
    packet = SecretPacket(length=len(plaintext), iv=iv, ciphertext=ciphertext, mac=b"")
    mac = hmac.new(tik, packet.header() + ciphertext, hashlib.sha256).digest()
    return SecretPacket(length=len(plaintext), iv=iv, ciphertext=ciphertext, mac=mac)


def unwrap_secret(packet: SecretPacket, tek: bytes, tik: bytes) -> bytes:
    """Verify the tag, then decrypt. The tag is checked before any decryption."""
    expect = hmac.new(tik, packet.header() + packet.ciphertext, hashlib.sha256).digest()
    if not hmac.compare_digest(expect, packet.mac):
        raise BadHmac("secret packet failed integrity check")
    n = len(packet.ciphertext)
    if n == 0 or n % BLOCK_SIZE != 0:
        raise BadLength("ciphertext is not whole blocks")
    if not 0 < packet.length <= n or n - packet.length >= BLOCK_SIZE:
        raise BadLength("declared length inconsistent with ciphertext")
    plaintext = _aes_ctr(tek, packet.iv, packet.ciphertext)
    return plaintext[: packet.length]


def _aes_encrypt_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _aes_decrypt_block(key: bytes, block: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.ECB()).decryptor()
    return dec.update(block) + dec.finalize()


def _xor16(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _tweak_key(vek: bytes) -> bytes:
    return _aes_encrypt_block(vek, TWEAK_KEY_LABEL)


def memcipher_encrypt(block: bytes, hpa: int, vek: bytes) -> bytes:
    """XEX-encrypt one 16-byte block with a tweak derived from its address:

    C = AES(VEK, P ^ T) ^ T  with  T = AES(K_t, hpa as 16B LE).
    """
    if len(block) != BLOCK_SIZE:
        raise BadLength("memory cipher works on 16-byte blocks")
    if hpa % BLOCK_SIZE != 0:
        raise UnalignedAddress(f"hpa {hpa:#x} is not 16-byte aligned")
    tweak = _aes_encrypt_block(_tweak_key(vek), hpa.to_bytes(16, "little"))
    return _xor16(_aes_encrypt_block(vek, _xor16(block, tweak)), tweak)


def memcipher_decrypt(block: bytes, hpa: int, vek: bytes) -> bytes:
    """Exact inverse of :func:`memcipher_encrypt` at the same address."""
    if len(block) != BLOCK_SIZE:
        raise BadLength("memory cipher works on 16-byte blocks")
    if hpa % BLOCK_SIZE != 0:
        raise UnalignedAddress(f"hpa {hpa:#x} is not 16-byte aligned")
    tweak = _aes_encrypt_block(_tweak_key(vek), hpa.to_bytes(16, "little"))
    return _xor16(_aes_decrypt_block(vek, _xor16(block, tweak)), tweak)


class MemoryCipher:
    """Per-VM memory encryption engine.

    Holds the VEK the way the memory controller does: usable, never
    readable. Caches the derived tweak key.
    """

    def __init__(self, vek: bytes):
        if len(vek) != 16:
            raise BadLength("vek must be a 128-bit key")
        self._vek = vek
        self._kt = _tweak_key(vek)

    def __repr__(self):
        return "MemoryCipher(<key withheld>)"

    def _tweak(self, hpa: int) -> bytes:
        if hpa % BLOCK_SIZE != 0:
            raise UnalignedAddress(f"hpa {hpa:#x} is not 16-byte aligned")
        return _aes_encrypt_block(self._kt, hpa.to_bytes(16, "little"))

    def encrypt_block(self, block: bytes, hpa: int) -> bytes:
        if len(block) != BLOCK_SIZE:
            raise BadLength("memory cipher works on 16-byte blocks")
        t = self._tweak(hpa)
        return _xor16(_aes_encrypt_block(self._vek, _xor16(block, t)), t)

    def decrypt_block(self, block: bytes, hpa: int) -> bytes:
        if len(block) != BLOCK_SIZE:
            raise BadLength("memory cipher works on 16-byte blocks")
        t = self._tweak(hpa)
        return _xor16(_aes_decrypt_block(self._vek, _xor16(block, t)), t)

    def encrypt(self, data: bytes, hpa: int) -> bytes:
        """Encrypt whole blocks back to back, each under its own address tweak."""
        if len(data) % BLOCK_SIZE != 0:
            raise LengthNotMultipleOf16("bulk cipher input must be whole blocks")
        out = bytearray()
        for off in range(0, len(data), BLOCK_SIZE):
            out += self.encrypt_block(data[off : off + BLOCK_SIZE], hpa + off)
        return bytes(out)

    def decrypt(self, data: bytes, hpa: int) -> bytes:
        if len(data) % BLOCK_SIZE != 0:
            raise LengthNotMultipleOf16("bulk cipher input must be whole blocks")
        out = bytearray()
        for off in range(0, len(data), BLOCK_SIZE):
            out += self.decrypt_block(data[off : off + BLOCK_SIZE], hpa + off)
        return bytes(out)
