"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


# crypto
class LengthNotMultipleOf16(SimError):
    """Data length is not a positive multiple of the 16-byte block size."""


class EmptyData(SimError):
    """An absorb or load was attempted with no data."""


class NoDataAbsorbed(SimError):
    """Digest finalized before any data was absorbed."""


class InvalidPublicKey(SimError):
    """Peer public key is malformed or yields a degenerate shared secret."""


class BadHmac(SimError):
    """Integrity check failed: the packet was tampered with or the key is wrong."""


class BadLength(SimError):
    """A field has an impossible length for its declared layout."""


class UnalignedAddress(SimError):
    """Address violates the required 16-byte or page alignment."""


# memory
class UnmappedAddress(SimError):
    """Guest-physical address has no mapping."""


class OutOfBounds(SimError):
    """Host-physical access outside the backing store."""


# secure processor
class InvalidState(SimError):
    """Launch command issued in a guest state that does not permit it."""


# owner
class PlanImageMismatch(SimError):
    """Load plan does not cover the image exactly."""


class EmptySecret(SimError):
    """Refused to wrap a zero-length secret."""


# disasm
class OffsetOutOfRange(SimError):
    """Decode offset lies outside the buffer."""


# gadgets
class NoChainFound(SimError):
    """No block chain realizes the requested payload sequence."""


class PlacementConflict(SimError):
    """Permutation would move a block the boot path depends on."""


class MissingGadgetKind(SimError):
    """The scanned image lacks a gadget kind the chain needs."""
