"""Desk-scale simulator of the AMD SEV(-ES) guest launch and attestation
protocol, an attack toolkit that exploits the launch digest's indifference
to block order, and hardened digest variants that close the hole.
"""

from .crypto import (
    DigestScheme,
    LaunchDigestState,
    LoadCall,
    Measurement,
    MemoryCipher,
    Policy,
    SecretPacket,
    SessionKeys,
    compute_measurement,
    derive_session,
    digest_absorb,
    digest_finalize,
    generate_keypair,
    memcipher_decrypt,
    memcipher_encrypt,
    unwrap_secret,
    wrap_secret,
)
from .disasm import Instr, Kind, decode_at, decode_window, find_all
from .emulator import CpuState, HvHooks, RunResult, RunStatus, execute_rop, run, step
from .gadgets import (
    STAGE1_SEQUENCE,
    ChainLink,
    PermutationPlan,
    RopChain,
    RopGadget,
    apply_permutation,
    build_block_chain,
    build_write_chain,
    copy_payload,
    plan_permutation,
    scan_chain_links,
    scan_rop_gadgets,
)
from .memory import GuestAddressSpace, PageAttributes, PhysicalMemory
from .owner import (
    LoadPlan,
    PlanEntry,
    build_secret_packet,
    contiguous_plan,
    expected_measurement,
    verify_measurement,
)
from .scenario import (
    ScenarioReport,
    SyntheticImage,
    block_count,
    build_test_image,
    evaluate_mitigations,
    run_honest_launch,
    run_permutation_attack,
)
from .secure_processor import GuestContext, GuestState, SecureProcessor

__version__ = "0.1.0"
