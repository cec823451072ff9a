"""Command-line front end.

Subcommands: build-image, honest, attack, mitigations, scan, blocks. All
emit JSON to stdout or --out. Exit codes: 0 on success, 2 when an attack
scenario fails (no usable chain, detection, or a missed leak), 1 on usage
errors.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from . import owner, scenario
from .crypto import DigestScheme
from .disasm import Kind
from .errors import SimError
from .gadgets import STAGE1_SEQUENCE, scan_chain_links, scan_rop_gadgets

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ATTACK_FAILED = 2

_SIZE_RE = re.compile(r"^([0-9]+(?:\.[0-9]+)?)\s*(KIB|MIB|GIB|KB|MB|GB|K|M|G|B)?$")
_SIZE_MULT = {
    None: 1,
    "B": 1,
    "K": 1 << 10,
    "KB": 1 << 10,
    "KIB": 1 << 10,
    "M": 1 << 20,
    "MB": 1 << 20,
    "MIB": 1 << 20,
    "G": 1 << 30,
    "GB": 1 << 30,
    "GIB": 1 << 30,
}


def parse_size(text: str) -> int:
    """Byte counts with binary suffixes: '4096', '3.5MiB', '16K'."""
    m = _SIZE_RE.match(text.strip().upper())
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse size {text!r}")
    value = float(m.group(1)) * _SIZE_MULT[m.group(2)]
    if value != int(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"size {text!r} is not a whole positive byte count")
    return int(value)


def parse_scheme(text: str) -> DigestScheme:
    try:
        return DigestScheme.from_name(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; this tool reserves 2 for
    # failed attacks
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_image(path: str) -> scenario.SyntheticImage:
    return scenario.SyntheticImage.load(path)


def _secret(args) -> bytes | None:
    return bytes.fromhex(args.secret_hex) if args.secret_hex else None


def cmd_build_image(args) -> int:
    image = scenario.build_test_image(seed=args.seed, size=args.size)
    image.save(args.out)
    plan = owner.contiguous_plan(
        len(image.data), scenario.IMAGE_BASE, scenario.IMAGE_BASE, args.scheme
    )
    manifest_path = str(args.out) + ".manifest.json"
    owner.write_manifest(
        manifest_path,
        image_path=str(args.out),
        image=image.data,
        plan=plan,
        policy=scenario.POLICY,
        api_major=0,
        api_minor=24,
        build=10,
    )
    _emit(
        {
            "image": str(args.out),
            "meta": str(args.out) + ".meta.json",
            "manifest": manifest_path,
            "size": len(image.data),
            "seed": args.seed,
            "entry_hook": image.entry_hook,
            "config_offset": image.config_offset,
        },
        args.json_out,
    )
    return EXIT_OK


def cmd_honest(args) -> int:
    image = _load_image(args.image)
    plan = None
    if args.manifest:
        doc = owner.read_manifest(args.manifest)
        plan = doc["plan"]
        if args.scheme is not None and plan.scheme is not args.scheme:
            plan.scheme = args.scheme
    scheme = args.scheme or (plan.scheme if plan else DigestScheme.VULNERABLE)
    report = scenario.run_honest_launch(
        image, _secret(args), scheme, plan=plan, sp_seed=args.sp_seed, trace=args.trace
    )
    _emit(report.to_dict(), args.out)
    return EXIT_OK if report.verified.get(scheme.value) else EXIT_ATTACK_FAILED


def cmd_attack(args) -> int:
    image = _load_image(args.image)
    report = scenario.run_permutation_attack(
        image, _secret(args), args.scheme, sp_seed=args.sp_seed, trace=args.trace
    )
    _emit(report.to_dict(), args.out)
    leaked = report.leaked_secret is not None and report.leaked_secret == report.injected_secret
    return EXIT_OK if leaked else EXIT_ATTACK_FAILED


def cmd_mitigations(args) -> int:
    image = _load_image(args.image)
    matrix = scenario.evaluate_mitigations(image, trials=args.trials, seed=args.seed)
    _emit({"trials": args.trials, "matrix": matrix}, args.out)
    return EXIT_OK


def cmd_scan(args) -> int:
    data = Path(args.binary).read_bytes()
    whole = data[: len(data) - len(data) % 16]
    links = {
        kind.name: [
            {
                "block": l.block_index,
                "entry": l.entry_offset,
                "exit": l.exit_kind.value,
                "next_entry": l.next_entry,
            }
            for l in scan_chain_links(whole, kind)
        ]
        for kind in STAGE1_SEQUENCE
    }
    gadgets = [
        {"offset": g.gva, "kind": g.kind.name, "pattern": g.pattern.hex()}
        for g in scan_rop_gadgets(data, 0)
    ]
    _emit(
        {
            "binary": args.binary,
            "size": len(data),
            "blocks": len(whole) // 16,
            "chain_links": links,
            "chain_link_counts": {k: len(v) for k, v in links.items()},
            "rop_gadgets": gadgets,
            "rop_gadget_counts": {
                kind.name: sum(1 for g in gadgets if g["kind"] == kind.name)
                for kind in (Kind.POP_RAX, Kind.POP_RDX, Kind.MOV_MEM_RAX_RDX)
            },
        },
        args.out,
    )
    return EXIT_OK


def cmd_blocks(args) -> int:
    count = scenario.block_count(args.size, args.block_size)
    _emit(
        {"size_bytes": args.size, "block_size": args.block_size, "blocks": count},
        args.out,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sevsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-image", help="build the seeded synthetic test image")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--size", type=parse_size, default=scenario.DEFAULT_IMAGE_SIZE)
    p.add_argument("--scheme", type=parse_scheme, default=DigestScheme.VULNERABLE)
    p.add_argument("--out", required=True, help="image file; meta and manifest land beside it")
    p.add_argument("--json-out", default=None, help="where to write the build report")
    p.set_defaults(func=cmd_build_image)

    p = sub.add_parser("honest", help="run the intended launch flow")
    p.add_argument("--image", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--scheme", type=parse_scheme, default=None)
    p.add_argument("--secret-hex", default=None)
    p.add_argument("--sp-seed", type=int, default=2024)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_honest)

    p = sub.add_parser("attack", help="run the block-reordering attack end to end")
    p.add_argument("--image", required=True)
    p.add_argument("--scheme", type=parse_scheme, default=DigestScheme.VULNERABLE)
    p.add_argument("--secret-hex", default=None)
    p.add_argument("--sp-seed", type=int, default=2024)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("mitigations", help="grade every digest scheme against the attacks")
    p.add_argument("--image", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mitigations)

    p = sub.add_parser("scan", help="scan an arbitrary binary for chain links and gadgets")
    p.add_argument("--binary", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("blocks", help="measured block count for an image size")
    p.add_argument("--size", type=parse_size, required=True)
    p.add_argument("--block-size", type=parse_size, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_blocks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SimError as exc:
        sys.stderr.write(f"sevsim: {type(exc).__name__}: {exc}\n")
        return EXIT_ATTACK_FAILED
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"sevsim: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
