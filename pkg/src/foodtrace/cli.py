"""Command line interface.

    foodtrace run <config> [--seed N] [--out DIR]
    foodtrace trace <chain...> <id>
    foodtrace verify <chain> [--keys FILE]
    foodtrace tamper <chain> <block> <offset>
    foodtrace serve <chain...> <addr> [--keys FILE]

Exit codes are a stable contract: 0 success, 1 verification failure,
2 config or parse error (including unknown ids and bad arguments).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ledger import (
    Chain,
    ChainParseError,
    KeyDirectory,
    decode_raw_chain,
    export_chain,
    parse_chain_file,
    replay_chain,
    verify_raw_chain,
)
from .provenance import IdParseError, ProvenanceGraph, parse_entity_id, trace_back
from .scenario import ConfigError, load_config
from .simulator import run_scenario

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG_ERROR):
        super().__init__(message)
        self.code = code


def _read_raw_chain(path: str) -> list[bytes]:
    try:
        content = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_chain_file(content)
    except ChainParseError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _load_verified_chains(paths: list[str]) -> dict[str, Chain]:
    chains = {}
    for path in paths:
        raw = _read_raw_chain(path)
        report = verify_raw_chain(raw)
        if not report.ok:
            raise CliError(
                f"{path}: verification failed at block {report.first_bad_block}: {report.reason}",
                EXIT_VERIFY_FAILED,
            )
        _, chain = replay_chain(decode_raw_chain(raw))
        chains[Path(path).stem] = chain
    return chains


def _load_key_directory(path: str | None) -> KeyDirectory | None:
    if path is None:
        return None
    directory = {}
    try:
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            org, serial, key_hex = line.split()
            directory[(org, int(serial))] = bytes.fromhex(key_hex)
    except (OSError, ValueError) as exc:
        raise CliError(f"bad key directory {path}: {exc}") from exc
    return directory


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            from dataclasses import replace

            config = replace(config, seed=args.seed)
        sim, report = run_scenario(config, base_dir=Path(args.config).parent)
    except ConfigError as exc:
        raise CliError(f"config error: {exc}") from exc
    if args.out:
        out_dir = Path(args.out)
        sim.export(out_dir)
        (out_dir / "report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK if report.verification == "ok" else EXIT_VERIFY_FAILED


def cmd_trace(args) -> int:
    try:
        entity = parse_entity_id(args.id)
    except IdParseError as exc:
        raise CliError(str(exc)) from exc
    chains = _load_verified_chains(args.chains)
    graph = ProvenanceGraph.from_chains(chains.values())
    if entity not in graph:
        raise CliError(f"unknown entity {args.id}")
    print(trace_back(entity, graph).to_json())
    return EXIT_OK


def cmd_verify(args) -> int:
    raw = _read_raw_chain(args.chain)
    report = verify_raw_chain(raw, _load_key_directory(args.keys))
    if report.ok:
        print(json.dumps({"ok": True, "blocks": len(raw)}))
        return EXIT_OK
    print(json.dumps({"ok": False, "first_bad_block": report.first_bad_block, "reason": report.reason}))
    return EXIT_VERIFY_FAILED


def cmd_tamper(args) -> int:
    path = Path(args.chain)
    raw = _read_raw_chain(args.chain)
    if not 0 <= args.block < len(raw):
        raise CliError(f"block {args.block} out of range (chain has {len(raw)} blocks)")
    block = raw[args.block]
    if not 0 <= args.offset < len(block):
        raise CliError(f"offset {args.offset} out of range (block has {len(block)} bytes)")
    mutated = block[: args.offset] + bytes([block[args.offset] ^ 0xFF]) + block[args.offset + 1 :]
    raw[args.block] = mutated
    path.write_text("".join(b.hex() + "\n" for b in raw))
    print(json.dumps({"tampered": {"block": args.block, "offset": args.offset}}))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    chains = _load_verified_chains(args.chains)
    server = serve(chains, args.addr, _load_key_directory(args.keys))
    host, port = server.server_address[:2]
    print(f"serving {sorted(chains)} on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foodtrace", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario config deterministically")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="export chains, keys, and report here")
    p_run.set_defaults(func=cmd_run)

    p_trace = sub.add_parser("trace", help="trace an entity back through exported chains")
    p_trace.add_argument("chains", nargs="+", help="chain files (graph is their union)")
    p_trace.add_argument("id", help="entity id, e.g. MFG-UNIT-00000001")
    p_trace.set_defaults(func=cmd_trace)

    p_verify = sub.add_parser("verify", help="verify a chain export")
    p_verify.add_argument("chain")
    p_verify.add_argument("--keys", default=None, help="key directory for signature checks")
    p_verify.set_defaults(func=cmd_verify)

    p_tamper = sub.add_parser("tamper", help="flip one byte of one block in place")
    p_tamper.add_argument("chain")
    p_tamper.add_argument("block", type=int)
    p_tamper.add_argument("offset", type=int)
    p_tamper.set_defaults(func=cmd_tamper)

    p_serve = sub.add_parser("serve", help="serve read-only queries over exported chains")
    p_serve.add_argument("chains", nargs="+")
    p_serve.add_argument("addr", help="bind address, host:port")
    p_serve.add_argument("--keys", default=None)
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
