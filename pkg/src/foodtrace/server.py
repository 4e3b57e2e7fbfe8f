"""Read-only HTTP query facade over exported chains.

Chains are verified at startup and served from immutable snapshots. The
Authorization header carries a hex-encoded canonical certificate; a
request may only see channels whose membership admits the certificate's
org, so trace and history answers are computed over exactly that subset.
Membership roots are recovered from the on-chain config transactions, so
a chain file is self-describing for authorization purposes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import unquote

from .consortium import CONFIG_CHAINCODE, Channel, ChannelConfig, Consortium, authorize
from .identity import Certificate, OrgMsp
from .ledger import Chain, KeyDirectory, get_history, replay_chain, verify_chain
from .provenance import IdParseError, ProvenanceGraph, parse_entity_id, trace_back


def rebuild_consortium(chains: dict[str, Chain]) -> tuple[Consortium, dict[str, Channel]]:
    """Recover channel configs and org root certificates from config txs."""
    msps: dict[str, OrgMsp] = {}
    channels: dict[str, Channel] = {}
    for name, chain in chains.items():
        config: Optional[ChannelConfig] = None
        for block in chain:
            for tx, valid in zip(block.transactions, block.validity_flags):
                if not valid or tx.chaincode[0] != CONFIG_CHAINCODE[0] or not tx.args:
                    continue
                config = ChannelConfig.decode(tx.args[0])
                for raw in tx.args[1:]:
                    cert = Certificate.decode(raw)
                    org = cert.subject.org_id
                    if org not in msps:
                        msps[org] = OrgMsp(org, None, cert)
        if config is None:
            raise ValueError(f"chain {name!r} carries no channel config")
        state, flagged = replay_chain(chain)
        channels[name] = Channel(config, flagged, state)
    return Consortium(msps), channels


@dataclass
class ChainQueryService:
    """Pure query logic; the HTTP handler is a thin shell around it."""

    channels: dict[str, Channel]
    consortium: Consortium
    verification: dict[str, str]
    now: int

    @classmethod
    def from_chains(cls, chains: dict[str, Chain], key_directory: Optional[KeyDirectory] = None):
        consortium, channels = rebuild_consortium(chains)
        verification = {}
        for name, channel in sorted(channels.items()):
            report = verify_chain(channel.chain, key_directory)
            verification[name] = (
                "ok" if report.ok else f"block {report.first_bad_block}: {report.reason}"
            )
        now = 1 + max(
            (tx.timestamp for ch in channels.values() for b in ch.chain for tx in b.transactions),
            default=0,
        )
        return cls(channels, consortium, verification, now)

    @property
    def all_ok(self) -> bool:
        return all(v == "ok" for v in self.verification.values())

    def authorized_channels(self, cert: Certificate) -> list[str]:
        return [
            name
            for name, channel in sorted(self.channels.items())
            if authorize(channel, cert, "read", self.consortium, self.now).allowed
        ]

    def trace(self, entity_id: str, channel_names: list[str]) -> Optional[dict]:
        """Trace over the union of the readable chains; None when unknown."""
        graph = ProvenanceGraph.from_chains(
            [self.channels[name].chain for name in channel_names]
        )
        entity = parse_entity_id(entity_id)
        if entity not in graph:
            return None
        return trace_back(entity, graph).to_dict()

    def history(self, key: str, channel_names: list[str]) -> Optional[dict]:
        out = {}
        for name in channel_names:
            rows = get_history(self.channels[name].chain, key)
            if rows:
                out[name] = [
                    {"block": number, "tx_id": tx_id.hex(), "value": _render_value(value)}
                    for number, tx_id, value in rows
                ]
        return out or None


def _render_value(value: bytes) -> object:
    try:
        return json.loads(value.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        return {"hex": value.hex()}


def make_handler(service: ChainQueryService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload, sort_keys=True, indent=2).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _authenticate(self) -> Optional[list[str]]:
            raw = self.headers.get("Authorization")
            if not raw:
                return None
            try:
                cert = Certificate.decode(bytes.fromhex(raw.strip()))
            except Exception:
                return None
            allowed = service.authorized_channels(cert)
            return allowed or None

        def do_GET(self):
            if not service.all_ok:
                self._reply(409, {"error": "chain verification failed", "detail": service.verification})
                return
            allowed = self._authenticate()
            if allowed is None:
                self._reply(401, {"error": "authorization required"})
                return
            path = unquote(self.path.rstrip("/"))
            if path == "/verify":
                self._reply(200, {"verification": service.verification, "channels": allowed})
            elif path.startswith("/trace/"):
                entity_id = path[len("/trace/") :]
                try:
                    report = service.trace(entity_id, allowed)
                except IdParseError:
                    self._reply(404, {"error": f"malformed id {entity_id!r}"})
                    return
                if report is None:
                    self._reply(404, {"error": f"unknown entity {entity_id!r}"})
                else:
                    self._reply(200, report)
            elif path.startswith("/history/"):
                key = path[len("/history/") :]
                rows = service.history(key, allowed)
                if rows is None:
                    self._reply(404, {"error": f"no committed writes to {key!r}"})
                else:
                    self._reply(200, {"key": key, "history": rows})
            else:
                self._reply(404, {"error": "unknown endpoint"})

    return Handler


def serve(
    chains: dict[str, Chain],
    bind: str,
    key_directory: Optional[KeyDirectory] = None,
) -> ThreadingHTTPServer:
    """Bind and return the server; callers drive serve_forever()."""
    host, _, port = bind.rpartition(":")
    service = ChainQueryService.from_chains(chains, key_directory)
    server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), make_handler(service))
    server.service = service  # exposed for tests and callers
    return server
