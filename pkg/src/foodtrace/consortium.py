"""Consortium, channel, and policy management.

Channel governance is on-chain: block 0 carries the channel config as its
sole transaction and every config update is a committed transaction, so
the same tamper-evidence machinery audits governance. Authorization is
deny-by-default.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .codec import canonical_json
from .identity import Certificate, OrgMsp, ValidationResult, validate_certificate
from .ledger import Block, Chain, Transaction, WorldState, commit_block, make_block, make_transaction

CONFIG_KEY = "_config/channel"
CONFIG_CHAINCODE = ("_config", 1)

TRACEABILITY_MODELS = ("segregation", "mass_balance", "book_and_claim")


class ConsortiumError(Exception):
    pass


class PolicyUnsatisfiedError(ConsortiumError):
    pass


class DuplicateNameError(ConsortiumError):
    pass


class PolicyKind(enum.Enum):
    MAJORITY_OF_ADMINS = "majority_of_admins"
    N_OF = "n_of"
    ANY_ADMIN = "any_admin"


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    scope_orgs: frozenset[str]
    threshold: int = 0

    def __post_init__(self):
        if self.kind is PolicyKind.N_OF and not 0 < self.threshold <= len(self.scope_orgs):
            raise ConsortiumError("n_of threshold must be within 1..|scope_orgs|")

    def required(self) -> int:
        if self.kind is PolicyKind.MAJORITY_OF_ADMINS:
            return len(self.scope_orgs) // 2 + 1
        if self.kind is PolicyKind.N_OF:
            return self.threshold
        return 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "scope_orgs": sorted(self.scope_orgs),
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(PolicyKind(d["kind"]), frozenset(d["scope_orgs"]), d.get("threshold", 0))


def majority(scope_orgs: Iterable[str]) -> Policy:
    return Policy(PolicyKind.MAJORITY_OF_ADMINS, frozenset(scope_orgs))


def n_of(threshold: int, scope_orgs: Iterable[str]) -> Policy:
    return Policy(PolicyKind.N_OF, frozenset(scope_orgs), threshold)


def any_admin(scope_orgs: Iterable[str]) -> Policy:
    return Policy(PolicyKind.ANY_ADMIN, frozenset(scope_orgs))


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    member_orgs: frozenset[str]
    admin_policy: Policy
    endorsement_policy: Policy
    traceability_model: str = "segregation"

    def __post_init__(self):
        if self.traceability_model not in TRACEABILITY_MODELS:
            raise ConsortiumError(f"unknown traceability model {self.traceability_model!r}")

    def encode(self) -> bytes:
        return canonical_json(
            {
                "name": self.name,
                "member_orgs": sorted(self.member_orgs),
                "admin_policy": self.admin_policy.to_dict(),
                "endorsement_policy": self.endorsement_policy.to_dict(),
                "traceability_model": self.traceability_model,
            }
        )

    @classmethod
    def decode(cls, data: bytes) -> "ChannelConfig":
        d = json.loads(data.decode("utf-8"))
        return cls(
            d["name"],
            frozenset(d["member_orgs"]),
            Policy.from_dict(d["admin_policy"]),
            Policy.from_dict(d["endorsement_policy"]),
            d["traceability_model"],
        )


class Channel:
    """A membership-scoped ledger: config, block chain, and world state.

    Evolves only through apply_committed_block on the ordering commit path.
    """

    def __init__(self, config: ChannelConfig, chain: Chain, state: WorldState):
        self.config = config
        self.chain = chain
        self.state = state

    @property
    def name(self) -> str:
        return self.config.name

    def apply_committed_block(self, block: Block) -> Block:
        """Append and apply one ordered block; pick up valid config updates."""
        self.chain, self.state, committed = commit_block(self.chain, self.state, block)
        for tx, valid in zip(committed.transactions, committed.validity_flags):
            if valid and tx.chaincode[0] == CONFIG_CHAINCODE[0] and tx.args:
                self.config = ChannelConfig.decode(tx.args[0])
        return committed


class Consortium:
    def __init__(self, msps: dict[str, OrgMsp], admin_policy: Optional[Policy] = None):
        self.msps = dict(msps)
        self.admin_policy = admin_policy or majority(self.msps)
        self.channels: dict[str, Channel] = {}

    @property
    def orgs(self) -> set[str]:
        return set(self.msps)


def evaluate_policy(
    policy: Policy,
    signatures: Iterable[tuple[str, int]],
    consortium: Consortium,
) -> bool:
    """True iff distinct scope orgs with valid, unrevoked admin serials meet the policy."""
    signed_orgs = set()
    for org_id, serial in signatures:
        if org_id not in policy.scope_orgs:
            continue
        msp = consortium.msps.get(org_id)
        if msp is None:
            continue
        if serial in msp.admins and serial not in msp.revoked:
            signed_orgs.add(org_id)
    return len(signed_orgs) >= policy.required()


def make_config_transaction(
    config: ChannelConfig,
    consortium: Consortium,
    signatures: Iterable[tuple[str, int]],
    function: str,
    timestamp: int,
    expected_version: int,
) -> Transaction:
    """Config tx signed by the MSP root of the first signing org (sorted)."""
    signer_orgs = sorted({org for org, _ in signatures if org in consortium.msps}) or sorted(consortium.msps)
    submitter = consortium.msps[signer_orgs[0]].root_identity()
    args = [config.encode()]
    for org in sorted(config.member_orgs):
        msp = consortium.msps.get(org)
        if msp is not None:
            args.append(msp.root_cert.encode())
    return make_transaction(
        channel=config.name,
        chaincode=CONFIG_CHAINCODE,
        function=function,
        args=args,
        read_set=[(CONFIG_KEY, expected_version)],
        write_set=[(CONFIG_KEY, config.encode())],
        submitter=submitter,
        timestamp=timestamp,
    )


def create_channel(
    consortium: Consortium,
    config: ChannelConfig,
    signatures: Iterable[tuple[str, int]],
    now: int = 0,
) -> Channel:
    signatures = list(signatures)
    if not evaluate_policy(consortium.admin_policy, signatures, consortium):
        raise PolicyUnsatisfiedError("consortium admin policy not satisfied")
    if config.name in consortium.channels:
        raise DuplicateNameError(config.name)
    if not config.member_orgs <= consortium.orgs:
        raise ConsortiumError("member_orgs must be consortium orgs")
    genesis_tx = make_config_transaction(config, consortium, signatures, "create_channel", now, 0)
    genesis = make_block(0, b"\x00" * 32, [genesis_tx])
    channel = Channel(config, (), WorldState())
    channel.apply_committed_block(genesis)
    consortium.channels[config.name] = channel
    return channel


def make_config_update_transaction(
    channel: Channel,
    new_config: ChannelConfig,
    signatures: Iterable[tuple[str, int]],
    consortium: Consortium,
    now: int = 0,
) -> Transaction:
    """Authorize a config change under the channel's own admin policy."""
    signatures = list(signatures)
    if not evaluate_policy(channel.config.admin_policy, signatures, consortium):
        raise PolicyUnsatisfiedError("channel admin policy not satisfied")
    if new_config.name != channel.name:
        raise ConsortiumError("config update cannot rename the channel")
    version = channel.state.version_of(CONFIG_KEY)
    return make_config_transaction(new_config, consortium, signatures, "update_channel_config", now, version)


def update_channel_config(
    channel: Channel,
    new_config: ChannelConfig,
    signatures: Iterable[tuple[str, int]],
    consortium: Consortium,
    now: int = 0,
) -> Channel:
    """Direct-commit convenience for tests and single-node use; the simulator
    routes the same transaction through the ordering service instead."""
    tx = make_config_update_transaction(channel, new_config, signatures, consortium, now)
    from .ledger import chain_tip_hash

    block = make_block(len(channel.chain), chain_tip_hash(channel.chain), [tx])
    channel.apply_committed_block(block)
    return channel


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[str] = None  # not_member | invalid_cert


def authorize(
    channel: Channel,
    cert: Certificate,
    action: str,
    consortium: Consortium,
    now: int,
) -> Decision:
    """Allow iff the cert validates against its org MSP and the org is a member."""
    if action not in ("read", "write"):
        raise ConsortiumError(f"unknown action {action!r}")
    org = cert.subject.org_id
    if org not in channel.config.member_orgs:
        return Decision(False, "not_member")
    msp = consortium.msps.get(org)
    if msp is None:
        return Decision(False, "not_member")
    if validate_certificate(cert, msp, now) is not ValidationResult.OK:
        return Decision(False, "invalid_cert")
    return Decision(True)


def config_history(channel: Channel) -> list[ChannelConfig]:
    """All committed configs, genesis first, reconstructed from the chain."""
    from .ledger import get_history

    return [ChannelConfig.decode(value) for _, _, value in get_history(channel.chain, CONFIG_KEY)]
