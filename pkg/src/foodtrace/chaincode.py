"""Deterministic contract engine: install, simulate, endorse, upgrade.

Contracts are built-in registered functions over a read oracle, not
loaded code: simulation runs against an immutable committed snapshot,
records every read as (key, version), and buffers writes. Endorsement
compares response digests across peers and checks the signer set against
the channel endorsement policy; conflicts surface later through MVCC
validation at commit.

Built-ins and their single JSON argument:
  register_asset  {"org", "label", "tag"?, "mass"?}          -> animal id
  package         {"animal", "n", "masses"?: ["p/q", ...]}   -> package ids
  produce_batch   {"org", "ingredients": [id, ...], "certified_mass"?,
                   "claim"?, "manifest"?: {id: record}}      -> batch id
  ship            {"subject", "from", "to",
                   "chaincode": [name, version]}             -> shipment id + manifest
  trace           {"subject"}                                -> ancestry report (read-only)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .codec import canonical_json, frac_from_str, frac_to_str, lp, sha256, text, u32, u64
from .consortium import CONFIG_KEY, ChannelConfig, Consortium, Policy
from .identity import Certificate, Identity, ValidationResult, validate_certificate, verify_digest
from .ledger import WorldState
from . import provenance as prov


class ChaincodeError(Exception):
    pass


class NotMemberError(ChaincodeError):
    pass


class StaleVersionError(ChaincodeError):
    pass


class VersionGapError(ChaincodeError):
    pass


class UnknownFunctionError(ChaincodeError):
    pass


class ContractAbort(ChaincodeError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DigestMismatchError(ChaincodeError):
    pass


class EndorsementPolicyError(ChaincodeError):
    pass


@dataclass(frozen=True)
class ChaincodeId:
    name: str
    version: int


# transition(args, oracle) -> (write_set, result); reads go through the oracle
Transition = Callable[[Sequence[bytes], "ReadOracle"], tuple[list[tuple[str, bytes]], bytes]]


@dataclass(frozen=True)
class ContractFunction:
    name: str
    transition: Transition


@dataclass(frozen=True)
class ChaincodeDef:
    id: ChaincodeId
    functions: Mapping[str, ContractFunction]


class ReadOracle:
    """Snapshot-isolated reads with (key, version) recording."""

    def __init__(self, snapshot: WorldState):
        self._snapshot = snapshot
        self._reads: dict[str, int] = {}

    def get(self, key: str) -> tuple[Optional[bytes], int]:
        entry = self._snapshot.get(key)
        version = entry.version if entry else 0
        self._reads.setdefault(key, version)
        return (entry.value if entry else None, version)

    def read_set(self) -> tuple[tuple[str, int], ...]:
        return tuple(sorted(self._reads.items()))


@dataclass
class Peer:
    peer_id: str
    identity: Identity
    installed: dict[tuple[str, str], dict[int, ChaincodeDef]] = field(default_factory=dict)
    active: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def org(self) -> str:
        return self.identity.org


def install(peer: Peer, channel_config: ChannelConfig, chaincode: ChaincodeDef) -> None:
    """Record the chaincode on the peer; newest version becomes active."""
    if peer.org not in channel_config.member_orgs:
        raise NotMemberError(f"{peer.org} is not a member of {channel_config.name}")
    key = (channel_config.name, chaincode.id.name)
    versions = peer.installed.setdefault(key, {})
    if versions and chaincode.id.version <= max(versions):
        raise StaleVersionError(
            f"{chaincode.id.name} v{chaincode.id.version} <= installed v{max(versions)}"
        )
    versions[chaincode.id.version] = chaincode
    peer.active[key] = chaincode.id.version


def upgrade(
    peers: Iterable[Peer],
    channel_config: ChannelConfig,
    chaincode: ChaincodeDef,
    signatures: Iterable[tuple[str, int]],
    consortium: Consortium,
) -> None:
    """Channel-governed version bump: admin policy plus no version gaps."""
    from .consortium import evaluate_policy, PolicyUnsatisfiedError

    if not evaluate_policy(channel_config.admin_policy, signatures, consortium):
        raise PolicyUnsatisfiedError("channel admin policy not satisfied")
    peers = list(peers)
    key = (channel_config.name, chaincode.id.name)
    current = max((p.active.get(key, 0) for p in peers), default=0)
    if chaincode.id.version != current + 1:
        raise VersionGapError(f"expected v{current + 1}, got v{chaincode.id.version}")
    for peer in peers:
        install(peer, channel_config, chaincode)


def rw_digest(
    read_set: Sequence[tuple[str, int]],
    write_set: Sequence[tuple[str, bytes]],
    result: bytes,
) -> bytes:
    out = [u32(len(read_set))]
    for key, version in read_set:
        out.append(text(key))
        out.append(u64(version))
    out.append(u32(len(write_set)))
    for key, value in write_set:
        out.append(text(key))
        out.append(lp(value))
    out.append(lp(result))
    return sha256(b"".join(out))


@dataclass(frozen=True)
class ProposalResponse:
    chaincode: ChaincodeId
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    result: bytes
    peer_id: str
    endorser: Certificate
    response_digest: bytes
    signature: bytes


def simulate(
    peer: Peer,
    channel_name: str,
    chaincode_name: str,
    function: str,
    args: Sequence[bytes],
    snapshot: WorldState,
    version: Optional[int] = None,
) -> ProposalResponse:
    """Run the transition against the snapshot; never mutates it.

    An explicit version pins historical behavior (e.g. trace reads across
    a batch boundary); otherwise the peer's active version answers.
    """
    key = (channel_name, chaincode_name)
    versions = peer.installed.get(key, {})
    resolved = version if version is not None else peer.active.get(key)
    if resolved is None or resolved not in versions:
        raise ChaincodeError(f"{chaincode_name} v{resolved} not installed on {peer.peer_id}")
    contract = versions[resolved].functions.get(function)
    if contract is None:
        raise UnknownFunctionError(f"{chaincode_name} has no function {function!r}")

    oracle = ReadOracle(snapshot)
    write_set, result = contract.transition(args, oracle)
    read_set = oracle.read_set()
    writes = tuple(write_set)
    digest = rw_digest(read_set, writes, result)
    return ProposalResponse(
        chaincode=ChaincodeId(chaincode_name, resolved),
        read_set=read_set,
        write_set=writes,
        result=result,
        peer_id=peer.peer_id,
        endorser=peer.identity.cert,
        response_digest=digest,
        signature=peer.identity.sign(digest),
    )


@dataclass(frozen=True)
class EndorsedProposal:
    chaincode: ChaincodeId
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    result: bytes
    endorsers: tuple[tuple[str, int], ...]


def endorse(
    responses: Sequence[ProposalResponse],
    policy: Policy,
    consortium: Consortium,
    now: int = 0,
) -> EndorsedProposal:
    """All digests must agree and valid endorsing orgs must satisfy the policy."""
    if not responses:
        raise EndorsementPolicyError("no responses")
    first = responses[0]
    for resp in responses:
        recomputed = rw_digest(resp.read_set, resp.write_set, resp.result)
        if recomputed != resp.response_digest or resp.response_digest != first.response_digest:
            raise DigestMismatchError("peers disagree on simulation results")

    endorsing_orgs = set()
    endorsers = []
    for resp in responses:
        cert = resp.endorser
        msp = consortium.msps.get(cert.subject.org_id)
        if msp is None or validate_certificate(cert, msp, now) is not ValidationResult.OK:
            continue
        if not verify_digest(cert.subject.public_key, resp.signature, resp.response_digest):
            continue
        if cert.subject.org_id in policy.scope_orgs:
            endorsing_orgs.add(cert.subject.org_id)
            endorsers.append((cert.subject.org_id, cert.serial))
    if len(endorsing_orgs) < policy.required():
        raise EndorsementPolicyError(
            f"{len(endorsing_orgs)} endorsing orgs < required {policy.required()}"
        )
    return EndorsedProposal(
        first.chaincode,
        first.read_set,
        first.write_set,
        first.result,
        tuple(sorted(endorsers)),
    )


# -- built-in contracts -------------------------------------------------------


def _arg_obj(args: Sequence[bytes]) -> dict:
    if len(args) != 1:
        raise ContractAbort("expected exactly one JSON argument")
    try:
        obj = json.loads(args[0].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ContractAbort(f"bad argument encoding: {exc}") from exc
    if not isinstance(obj, dict):
        raise ContractAbort("argument must be a JSON object")
    return obj


def _channel_model(oracle: ReadOracle) -> str:
    value, _ = oracle.get(CONFIG_KEY)
    if value is None:
        return "segregation"
    return ChannelConfig.decode(value).traceability_model


def _register_asset(args: Sequence[bytes], oracle: ReadOracle):
    obj = _arg_obj(args)
    org, label = obj["org"], obj["label"]
    if label not in prov.LABELS:
        raise ContractAbort(f"unknown label {label!r}")
    current, _ = prov.read_counter(oracle, org, "ANIMAL")
    animal = prov.EntityId(org, "ANIMAL", current + 1)
    mass = frac_from_str(obj["mass"]) if "mass" in obj else None
    writes = [
        (prov.entity_key(animal), prov.encode_entity_record(animal, label=label, mass=mass, tag=obj.get("tag"))),
        (prov.counter_key(org, "ANIMAL"), (current + 1).to_bytes(8, "big")),
    ]
    if "tag" in obj:
        writes.append((f"tag/{obj['tag']}", animal.render().encode()))
    return writes, animal.render().encode()


def _package(args: Sequence[bytes], oracle: ReadOracle):
    obj = _arg_obj(args)
    animal = prov.parse_entity_id(obj["animal"])
    masses = [frac_from_str(m) for m in obj["masses"]] if "masses" in obj else None
    try:
        ids, _, writes = prov.gen_package_ids(oracle, animal, int(obj["n"]), masses)
    except prov.ProvenanceError as exc:
        raise ContractAbort(str(exc)) from exc
    return writes, canonical_json([e.render() for e in ids])


def _lot_mass(record: dict) -> tuple[str, Fraction]:
    claim = record.get("claim", record.get("label"))
    mass = frac_from_str(record["mass"]) if record.get("mass") else Fraction(0)
    return claim, mass


def _produce_batch(args: Sequence[bytes], oracle: ReadOracle):
    obj = _arg_obj(args)
    org = obj["org"]
    claim = obj.get("claim")
    certified_mass = frac_from_str(obj["certified_mass"]) if obj.get("certified_mass") else Fraction(0)
    ingredients = [prov.parse_entity_id(i) for i in obj["ingredients"]]
    manifest_raw = obj.get("manifest", {})
    manifest = {prov.parse_entity_id(k): v for k, v in manifest_raw.items()}
    model = _channel_model(oracle)

    # Ingredient records come from local state, or from the manifest that
    # travelled with the shipment.
    records = {}
    for ing in ingredients:
        value, _ = oracle.get(prov.entity_key(ing))
        if value is not None:
            records[ing] = prov.decode_entity_record(value)
        elif ing in manifest:
            records[ing] = manifest[ing]
        else:
            raise ContractAbort(f"unknown ingredient {ing.render()}")

    certified = prov.CERTIFIED_LABEL
    inputs = [
        prov.LotQuantity(ing, mass if lot_claim == certified else Fraction(0))
        for ing, (lot_claim, mass) in ((i, _lot_mass(r)) for i, r in records.items())
    ]
    extra_writes: list[tuple[str, bytes]] = []
    if claim == certified:
        if model == "segregation":
            tainted = sorted(
                i.render() for i, r in records.items() if _lot_mass(r)[0] != certified
            )
            if tainted:
                raise ContractAbort(f"segregation violated by {', '.join(tainted)}")
        elif model == "mass_balance":
            batch_probe = prov.EntityId(org, "BATCH", 0)
            outcome = prov.check_mass_balance(
                batch_probe, inputs, [prov.LotQuantity(batch_probe, certified_mass)]
            )
            if not outcome.ok:
                raise ContractAbort(
                    f"mass balance violated: out {frac_to_str(outcome.certified_out)}"
                    f" > in {frac_to_str(outcome.certified_in)}"
                )
        elif model == "book_and_claim":
            pool_key = f"credits/{org}"
            value, _ = oracle.get(pool_key)
            pool = frac_from_str(value.decode()) if value else Fraction(0)
            pool += sum((lot.certified_mass for lot in inputs), Fraction(0))
            outcome = prov.book_and_claim_reconcile(pool, [certified_mass])
            if not outcome.ok:
                raise ContractAbort(f"credit pool exhausted: {frac_to_str(certified_mass)} claimed")
            extra_writes.append((pool_key, frac_to_str(outcome.remaining).encode()))

    try:
        batch, _, writes = prov.gen_batch_id(oracle, ingredients, org, certified_mass, claim, manifest)
    except prov.ProvenanceError as exc:
        raise ContractAbort(str(exc)) from exc

    # Consumer-scannable sub ids are minted with the batch they belong to.
    n_units = int(obj.get("units", 0))
    unit_ids = []
    if n_units > 0:
        current, _ = prov.read_counter(oracle, org, "UNIT")
        unit_ids = [prov.EntityId(org, "UNIT", current + i + 1) for i in range(n_units)]
        for unit in unit_ids:
            writes.append(
                (
                    prov.entity_key(unit),
                    prov.encode_entity_record(
                        unit, parents=[batch], relation=prov.Relation.SUBDIVIDED_FROM, claim=claim
                    ),
                )
            )
        writes.append((prov.counter_key(org, "UNIT"), (current + n_units).to_bytes(8, "big")))
    writes.extend(extra_writes)
    result = canonical_json({"batch": batch.render(), "units": [u.render() for u in unit_ids]})
    return writes, result


def _ship(args: Sequence[bytes], oracle: ReadOracle):
    obj = _arg_obj(args)
    rendered = obj.get("subjects") or [obj["subject"]]
    subjects = [prov.parse_entity_id(s) for s in rendered]
    records = {}
    for subject in subjects:
        value, _ = oracle.get(prov.entity_key(subject))
        if value is None:
            raise ContractAbort(f"unknown entity {subject.render()}")
        records[subject] = json.loads(value.decode("utf-8"))
    cc_name, cc_version = obj["chaincode"]
    src_org = obj["from"]

    lead = records[subjects[0]]
    current, _ = prov.read_counter(oracle, src_org, "SHIPMENT")
    shipment = prov.EntityId(src_org, "SHIPMENT", current + 1)
    shipment_record = prov.encode_entity_record(
        shipment,
        parents=subjects,
        relation=prov.Relation.DERIVED_FROM,
        claim=lead.get("claim", lead.get("label")),
        chaincode=(cc_name, int(cc_version)),
    )
    writes = [
        (prov.entity_key(shipment), shipment_record),
        (prov.counter_key(src_org, "SHIPMENT"), (current + 1).to_bytes(8, "big")),
    ]
    # The manifest travels with the product: the receiver uses the chaincode
    # handle to read the sender's data, and these records to validate inputs.
    result = canonical_json(
        {
            "shipment": shipment.render(),
            "to": obj["to"],
            "chaincode": [cc_name, int(cc_version)],
            "manifest": {s.render(): records[s] for s in subjects},
        }
    )
    return writes, result


def _trace(args: Sequence[bytes], oracle: ReadOracle):
    obj = _arg_obj(args)
    subject = prov.parse_entity_id(obj["subject"])
    value, _ = oracle.get(prov.entity_key(subject))
    if value is None:
        raise ContractAbort(f"unknown entity {subject.render()}")

    # Breadth-first ancestry over state records; read-only by construction.
    seen = {subject: json.loads(value.decode("utf-8"))}
    frontier = [subject]
    order = [subject]
    while frontier:
        nxt = []
        for entity in frontier:
            for parent_str in seen[entity].get("parents", []):
                parent = prov.parse_entity_id(parent_str)
                if parent in seen:
                    continue
                pvalue, _ = oracle.get(prov.entity_key(parent))
                if pvalue is None:
                    continue
                seen[parent] = json.loads(pvalue.decode("utf-8"))
                nxt.append(parent)
                order.append(parent)
        frontier = nxt
    complete = all(
        record["kind"] == "ANIMAL"
        for entity, record in seen.items()
        if not any(prov.parse_entity_id(p) in seen for p in record.get("parents", []))
    )
    report = {
        "subject": subject.render(),
        "complete": complete,
        "path": [seen[e]["id"] for e in order],
    }
    return [], canonical_json(report)


def builtin_contracts(name: str = "supplychain", version: int = 1) -> ChaincodeDef:
    functions = {
        fn.name: fn
        for fn in (
            ContractFunction("register_asset", _register_asset),
            ContractFunction("package", _package),
            ContractFunction("produce_batch", _produce_batch),
            ContractFunction("ship", _ship),
            ContractFunction("trace", _trace),
        )
    }
    return ChaincodeDef(ChaincodeId(name, version), functions)
