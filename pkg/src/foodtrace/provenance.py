"""Hierarchical product identities and traceability queries.

Identity hierarchy: ANIMAL -> PACKAGE -> BATCH -> UNIT, with SHIPMENT
records hanging off any product entity. Serials come from on-chain
counters guarded by MVCC write conflicts, so duplicate ids are
structurally impossible. The provenance graph is a pure derivation of
committed entity records and can be rebuilt from chains at any time.

Three traceability regimes are supported: segregation (certified and
non-certified lines never mix), mass balance (mixing allowed, certified
output mass never exceeds certified input mass), and book-and-claim
(certified volume credits reconciled against claims).
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .codec import canonical_json, frac_from_str, frac_to_str

KINDS = ("ANIMAL", "PACKAGE", "BATCH", "UNIT", "SHIPMENT")
LABELS = ("traditional", "natural", "grass_fed", "organic")
CERTIFIED_LABEL = "organic"

SERIAL_PAD = 8

_ID_RE = re.compile(r"^(?P<org>[A-Z0-9_]+)-(?P<kind>[A-Z]+)-(?P<serial>\d{8,})$")


class ProvenanceError(Exception):
    pass


class UnknownEntityError(ProvenanceError):
    pass


class BadKindError(ProvenanceError):
    pass


class IdParseError(ProvenanceError):
    pass


class UnlabeledAnimalError(ProvenanceError):
    pass


class Relation(enum.Enum):
    DERIVED_FROM = "derived_from"
    COMPOSED_OF = "composed_of"
    SUBDIVIDED_FROM = "subdivided_from"


@dataclass(frozen=True, order=True)
class EntityId:
    org: str
    kind: str
    serial: int

    def render(self) -> str:
        return f"{self.org}-{self.kind}-{self.serial:0{SERIAL_PAD}d}"

    def __str__(self) -> str:
        return self.render()


def parse_entity_id(s: str) -> EntityId:
    m = _ID_RE.match(s)
    if not m or m.group("kind") not in KINDS:
        raise IdParseError(f"malformed entity id {s!r}")
    return EntityId(m.group("org"), m.group("kind"), int(m.group("serial")))


@dataclass(frozen=True)
class ProvenanceEdge:
    child: EntityId
    parents: frozenset[EntityId]
    relation: Relation
    block_number: int


@dataclass(frozen=True)
class LotQuantity:
    entity: EntityId
    certified_mass: Fraction

    def __post_init__(self):
        if self.certified_mass < 0:
            raise ProvenanceError("certified_mass must be non-negative")


# World-state key layout for entity records and serial counters.
def entity_key(entity: EntityId) -> str:
    return f"entity/{entity.render()}"


def counter_key(org: str, kind: str) -> str:
    return f"counter/{org}/{kind}"


def encode_entity_record(
    entity: EntityId,
    parents: Sequence[EntityId] = (),
    relation: Optional[Relation] = None,
    label: Optional[str] = None,
    claim: Optional[str] = None,
    mass: Optional[Fraction] = None,
    tag: Optional[str] = None,
    chaincode: Optional[tuple[str, int]] = None,
) -> bytes:
    record: dict = {
        "id": entity.render(),
        "kind": entity.kind,
        "parents": sorted(p.render() for p in parents),
        "relation": relation.value if relation else None,
    }
    if label is not None:
        record["label"] = label
    if claim is not None:
        record["claim"] = claim
    if mass is not None:
        record["mass"] = frac_to_str(mass)
    if tag is not None:
        record["tag"] = tag
    if chaincode is not None:
        record["chaincode"] = [chaincode[0], chaincode[1]]
    return canonical_json(record)


def decode_entity_record(value: bytes) -> dict:
    record = json.loads(value.decode("utf-8"))
    record["_parents"] = [parse_entity_id(p) for p in record.get("parents", [])]
    return record


@dataclass
class _Node:
    entity: EntityId
    parents: frozenset[EntityId]
    relation: Optional[Relation]
    block_number: int
    record: dict


class ProvenanceGraph:
    """Parent-linked DAG of entity records keyed by rendered id."""

    def __init__(self):
        self._nodes: dict[EntityId, _Node] = {}
        self._children: dict[EntityId, set[EntityId]] = {}

    def __contains__(self, entity: EntityId) -> bool:
        return entity in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def entities(self) -> list[EntityId]:
        return sorted(self._nodes)

    def add_record(self, value: bytes, block_number: int = 0) -> EntityId:
        record = decode_entity_record(value)
        entity = parse_entity_id(record["id"])
        parents = frozenset(record["_parents"])
        relation = Relation(record["relation"]) if record.get("relation") else None
        self._nodes[entity] = _Node(entity, parents, relation, block_number, record)
        for p in parents:
            self._children.setdefault(p, set()).add(entity)
        return entity

    def node(self, entity: EntityId) -> _Node:
        if entity not in self._nodes:
            raise UnknownEntityError(entity.render())
        return self._nodes[entity]

    def parents_of(self, entity: EntityId) -> frozenset[EntityId]:
        return self.node(entity).parents

    def children_of(self, entity: EntityId) -> set[EntityId]:
        return set(self._children.get(entity, ()))

    def edge_of(self, entity: EntityId) -> Optional[ProvenanceEdge]:
        node = self.node(entity)
        if not node.parents or node.relation is None:
            return None
        return ProvenanceEdge(entity, node.parents, node.relation, node.block_number)

    def label_of(self, entity: EntityId) -> Optional[str]:
        return self.node(entity).record.get("label")

    def claim_of(self, entity: EntityId) -> Optional[str]:
        node = self.node(entity)
        return node.record.get("claim", node.record.get("label"))

    def assert_acyclic(self) -> None:
        """Topological sort by Kahn's algorithm; raises on any cycle."""
        indeg = {e: len(self._nodes[e].parents & self._nodes.keys()) for e in self._nodes}
        queue = sorted(e for e, d in indeg.items() if d == 0)
        seen = 0
        while queue:
            entity = queue.pop()
            seen += 1
            for child in sorted(self._children.get(entity, ())):
                if child not in indeg:
                    continue
                indeg[child] -= 1
                if indeg[child] == 0:
                    queue.append(child)
        if seen != len(self._nodes):
            raise ProvenanceError("provenance graph contains a cycle")

    @classmethod
    def from_chains(cls, chains: Iterable[Sequence]) -> "ProvenanceGraph":
        """Rebuild from committed valid transactions across one or more chains."""
        graph = cls()
        for chain in chains:
            for block in chain:
                for tx, valid in zip(block.transactions, block.validity_flags):
                    if not valid:
                        continue
                    for key, value in tx.write_set:
                        if key.startswith("entity/"):
                            graph.add_record(value, block.header.number)
        return graph


class StateReader(Protocol):
    """Read oracle over a committed snapshot: returns (value, version)."""

    def get(self, key: str) -> tuple[Optional[bytes], int]: ...


class _DictReader:
    """Plain mapping adapter for tests and direct graph construction."""

    def __init__(self, entries: Mapping[str, tuple[bytes, int]]):
        self._entries = dict(entries)

    def get(self, key: str) -> tuple[Optional[bytes], int]:
        return self._entries.get(key, (None, 0))


def dict_reader(entries: Mapping[str, tuple[bytes, int]]) -> StateReader:
    return _DictReader(entries)


GenResult = tuple[list[EntityId], list[tuple[str, int]], list[tuple[str, bytes]]]


def read_counter(reader: StateReader, org: str, kind: str) -> tuple[int, tuple[str, int]]:
    key = counter_key(org, kind)
    value, version = reader.get(key)
    current = int.from_bytes(value, "big") if value else 0
    return current, (key, version)


def gen_package_ids(
    reader: StateReader,
    animal: EntityId,
    n: int,
    masses: Optional[Sequence[Fraction]] = None,
) -> GenResult:
    """n fresh PACKAGE ids subdivided from one animal, serials from the
    on-chain counter in a single read/write pair."""
    if n < 1:
        raise ProvenanceError("n must be >= 1")
    if animal.kind != "ANIMAL":
        raise BadKindError(f"{animal.render()} is not an ANIMAL")
    value, version = reader.get(entity_key(animal))
    if value is None:
        raise UnknownEntityError(animal.render())
    animal_record = decode_entity_record(value)
    claim = animal_record.get("label")
    if masses is not None and len(masses) != n:
        raise ProvenanceError("one mass per package required")

    current, counter_read = read_counter(reader, animal.org, "PACKAGE")
    reads = [(entity_key(animal), version), counter_read]
    ids = [EntityId(animal.org, "PACKAGE", current + i + 1) for i in range(n)]
    writes = [
        (
            entity_key(pkg),
            encode_entity_record(
                pkg,
                parents=[animal],
                relation=Relation.SUBDIVIDED_FROM,
                claim=claim,
                mass=masses[i] if masses else None,
            ),
        )
        for i, pkg in enumerate(ids)
    ]
    writes.append((counter_key(animal.org, "PACKAGE"), (current + n).to_bytes(8, "big")))
    return ids, reads, writes


def gen_batch_id(
    reader: StateReader,
    ingredients: Iterable[EntityId],
    org: str,
    certified_mass: Optional[Fraction] = None,
    claim: Optional[str] = None,
    manifest: Optional[Mapping[EntityId, dict]] = None,
) -> tuple[EntityId, list[tuple[str, int]], list[tuple[str, bytes]]]:
    """One fresh BATCH id composed of PACKAGE/BATCH ingredients.

    Ingredients shipped from another channel may be vouched for by a
    manifest (the record set carried with the product) instead of local
    state.
    """
    ingredients = sorted(set(ingredients))
    if not ingredients:
        raise BadKindError("a batch needs at least one ingredient")
    reads = []
    for ing in ingredients:
        if ing.kind not in ("PACKAGE", "BATCH"):
            raise BadKindError(f"{ing.render()} is not a PACKAGE or BATCH")
        value, version = reader.get(entity_key(ing))
        if value is not None:
            reads.append((entity_key(ing), version))
        elif manifest is None or ing not in manifest:
            raise UnknownEntityError(ing.render())

    current, counter_read = read_counter(reader, org, "BATCH")
    reads.append(counter_read)
    batch = EntityId(org, "BATCH", current + 1)
    writes = [
        (
            entity_key(batch),
            encode_entity_record(
                batch,
                parents=ingredients,
                relation=Relation.COMPOSED_OF,
                claim=claim,
                mass=certified_mass,
            ),
        ),
        (counter_key(org, "BATCH"), (current + 1).to_bytes(8, "big")),
    ]
    return batch, reads, writes


def gen_sub_ids(reader: StateReader, batch: EntityId, n: int) -> GenResult:
    """n consumer-scannable UNIT ids subdivided from one batch."""
    if n < 1:
        raise ProvenanceError("n must be >= 1")
    if batch.kind != "BATCH":
        raise BadKindError(f"{batch.render()} is not a BATCH")
    value, version = reader.get(entity_key(batch))
    if value is None:
        raise UnknownEntityError(batch.render())
    claim = decode_entity_record(value).get("claim")

    current, counter_read = read_counter(reader, batch.org, "UNIT")
    reads = [(entity_key(batch), version), counter_read]
    ids = [EntityId(batch.org, "UNIT", current + i + 1) for i in range(n)]
    writes = [
        (
            entity_key(unit),
            encode_entity_record(unit, parents=[batch], relation=Relation.SUBDIVIDED_FROM, claim=claim),
        )
        for unit in ids
    ]
    writes.append((counter_key(batch.org, "UNIT"), (current + n).to_bytes(8, "big")))
    return ids, reads, writes


@dataclass(frozen=True)
class TraceStep:
    entity: EntityId
    relation: Optional[Relation]
    block_number: int
    record: dict


@dataclass(frozen=True)
class TraceReport:
    subject: EntityId
    path: tuple[TraceStep, ...]
    complete: bool

    def to_dict(self) -> dict:
        return {
            "subject": self.subject.render(),
            "complete": self.complete,
            "path": [
                {
                    "id": step.entity.render(),
                    "relation": step.relation.value if step.relation else None,
                    "block": step.block_number,
                    "record": {k: v for k, v in step.record.items() if not k.startswith("_")},
                }
                for step in self.path
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def trace_back(subject: EntityId, graph: ProvenanceGraph) -> TraceReport:
    """Ancestry breadth-first from the subject, deduplicated, ordered by
    (depth, block_number, id); complete iff every leaf is an ANIMAL."""
    if subject not in graph:
        raise UnknownEntityError(subject.render())
    depth = {subject: 0}
    frontier = [subject]
    while frontier:
        nxt = []
        for entity in frontier:
            for parent in graph.parents_of(entity):
                if parent in graph and parent not in depth:
                    depth[parent] = depth[entity] + 1
                    nxt.append(parent)
        frontier = nxt

    ordered = sorted(depth, key=lambda e: (depth[e], graph.node(e).block_number, e))
    steps = tuple(
        TraceStep(e, graph.node(e).relation, graph.node(e).block_number, graph.node(e).record)
        for e in ordered
    )
    complete = all(
        graph.node(e).entity.kind == "ANIMAL"
        for e in depth
        if not (graph.parents_of(e) & depth.keys())
    )
    return TraceReport(subject, steps, complete)


def trace_forward(animal: EntityId, graph: ProvenanceGraph) -> set[EntityId]:
    """All descendants reachable by reversed edges (the recall set)."""
    if animal not in graph:
        raise UnknownEntityError(animal.render())
    seen: set[EntityId] = set()
    frontier = [animal]
    while frontier:
        entity = frontier.pop()
        for child in graph.children_of(entity):
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return seen


@dataclass(frozen=True)
class SegregationViolation:
    entity: EntityId
    tainted_ancestors: tuple[EntityId, ...]


def check_segregation(
    graph: ProvenanceGraph,
    labels: Optional[Mapping[EntityId, str]] = None,
) -> list[SegregationViolation]:
    """Every certified-channel entity must have all-certified animal ancestry.

    labels overrides/augments on-chain labels: animals map to their
    production label, derived entities to the channel they are claimed
    into. Entities with no certified claim are not checked.
    """
    labels = dict(labels or {})

    def label_of(entity: EntityId) -> Optional[str]:
        if entity in labels:
            return labels[entity]
        return graph.claim_of(entity)

    violations = []
    for entity in graph.entities():
        if entity.kind == "ANIMAL":
            if label_of(entity) is None:
                raise UnlabeledAnimalError(entity.render())
            continue
        if label_of(entity) != CERTIFIED_LABEL:
            continue
        tainted = sorted(
            ancestor
            for ancestor in _ancestors(graph, entity)
            if ancestor.kind == "ANIMAL" and label_of(ancestor) != CERTIFIED_LABEL
        )
        if tainted:
            violations.append(SegregationViolation(entity, tuple(tainted)))
    return violations


def _ancestors(graph: ProvenanceGraph, entity: EntityId) -> set[EntityId]:
    seen: set[EntityId] = set()
    frontier = [entity]
    while frontier:
        current = frontier.pop()
        for parent in graph.parents_of(current):
            if parent in graph and parent not in seen:
                seen.add(parent)
                frontier.append(parent)
    return seen


@dataclass(frozen=True)
class MassBalanceResult:
    ok: bool
    certified_in: Fraction
    certified_out: Fraction

    @property
    def excess(self) -> Fraction:
        return max(Fraction(0), self.certified_out - self.certified_in)


def check_mass_balance(
    node: EntityId,
    inputs: Iterable[LotQuantity],
    outputs: Iterable[LotQuantity],
) -> MassBalanceResult:
    """ok iff certified output mass <= certified input mass, exactly."""
    certified_in = sum((lot.certified_mass for lot in inputs), Fraction(0))
    certified_out = sum((lot.certified_mass for lot in outputs), Fraction(0))
    return MassBalanceResult(certified_out <= certified_in, certified_in, certified_out)


@dataclass(frozen=True)
class BookClaimResult:
    remaining: Optional[Fraction] = None
    over_claim_index: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.over_claim_index is None


def book_and_claim_reconcile(
    produced_credits: Fraction,
    claimed: Sequence[Fraction],
) -> BookClaimResult:
    """Walk claims against the credit pool; flag the first claim that exhausts it."""
    if produced_credits < 0 or any(c < 0 for c in claimed):
        raise ProvenanceError("credits and claims must be non-negative")
    pool = produced_credits
    for index, claim in enumerate(claimed):
        pool -= claim
        if pool < 0:
            return BookClaimResult(over_claim_index=index)
    return BookClaimResult(remaining=pool)
