"""Deterministic discrete-event simulation of the whole network.

One logical millisecond clock drives everything: IoT events enter org
staging stores, flushes and client invocations produce endorsed
transactions, the ordering cluster batches and replicates them, and
committed blocks land on channel ledgers. Seeded randomness is used only
for workload generation (labels, masses, event jitter); every protocol
decision is deterministic, so equal configs and seeds give byte-identical
chains.

The generated workload follows the farm-to-fork story: animals are
registered with certification labels and RFID tags, telemetry is staged
and flushed at a fixed frequency, animals are packaged, packages are
shipped to the manufacturer with their record manifest and chaincode
handle, batches (with fresh contract versions) and consumer units are
produced on the market channel, and units ship onward to the distributor.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

from . import chaincode as cc
from . import ingestion as ing
from .codec import canonical_json, frac_to_str
from .consortium import (
    Channel,
    ChannelConfig,
    Consortium,
    create_channel,
    majority,
)
from .identity import Identity, OrgMsp, PrincipalInfo, issue_certificate, new_signing_key, public_bytes, register_principal
from .ledger import KeyDirectory, Transaction, hash_block, make_transaction, verify_chain
from .ordering import NotLeaderError, OrderingCluster, parse_fault_schedule
from .provenance import EntityId, ProvenanceGraph, check_segregation, parse_entity_id
from .scenario import ScenarioConfig, parse_policy

RESUBMIT_INTERVAL_MS = 200
CHAINCODE_NAME = "supplychain"


@dataclass
class ChannelReport:
    blocks: int = 0
    tx_valid: int = 0
    tx_invalid: int = 0

    def to_dict(self) -> dict:
        return {"blocks": self.blocks, "tx_valid": self.tx_valid, "tx_invalid": self.tx_invalid}


@dataclass
class RunReport:
    channels: dict[str, ChannelReport]
    violations: list[str]
    verification: str
    elapsed_ms: int
    entities: dict[str, int]
    aborted_invocations: int

    def to_dict(self) -> dict:
        return {
            "channels": {name: rep.to_dict() for name, rep in sorted(self.channels.items())},
            "violations": self.violations,
            "verification": self.verification,
            "elapsed_ms": self.elapsed_ms,
            "entities": dict(sorted(self.entities.items())),
            "aborted_invocations": self.aborted_invocations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass(order=True)
class _Event:
    time: int
    seq: int
    action: Callable[[], None] = field(compare=False)


@dataclass
class _Goal:
    """One unit of workload intent, retried until a valid commit lands."""

    key: str
    counter: Optional[str]  # serializes goals contending on one on-chain counter
    run: Callable[[], Optional[Transaction]]
    on_commit: Callable[[Transaction], None]
    tx_id: Optional[bytes] = None
    done: bool = False


class Simulation:
    def __init__(self, config: ScenarioConfig, base_dir: Optional[Path] = None):
        config.validate(base_dir)
        self.config = config
        self.base_dir = base_dir or Path.cwd()
        self.rng = random.Random(config.seed)
        self.now = 0
        self._seq = 0
        self._events: list[_Event] = []
        self.aborts = 0

        seed_bytes = config.seed.to_bytes(8, "big")
        self.msps = {
            org.org_id: OrgMsp.create(org.org_id, b"root:" + seed_bytes + org.org_id.encode())
            for org in config.orgs
        }
        self.consortium = Consortium(
            self.msps, parse_policy(config.consortium_admin_policy, tuple(sorted(self.msps)))
        )
        self.admins: dict[str, Identity] = {}
        self.clients: dict[str, Identity] = {}
        self.peers: dict[str, list[cc.Peer]] = {}
        for org in config.orgs:
            self.admins[org.org_id] = self._enroll(org.org_id, "admin0", "admin")
            self.clients[org.org_id] = self._enroll(org.org_id, "client0", "client")
            self.peers[org.org_id] = [
                cc.Peer(f"{org.org_id.lower()}-peer{i}", self._enroll(org.org_id, f"peer{i}", "peer"))
                for i in range(org.peers)
            ]

        self.channels: dict[str, Channel] = {}
        self.cluster = OrderingCluster(config.ordering, now=0)
        for spec in config.channels:
            cfg = ChannelConfig(
                name=spec.name,
                member_orgs=frozenset(spec.members),
                admin_policy=parse_policy(spec.admin_policy, spec.members),
                endorsement_policy=parse_policy(spec.endorsement_policy, spec.members),
                traceability_model=spec.traceability_model,
            )
            sigs = {(org, self.admins[org].serial) for org in self.msps}
            channel = create_channel(self.consortium, cfg, sigs, now=0)
            self.channels[spec.name] = channel
            self.cluster.register_channel(spec.name, 1, hash_block(channel.chain[0].header))
            for org in spec.members:
                for peer in self.peers[org]:
                    cc.install(peer, channel.config, cc.builtin_contracts(CHAINCODE_NAME, 1))
        self.cluster.elect_leader(now=0)

        self.stores = {org.org_id: ing.StagingStore(org.org_id) for org in config.orgs}
        self.known_tags: dict[str, EntityId] = {}
        self._ranges = {m: (lo, hi) for m, lo, hi in config.ingestion.ranges}

        self._outstanding: dict[bytes, Transaction] = {}
        self._goals: list[_Goal] = []
        self._goal_keys: set[str] = set()
        self._batch_versions: dict[str, int] = {}  # rendered batch id -> contract version
        self._committed_entities: dict[tuple[str, str], list[EntityId]] = {}  # (channel, kind)

        # Workload bookkeeping, advanced only by committed state.
        wl = config.workload
        self._animals: dict[EntityId, str] = {}  # committed animal -> label
        self._packaged: set[EntityId] = set()
        self._shipped_packages: set[EntityId] = set()
        self._mfg_inbox: list[dict] = []  # delivered manifests
        self._batched_groups = 0
        self._unit_ships = 0
        self._next_contract_version = {name: 1 for name in self.channels}

        self._schedule_setup_events()

    # -- identity plumbing ---------------------------------------------------

    def _enroll(self, org: str, cn: str, role: str) -> Identity:
        key = new_signing_key(
            b"principal:" + self.config.seed.to_bytes(8, "big") + org.encode() + cn.encode()
        )
        info = PrincipalInfo(cn, org, role, public_bytes(key))
        cert = issue_certificate(self.msps[org], register_principal(self.msps[org], info), now=0)
        return Identity(cert, key)

    def key_directory(self) -> KeyDirectory:
        directory: dict[tuple[str, int], bytes] = {}
        for org, msp in self.msps.items():
            directory[(org, 0)] = msp.root_public_key
        for ident in list(self.admins.values()) + list(self.clients.values()):
            directory[(ident.org, ident.serial)] = ident.cert.subject.public_key
        for peers in self.peers.values():
            for peer in peers:
                directory[(peer.identity.org, peer.identity.serial)] = peer.identity.cert.subject.public_key
        return directory

    # -- event plumbing --------------------------------------------------------

    def _schedule(self, time: int, action: Callable[[], None]) -> None:
        if time > self.config.duration_ms:
            return
        heapq.heappush(self._events, _Event(time, self._seq, action))
        self._seq += 1

    def _schedule_setup_events(self) -> None:
        config = self.config
        if config.fault_file:
            content = (self.base_dir / config.fault_file).read_text()
            for time_ms, op, node_id in parse_fault_schedule(content):
                self._schedule(time_ms, lambda op=op, node_id=node_id: self._fault(op, node_id))
        if config.event_file:
            content = (self.base_dir / config.event_file).read_text()
            for time_ms, org, event in ing.parse_event_file(content):
                self._schedule(time_ms, lambda org=org, event=event: self._ingest(org, event))
        for org in sorted(self.stores):
            self._schedule(config.ingestion.period_ms, lambda org=org: self._flush(org))
        if config.duration_ms > 0 and config.workload.animals > 0:
            self._plan_workload()
            self._schedule(config.workload.workload_tick_ms, self._workload_tick)
        self._schedule(RESUBMIT_INTERVAL_MS, self._resubmit)

    def _fault(self, op: str, node_id: int) -> None:
        if op == "crash":
            self.cluster.crash(node_id)
        else:
            self.cluster.restart(node_id)
        self.cluster.maybe_elect(self.now)

    # -- ingestion -------------------------------------------------------------

    def _ingest(self, org: str, event: ing.Event) -> None:
        try:
            ing.record_event(self.stores[org], event, self._ranges, self.known_tags)
        except ing.IngestionError:
            pass  # rejected events simply do not enter the buffer

    def _flush(self, org: str) -> None:
        period = self.config.ingestion.period_ms
        channel = self._org_channel(org)
        if channel is not None:
            try:
                txs = ing.flush(self.stores[org], channel, self.now, period, self.clients[org])
            except ing.NotDueError:
                txs = []
            for tx in txs:
                self._submit(tx)
        self._schedule(self.now + period, lambda: self._flush(org))

    def _org_channel(self, org: str) -> Optional[str]:
        for name in sorted(self.channels):
            if org in self.channels[name].config.member_orgs:
                return name
        return None

    # -- invocation and ordering -------------------------------------------------

    def _endorsing_peers(self, channel: Channel) -> list[cc.Peer]:
        return [self.peers[org][0] for org in sorted(channel.config.member_orgs)]

    def invoke(
        self,
        channel_name: str,
        function: str,
        args_obj: dict,
        submitter: Identity,
        version: Optional[int] = None,
    ) -> Optional[Transaction]:
        """simulate -> endorse -> sign; returns None when the contract aborts."""
        channel = self.channels[channel_name]
        args = [canonical_json(args_obj)]
        try:
            responses = [
                cc.simulate(peer, channel_name, CHAINCODE_NAME, function, args, channel.state, version)
                for peer in self._endorsing_peers(channel)
            ]
            endorsed = cc.endorse(responses, channel.config.endorsement_policy, self.consortium, self.now)
        except cc.ContractAbort:
            self.aborts += 1
            return None
        return make_transaction(
            channel=channel_name,
            chaincode=(endorsed.chaincode.name, endorsed.chaincode.version),
            function=function,
            args=args,
            read_set=endorsed.read_set,
            write_set=endorsed.write_set,
            submitter=submitter,
            timestamp=self.now,
        )

    def _submit(self, tx: Transaction) -> None:
        self._outstanding[tx.tx_id] = tx
        leader = self.cluster.leader()
        if leader is not None and leader.live:
            try:
                self.cluster.submit_envelope(leader.node_id, tx, self.now)
            except NotLeaderError:
                pass  # retried by _resubmit

    def _resubmit(self) -> None:
        leader = self.cluster.leader()
        if leader is not None and leader.live:
            for tx in list(self._outstanding.values()):
                try:
                    self.cluster.submit_envelope(leader.node_id, tx, self.now)
                except NotLeaderError:
                    break
        self._schedule(self.now + RESUBMIT_INTERVAL_MS, self._resubmit)

    def _handle_commits(self) -> None:
        for channel_name, block in self.cluster.drain_commits():
            committed = self.channels[channel_name].apply_committed_block(block)
            for tx, valid in zip(committed.transactions, committed.validity_flags):
                self._outstanding.pop(tx.tx_id, None)
                if valid:
                    for key, _ in tx.write_set:
                        if key.startswith("entity/"):
                            entity = parse_entity_id(key.split("/", 1)[1])
                            self._committed_entities.setdefault(
                                (channel_name, entity.kind), []
                            ).append(entity)
                for goal in self._goals:
                    if goal.tx_id == tx.tx_id and not goal.done:
                        if valid:
                            goal.done = True
                            goal.on_commit(tx)
                        goal.tx_id = None  # invalid: goal becomes ready again

    # -- workload ------------------------------------------------------------------

    def _plan_workload(self) -> None:
        wl = self.config.workload
        for i in range(wl.animals):
            at = (i + 1) * wl.registration_spacing_ms
            label = "organic" if self.rng.random() < wl.organic_fraction else self.rng.choice(
                ["traditional", "natural", "grass_fed"]
            )
            tag = f"RF-{i + 1:06d}"
            self._schedule(at, lambda label=label, tag=tag: self._goal_register(label, tag))
            for _ in range(wl.sensor_readings_per_animal):
                at_reading = at + self.rng.randint(100, self.config.ingestion.period_ms)
                metric = self.rng.choice(sorted(ing.METRICS))
                lo, hi = ing.METRICS[metric][1]
                span = (hi - lo).numerator / (hi - lo).denominator
                value = lo + Fraction(self.rng.randint(0, 1000), 1000) * (hi - lo)
                self._schedule(
                    at_reading,
                    lambda tag=tag, metric=metric, value=value, t=at_reading: self._ingest(
                        wl.producer_org, ing.SensorReading(tag, metric, value, t)
                    ),
                )
            for s in range(wl.scans_per_animal):
                at_scan = at + self.rng.randint(100, self.config.ingestion.period_ms)
                self._schedule(
                    at_scan,
                    lambda tag=tag, s=s, t=at_scan: self._ingest(
                        wl.producer_org, ing.RfidScan(tag, f"ant-{s}", t)
                    ),
                )

    def _add_goal(self, goal: _Goal) -> None:
        if goal.key not in self._goal_keys:
            self._goal_keys.add(goal.key)
            self._goals.append(goal)

    def _goal_register(self, label: str, tag: str) -> None:
        wl = self.config.workload

        def run() -> Optional[Transaction]:
            return self.invoke(
                wl.farm_channel,
                "register_asset",
                {"org": wl.producer_org, "label": label, "tag": tag},
                self.clients[wl.producer_org],
            )

        def on_commit(tx: Transaction) -> None:
            animal = next(
                parse_entity_id(k.split("/", 1)[1]) for k, _ in tx.write_set if k.startswith("entity/")
            )
            self._animals[animal] = label
            self.known_tags[tag] = animal
            vet = ing.VetRecord(animal, "vaccination", "primary", None, self.now)
            self._ingest(wl.producer_org, vet)

        self._add_goal(_Goal(f"register:{tag}", f"{wl.producer_org}/ANIMAL", run, on_commit))

    def _workload_tick(self) -> None:
        wl = self.config.workload
        busy_counters = {g.counter for g in self._goals if g.tx_id is not None and not g.done}

        # Package committed animals.
        for animal in sorted(self._animals):
            if animal in self._packaged:
                continue
            self._packaged.add(animal)
            masses = [Fraction(self.rng.randint(50, 150), 10) for _ in range(wl.packages_per_animal)]
            self._add_goal(self._make_package_goal(animal, masses))

        # Ship committed, unshipped packages in one consolidated shipment per tick.
        ready = [
            pkg
            for pkg in self._committed_entities.get((wl.farm_channel, "PACKAGE"), [])
            if pkg not in self._shipped_packages
        ]
        if ready:
            group = ready[: max(wl.packages_per_batch * 2, 10)]
            self._shipped_packages.update(group)
            self._add_goal(self._make_ship_goal(group))

        # Produce batches from delivered manifests: certified material is
        # batched apart from everything else (segregation by construction).
        by_claim: dict[str, list[dict]] = {}
        for manifest in self._mfg_inbox:
            group_key = "organic" if manifest["claim"] == "organic" else "conventional"
            by_claim.setdefault(group_key, []).append(manifest)
        for claim in sorted(by_claim):
            entries = by_claim[claim]
            while len(entries) >= wl.packages_per_batch:
                group, remainder = entries[: wl.packages_per_batch], entries[wl.packages_per_batch :]
                by_claim[claim] = entries = remainder
                self._mfg_inbox = [m for m in self._mfg_inbox if m not in group]
                self._batched_groups += 1
                self._add_goal(self._make_batch_goal(self._batched_groups, claim, group))

        # Ship a few committed units onward to the distributor.
        for unit in self._committed_entities.get((wl.market_channel, "UNIT"), []):
            if self._unit_ships >= wl.unit_shipments:
                break
            if f"shipunit:{unit.render()}" not in self._goal_keys:
                self._unit_ships += 1
                self._add_goal(self._make_unit_ship_goal(unit))

        # Submit one ready goal per contended counter.
        for goal in self._goals:
            if goal.done or goal.tx_id is not None:
                continue
            if goal.counter is not None and goal.counter in busy_counters:
                continue
            tx = goal.run()
            if tx is None:
                goal.done = True  # contract aborted; counted, not retried
                continue
            goal.tx_id = tx.tx_id
            if goal.counter is not None:
                busy_counters.add(goal.counter)
            self._submit(tx)

        self._schedule(self.now + wl.workload_tick_ms, self._workload_tick)

    def _make_package_goal(self, animal: EntityId, masses: list[Fraction]) -> _Goal:
        wl = self.config.workload

        def run() -> Optional[Transaction]:
            return self.invoke(
                wl.farm_channel,
                "package",
                {
                    "animal": animal.render(),
                    "n": len(masses),
                    "masses": [frac_to_str(m) for m in masses],
                },
                self.clients[wl.producer_org],
            )

        return _Goal(f"package:{animal.render()}", f"{wl.producer_org}/PACKAGE", run, lambda tx: None)

    def _make_ship_goal(self, packages: list[EntityId]) -> _Goal:
        wl = self.config.workload
        key = f"ship:{packages[0].render()}+{len(packages)}"

        def run() -> Optional[Transaction]:
            return self.invoke(
                wl.farm_channel,
                "ship",
                {
                    "subject": packages[0].render(),
                    "subjects": [p.render() for p in packages],
                    "from": wl.producer_org,
                    "to": wl.manufacturer_org,
                    "chaincode": [CHAINCODE_NAME, 1],
                },
                self.clients[wl.producer_org],
            )

        def on_commit(tx: Transaction) -> None:
            # The manifest travels with the goods; it arrives after transport.
            farm_state = self.channels[wl.farm_channel].state
            manifests = []
            for pkg in packages:
                entry = farm_state.get(f"entity/{pkg.render()}")
                if entry is None:
                    continue
                record = json.loads(entry.value.decode("utf-8"))
                manifests.append(
                    {
                        "id": pkg.render(),
                        "claim": record.get("claim"),
                        "record": record,
                    }
                )
            self._schedule(
                self.now + wl.transport_delay_ms,
                lambda: self._mfg_inbox.extend(manifests),
            )

        return _Goal(key, f"{wl.producer_org}/SHIPMENT", run, on_commit)

    def _make_batch_goal(self, seq: int, claim: str, group: list[dict]) -> _Goal:
        wl = self.config.workload

        def run() -> Optional[Transaction]:
            # Fresh contract version per production batch.
            channel = self.channels[wl.market_channel]
            current = self._next_contract_version[wl.market_channel]
            sigs = {(org, self.admins[org].serial) for org in channel.config.member_orgs}
            member_peers = [p for org in sorted(channel.config.member_orgs) for p in self.peers[org]]
            cc.upgrade(
                member_peers,
                channel.config,
                cc.builtin_contracts(CHAINCODE_NAME, current + 1),
                sigs,
                self.consortium,
            )
            self._next_contract_version[wl.market_channel] = current + 1

            ingredients = [m["id"] for m in group]
            manifest = {m["id"]: m["record"] for m in group}
            certified = sum(
                (Fraction(m["record"].get("mass", "0/1")) for m in group if m["claim"] == "organic"),
                Fraction(0),
            )
            batch_claim = claim if claim in ("organic", "traditional") else "traditional"
            return self.invoke(
                wl.market_channel,
                "produce_batch",
                {
                    "org": wl.manufacturer_org,
                    "ingredients": ingredients,
                    "manifest": manifest,
                    "claim": batch_claim,
                    "certified_mass": frac_to_str(certified),
                    "units": wl.units_per_batch,
                },
                self.clients[wl.manufacturer_org],
                version=self._next_contract_version[wl.market_channel],
            )

        def on_commit(tx: Transaction) -> None:
            batch = next(
                parse_entity_id(k.split("/", 1)[1])
                for k, _ in tx.write_set
                if k.startswith("entity/") and parse_entity_id(k.split("/", 1)[1]).kind == "BATCH"
            )
            self._batch_versions[batch.render()] = tx.chaincode[1]

        return _Goal(f"batch:{seq}", f"{wl.manufacturer_org}/BATCH", run, on_commit)

    def _make_unit_ship_goal(self, unit: EntityId) -> _Goal:
        wl = self.config.workload

        def run() -> Optional[Transaction]:
            return self.invoke(
                wl.market_channel,
                "ship",
                {
                    "subject": unit.render(),
                    "from": wl.manufacturer_org,
                    "to": wl.distributor_org,
                    "chaincode": [CHAINCODE_NAME, self._next_contract_version[wl.market_channel]],
                },
                self.clients[wl.manufacturer_org],
            )

        return _Goal(
            f"shipunit:{unit.render()}", f"{wl.manufacturer_org}/SHIPMENT", run, lambda tx: None
        )

    # -- main loop -------------------------------------------------------------------

    def run(self) -> RunReport:
        duration = self.config.duration_ms
        while True:
            due = [self._events[0].time] if self._events else []
            cluster_due = self.cluster.next_due()
            if cluster_due is not None:
                due.append(max(cluster_due, self.now + 1))
            if not due:
                break
            next_time = min(due)
            if next_time > duration:
                break
            self.now = max(self.now, next_time)
            while self._events and self._events[0].time <= self.now:
                heapq.heappop(self._events).action()
            self.cluster.maybe_elect(self.now)
            self.cluster.tick(self.now)
            self._handle_commits()
        self.now = duration
        return self._report()

    def graph(self) -> ProvenanceGraph:
        return ProvenanceGraph.from_chains([ch.chain for ch in self.channels.values()])

    def _report(self) -> RunReport:
        channels = {}
        for name, channel in sorted(self.channels.items()):
            rep = ChannelReport(blocks=len(channel.chain))
            for block in channel.chain:
                for valid in block.validity_flags:
                    if valid:
                        rep.tx_valid += 1
                    else:
                        rep.tx_invalid += 1
            channels[name] = rep

        directory = self.key_directory()
        verification = "ok"
        for name, channel in sorted(self.channels.items()):
            report = verify_chain(channel.chain, directory)
            if not report.ok:
                verification = f"{name}: block {report.first_bad_block}: {report.reason}"
                break

        graph = self.graph()
        graph.assert_acyclic()
        violations = [
            f"segregation:{v.entity.render()}:{','.join(a.render() for a in v.tainted_ancestors)}"
            for v in check_segregation(graph)
        ]
        entities: dict[str, int] = {}
        for entity in graph.entities():
            entities[entity.kind] = entities.get(entity.kind, 0) + 1

        return RunReport(
            channels=channels,
            violations=violations,
            verification=verification,
            elapsed_ms=self.now,
            entities=entities,
            aborted_invocations=self.aborts,
        )

    # -- exports ----------------------------------------------------------------------

    def export(self, out_dir: Path) -> None:
        from .ledger import export_chain

        out_dir.mkdir(parents=True, exist_ok=True)
        for name, channel in sorted(self.channels.items()):
            (out_dir / f"{name}.chain").write_text(export_chain(channel.chain))
        lines = [
            f"{org} {serial} {key.hex()}"
            for (org, serial), key in sorted(self.key_directory().items())
        ]
        (out_dir / "identities.keys").write_text("".join(line + "\n" for line in lines))


def run_scenario(config: ScenarioConfig, base_dir: Optional[Path] = None) -> tuple[Simulation, RunReport]:
    sim = Simulation(config, base_dir)
    report = sim.run()
    return sim, report
