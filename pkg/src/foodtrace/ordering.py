"""Crash-fault-tolerant ordering service over an in-process message fabric.

A leader batches submitted transaction envelopes into block proposals and
replicates them through an epoch-stamped log. Commit requires a majority
of acks on an entry of the leader's own epoch (earlier entries commit
transitively), and elections pick the live node with the most up-to-date
log: highest last-entry epoch, then longest log, then lowest id. Election
is triggered by the simulator, never by timers, so runs are reproducible.

Messages travel on per-link FIFO queues with configurable delay. Crashing
freezes a node with its log intact; a restarted node rejoins as a follower
and is repaired by the leader's consistency check (conflicting uncommitted
suffixes are truncated on first replication).
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .ledger import Block, Transaction, hash_block, make_block


class OrderingError(Exception):
    pass


class NotLeaderError(OrderingError):
    pass


class NoQuorumError(OrderingError):
    pass


class StaleEpochError(OrderingError):
    pass


@dataclass(frozen=True)
class OrderingConfig:
    cluster_size: int = 3
    batch_max_txs: int = 10
    batch_timeout_ms: int = 500
    link_delay_ms: int = 1
    heartbeat_interval_ms: int = 100

    def __post_init__(self):
        if self.cluster_size < 3 or self.cluster_size % 2 == 0:
            raise OrderingError("cluster_size must be odd and >= 3")
        if self.batch_max_txs < 1:
            raise OrderingError("batch_max_txs must be >= 1")


class Role(enum.Enum):
    LEADER = "leader"
    FOLLOWER = "follower"
    CRASHED = "crashed"


@dataclass
class LogEntry:
    epoch: int
    block: Optional[Block]  # None marks an election no-op
    acks: set[int] = field(default_factory=set)

    def same_proposal(self, other: "LogEntry") -> bool:
        return self.epoch == other.epoch and self.block == other.block


@dataclass
class OrdererNode:
    node_id: int
    epoch: int = 0
    role: Role = Role.FOLLOWER
    log: list[LogEntry] = field(default_factory=list)
    committed_up_to: int = 0  # committed prefix length

    @property
    def live(self) -> bool:
        return self.role is not Role.CRASHED

    def last_log_epoch(self) -> int:
        return self.log[-1].epoch if self.log else 0

    def election_key(self) -> tuple[int, int, int]:
        return (self.last_log_epoch(), len(self.log), -self.node_id)


@dataclass(frozen=True)
class Append:
    src: int
    dst: int
    epoch: int
    prev_len: int
    prev_epoch: int
    entries: tuple[tuple[int, Optional[Block]], ...]
    commit_len: int


@dataclass(frozen=True)
class AppendResp:
    src: int
    dst: int
    epoch: int
    success: bool
    match_len: int


def cut_batch(
    pending: list[tuple[int, Transaction]],
    config: OrderingConfig,
    now: int,
) -> Optional[list[Transaction]]:
    """Drain a proposal when the size or age threshold is met, else None."""
    if not pending:
        return None
    if len(pending) >= config.batch_max_txs:
        take = config.batch_max_txs
    elif now - pending[0][0] >= config.batch_timeout_ms:
        take = len(pending)
    else:
        return None
    batch = [tx for _, tx in pending[:take]]
    del pending[:take]
    return batch


class OrderingCluster:
    """The whole ordering service plus its simulated network."""

    def __init__(self, config: OrderingConfig = OrderingConfig(), now: int = 0):
        self.config = config
        self.nodes = [OrdererNode(i) for i in range(config.cluster_size)]
        self._msgs: list[tuple[int, int, object]] = []  # (deliver_at, seq, msg)
        self._seq = 0
        self._link_clock: dict[tuple[int, int], int] = {}
        self._pending: dict[str, list[tuple[int, Transaction]]] = {}
        self._seen_tx: set[bytes] = set()
        self._channel_tips: dict[str, tuple[int, bytes]] = {}  # next number, prev hash
        self._match_len: dict[int, int] = {}
        self._next_idx: dict[int, int] = {}
        self._heartbeat_due = now
        self._commit_log: list[tuple[str, Block]] = []
        self._emitted = 0
        self._drained = 0

    # -- cluster state ------------------------------------------------------

    @property
    def n(self) -> int:
        return self.config.cluster_size

    def majority(self) -> int:
        return self.n // 2 + 1

    def live_nodes(self) -> list[OrdererNode]:
        return [node for node in self.nodes if node.live]

    def leader(self) -> Optional[OrdererNode]:
        for node in self.nodes:
            if node.role is Role.LEADER:
                return node
        return None

    def has_quorum(self) -> bool:
        return len(self.live_nodes()) >= self.majority()

    def register_channel(self, name: str, next_number: int, prev_hash: bytes) -> None:
        """Seed the block numbering base, typically (1, hash of genesis)."""
        self._channel_tips[name] = (next_number, prev_hash)
        self._pending.setdefault(name, [])

    # -- client surface -----------------------------------------------------

    def submit_envelope(self, node_id: int, tx: Transaction, now: int) -> None:
        """Append to the leader's pending buffer; duplicates are absorbed."""
        node = self.nodes[node_id]
        if node.role is not Role.LEADER:
            raise NotLeaderError(f"node {node_id} is not the leader")
        if tx.channel not in self._channel_tips:
            raise OrderingError(f"unknown channel {tx.channel!r}")
        if tx.tx_id in self._seen_tx:
            return
        self._seen_tx.add(tx.tx_id)
        self._pending[tx.channel].append((now, tx))

    def pending_count(self) -> int:
        return sum(len(buf) for buf in self._pending.values())

    # -- faults and election ------------------------------------------------

    def crash(self, node_id: int) -> None:
        self.nodes[node_id].role = Role.CRASHED

    def restart(self, node_id: int) -> None:
        node = self.nodes[node_id]
        if node.role is Role.CRASHED:
            node.role = Role.FOLLOWER

    def elect_leader(self, now: int, new_epoch: Optional[int] = None) -> int:
        """Deterministic election among live nodes; raises without a quorum."""
        live = self.live_nodes()
        if len(live) < self.majority():
            raise NoQuorumError(f"{len(live)} live of {self.n}")
        top = max(n.epoch for n in self.nodes)
        epoch = new_epoch if new_epoch is not None else top + 1
        if epoch <= top:
            raise StaleEpochError(f"epoch {epoch} does not advance past {top}")
        winner = max(live, key=OrdererNode.election_key)
        for node in live:
            node.role = Role.FOLLOWER
        winner.role = Role.LEADER
        winner.epoch = epoch
        self._match_len = {n.node_id: 0 for n in self.nodes}
        self._next_idx = {n.node_id: len(winner.log) for n in self.nodes}
        for entry in winner.log:
            entry.acks = {winner.node_id}
        self._pending = {name: [] for name in self._channel_tips}
        self._seen_tx = {
            tx.tx_id
            for entry in winner.log
            if entry.block is not None
            for tx in entry.block.transactions
        }
        self._recompute_tips(winner)
        # Epoch marker lets inherited entries commit without new traffic.
        winner.log.append(LogEntry(epoch, None, {winner.node_id}))
        self._broadcast(now)
        self._heartbeat_due = now + self.config.heartbeat_interval_ms
        return winner.node_id

    def maybe_elect(self, now: int) -> Optional[int]:
        leader = self.leader()
        if leader is not None and leader.live:
            return None
        if not self.has_quorum():
            return None
        return self.elect_leader(now)

    def _recompute_tips(self, leader: OrdererNode) -> None:
        for entry in leader.log:
            if entry.block is not None:
                block = entry.block
                self._channel_tips[block.transactions[0].channel] = (
                    block.header.number + 1,
                    hash_block(block.header),
                )

    # -- proposal and replication --------------------------------------------

    def _propose(self, channel: str, txs: list[Transaction], now: int) -> None:
        leader = self.leader()
        assert leader is not None and leader.live
        number, prev_hash = self._channel_tips[channel]
        block = make_block(number, prev_hash, txs)
        self._channel_tips[channel] = (number + 1, hash_block(block.header))
        self.replicate(LogEntry(leader.epoch, block), now)

    def replicate(self, entry: LogEntry, now: int) -> None:
        """Leader appends the proposal to its log and pushes it to followers."""
        leader = self.leader()
        if leader is None or not leader.live:
            raise NotLeaderError("no live leader")
        if entry.epoch != leader.epoch:
            raise StaleEpochError(f"entry epoch {entry.epoch} != leader epoch {leader.epoch}")
        entry.acks = {leader.node_id}
        leader.log.append(entry)
        self._broadcast(now)

    def _broadcast(self, now: int) -> None:
        leader = self.leader()
        if leader is None or not leader.live:
            return
        for node in self.nodes:
            if node.node_id != leader.node_id:
                self._send_append(leader, node.node_id, now)

    def _send_append(self, leader: OrdererNode, dst: int, now: int) -> None:
        prev_len = min(self._next_idx.get(dst, 0), len(leader.log))
        prev_epoch = leader.log[prev_len - 1].epoch if prev_len > 0 else 0
        entries = tuple((e.epoch, e.block) for e in leader.log[prev_len:])
        self._send(
            Append(
                src=leader.node_id,
                dst=dst,
                epoch=leader.epoch,
                prev_len=prev_len,
                prev_epoch=prev_epoch,
                entries=entries,
                commit_len=leader.committed_up_to,
            ),
            now,
        )

    def _send(self, msg, now: int) -> None:
        link = (msg.src, msg.dst)
        deliver_at = max(now + self.config.link_delay_ms, self._link_clock.get(link, 0))
        self._link_clock[link] = deliver_at  # per-link FIFO
        heapq.heappush(self._msgs, (deliver_at, self._seq, msg))
        self._seq += 1

    # -- message handling -----------------------------------------------------

    def _receive_append(self, node: OrdererNode, msg: Append, now: int) -> None:
        if msg.epoch < node.epoch:
            self._send(AppendResp(node.node_id, msg.src, node.epoch, False, 0), now)
            return
        if msg.epoch > node.epoch or node.role is Role.LEADER:
            node.epoch = msg.epoch
            node.role = Role.FOLLOWER

        if len(node.log) < msg.prev_len:
            self._send(AppendResp(node.node_id, msg.src, node.epoch, False, len(node.log)), now)
            return
        if msg.prev_len > 0 and node.log[msg.prev_len - 1].epoch != msg.prev_epoch:
            self._send(
                AppendResp(node.node_id, msg.src, node.epoch, False, msg.prev_len - 1), now
            )
            return

        pos = msg.prev_len
        for entry_epoch, entry_block in msg.entries:
            if pos < len(node.log):
                if node.log[pos].epoch != entry_epoch:
                    assert pos >= node.committed_up_to, "truncating committed entries"
                    del node.log[pos:]
                    node.log.append(LogEntry(entry_epoch, entry_block))
            else:
                node.log.append(LogEntry(entry_epoch, entry_block))
            pos += 1
        match_len = msg.prev_len + len(msg.entries)
        node.committed_up_to = max(node.committed_up_to, min(msg.commit_len, match_len))
        self._send(AppendResp(node.node_id, msg.src, node.epoch, True, match_len), now)

    def _receive_resp(self, node: OrdererNode, msg: AppendResp, now: int) -> None:
        if node.role is not Role.LEADER:
            return
        if msg.epoch > node.epoch:
            node.epoch = msg.epoch
            node.role = Role.FOLLOWER
            return
        if msg.epoch < node.epoch:
            return
        if msg.success:
            matched = min(msg.match_len, len(node.log))
            self._match_len[msg.src] = max(self._match_len.get(msg.src, 0), matched)
            self._next_idx[msg.src] = max(self._next_idx.get(msg.src, 0), matched)
            for entry in node.log[:matched]:
                entry.acks.add(msg.src)
            self._advance_commit(node)
        else:
            self._next_idx[msg.src] = min(self._next_idx.get(msg.src, len(node.log)), msg.match_len)
            self._send_append(node, msg.src, now)

    def _advance_commit(self, leader: OrdererNode) -> None:
        # Majority-acked entries commit only through one of the leader's own
        # epoch; earlier entries commit transitively with it.
        for length in range(len(leader.log), leader.committed_up_to, -1):
            entry = leader.log[length - 1]
            if entry.epoch != leader.epoch:
                break
            if len(entry.acks) >= self.majority():
                leader.committed_up_to = length
                break
        self._emit_commits(leader)

    def _emit_commits(self, leader: OrdererNode) -> None:
        while self._emitted < leader.committed_up_to:
            entry = leader.log[self._emitted]
            if entry.block is not None:
                self._commit_log.append((entry.block.transactions[0].channel, entry.block))
            self._emitted += 1

    def drain_commits(self) -> list[tuple[str, Block]]:
        """Commit events (channel, block) newly observed since the last drain."""
        out = self._commit_log[self._drained :]
        self._drained = len(self._commit_log)
        return out

    @property
    def committed_blocks(self) -> list[tuple[str, Block]]:
        return list(self._commit_log)

    # -- clock ----------------------------------------------------------------

    def next_due(self) -> Optional[int]:
        due = []
        if self._msgs:
            due.append(self._msgs[0][0])
        leader = self.leader()
        if leader is not None and leader.live:
            due.append(self._heartbeat_due)
            for buf in self._pending.values():
                if len(buf) >= self.config.batch_max_txs:
                    due.append(buf[0][0])  # already cuttable
                elif buf:
                    due.append(buf[0][0] + self.config.batch_timeout_ms)
        return min(due) if due else None

    def tick(self, now: int) -> None:
        """Deliver due messages, cut due batches, send due heartbeats."""
        while self._msgs and self._msgs[0][0] <= now:
            _, _, msg = heapq.heappop(self._msgs)
            node = self.nodes[msg.dst]
            if not node.live:
                continue  # messages to crashed nodes are dropped
            if isinstance(msg, Append):
                self._receive_append(node, msg, now)
            else:
                self._receive_resp(node, msg, now)

        leader = self.leader()
        if leader is not None and leader.live:
            for channel in sorted(self._pending):
                while (batch := cut_batch(self._pending[channel], self.config, now)) is not None:
                    self._propose(channel, batch, now)
            if now >= self._heartbeat_due:
                self._broadcast(now)
                self._heartbeat_due = now + self.config.heartbeat_interval_ms
            self._advance_commit(leader)


def elect_leader(cluster: OrderingCluster, new_epoch: int, now: int = 0) -> int:
    return cluster.elect_leader(now, new_epoch)


def parse_fault_schedule(content: str) -> list[tuple[int, str, int]]:
    """Lines of `<time_ms> crash <node_id>` / `<time_ms> restart <node_id>`."""
    out = []
    for lineno, line in enumerate(content.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in ("crash", "restart"):
            raise OrderingError(f"fault schedule line {lineno}: {line!r}")
        out.append((int(parts[0]), parts[1], int(parts[2])))
    return sorted(out, key=lambda t: t[0])
