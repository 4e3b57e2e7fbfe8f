import random

import pytest

from foodtrace.codec import ZERO_DIGEST
from foodtrace.ledger import make_transaction
from foodtrace.ordering import (
    LogEntry,
    NoQuorumError,
    NotLeaderError,
    OrderingCluster,
    OrderingConfig,
    Role,
    StaleEpochError,
    cut_batch,
    parse_fault_schedule,
)

FAST = OrderingConfig(
    cluster_size=3, batch_max_txs=3, batch_timeout_ms=50, link_delay_ms=1, heartbeat_interval_ms=10
)


def envelope(i, channel="ch"):
    return make_transaction(
        channel=channel, chaincode=("cc", 1), function="put", args=[],
        read_set=[], write_set=[(f"k{i}", str(i).encode())], timestamp=i,
    )


def fresh_cluster(config=FAST):
    cluster = OrderingCluster(config)
    cluster.register_channel("ch", 0, ZERO_DIGEST)
    cluster.elect_leader(now=0)
    return cluster


def settle(cluster, start, steps=400):
    for t in range(start, start + steps):
        cluster.tick(t)
    return start + steps


def committed_prefixes_consistent(cluster):
    logs = [node.log[: node.committed_up_to] for node in cluster.nodes]
    for i in range(len(logs)):
        for j in range(i + 1, len(logs)):
            shorter = min(len(logs[i]), len(logs[j]))
            for k in range(shorter):
                if not logs[i][k].same_proposal(logs[j][k]):
                    return False
    return True


def test_initial_election_picks_lowest_id():
    cluster = fresh_cluster()
    assert cluster.leader().node_id == 0
    assert cluster.leader().epoch == 1


def test_submit_to_follower_rejected():
    cluster = fresh_cluster()
    with pytest.raises(NotLeaderError):
        cluster.submit_envelope(1, envelope(0), now=0)


def test_submissions_preserve_arrival_order():
    cluster = fresh_cluster()
    txs = [envelope(i) for i in range(5)]
    for tx in txs:
        cluster.submit_envelope(0, tx, now=1)
    assert [t.tx_id for _, t in cluster._pending["ch"]] == [t.tx_id for t in txs]


def test_cut_batch_size_trigger():
    pending = [(0, envelope(i)) for i in range(3)]
    batch = cut_batch(pending, FAST, now=0)
    assert len(batch) == 3 and pending == []


def test_cut_batch_waits_for_timeout():
    pending = [(0, envelope(0))]
    assert cut_batch(pending, FAST, now=49) is None
    assert len(pending) == 1
    batch = cut_batch(pending, FAST, now=50)
    assert len(batch) == 1 and pending == []


def test_three_node_commit_all_live():
    cluster = fresh_cluster()
    for i in range(3):
        cluster.submit_envelope(0, envelope(i), now=1)
    settle(cluster, 1, 30)
    commits = cluster.drain_commits()
    assert len(commits) == 1
    channel, block = commits[0]
    assert channel == "ch" and block.header.number == 0
    assert len(block.transactions) == 3
    # Majority ack recorded on the entry (leader + at least one follower).
    entry = cluster.nodes[0].log[-1]
    assert len(entry.acks) >= 2


def test_commit_with_one_follower_crashed():
    cluster = fresh_cluster()
    cluster.crash(2)
    for i in range(3):
        cluster.submit_envelope(0, envelope(i), now=1)
    settle(cluster, 1, 30)
    assert len(cluster.drain_commits()) == 1


def test_no_commit_with_two_crashed_until_restart():
    cluster = fresh_cluster()
    cluster.crash(1)
    cluster.crash(2)
    for i in range(3):
        cluster.submit_envelope(0, envelope(i), now=1)
    now = settle(cluster, 1, 200)
    assert cluster.drain_commits() == []
    cluster.restart(1)
    settle(cluster, now, 200)
    assert len(cluster.drain_commits()) == 1


def test_election_tiebreak_lowest_live_id():
    cluster = fresh_cluster()
    settle(cluster, 1, 30)
    cluster.crash(0)
    elected = cluster.maybe_elect(40)
    assert elected == 1
    assert cluster.nodes[1].role is Role.LEADER


def test_election_prefers_longer_log():
    cluster = fresh_cluster()
    cluster.submit_envelope(0, envelope(0), now=1)
    # Let node 2 receive the entry but keep node 1 dark by crashing it first.
    cluster.crash(1)
    settle(cluster, 1, 80)
    cluster.restart(1)
    cluster.crash(0)
    elected = cluster.maybe_elect(100)
    assert elected == 2  # longer log than the freshly restarted node 1


def test_no_quorum_halts_election():
    cluster = fresh_cluster()
    cluster.crash(1)
    cluster.crash(2)
    cluster.crash(0)
    cluster.restart(0)
    with pytest.raises(NoQuorumError):
        cluster.elect_leader(now=10)
    assert cluster.maybe_elect(10) is None


def test_epoch_strictly_increases():
    cluster = fresh_cluster()
    with pytest.raises(StaleEpochError):
        cluster.elect_leader(now=5, new_epoch=1)


def test_replicate_requires_current_epoch():
    cluster = fresh_cluster()
    with pytest.raises(StaleEpochError):
        cluster.replicate(LogEntry(epoch=0, block=None), now=1)


def test_crash_then_restart_without_traffic_keeps_log():
    cluster = fresh_cluster()
    cluster.submit_envelope(0, envelope(0), now=1)
    settle(cluster, 1, 80)
    log_before = [e.same_proposal for e in cluster.nodes[2].log]
    length = len(cluster.nodes[2].log)
    cluster.crash(2)
    cluster.restart(2)
    assert len(cluster.nodes[2].log) == length
    assert cluster.nodes[2].role is Role.FOLLOWER


def test_divergent_suffix_truncated_on_first_replication():
    cluster = fresh_cluster()
    cluster.submit_envelope(0, envelope(0), now=1)
    now = settle(cluster, 1, 60)  # block 0 committed everywhere
    # Leader 0 appends an entry that never replicates: both followers dark.
    cluster.crash(1)
    cluster.crash(2)
    orphan = envelope(99)
    cluster.submit_envelope(0, orphan, now=now)
    now = settle(cluster, now, 60)
    assert any(
        e.block is not None and orphan.tx_id in [t.tx_id for t in e.block.transactions]
        for e in cluster.nodes[0].log
    )
    # Depose node 0; nodes 1 and 2 elect and move on with new history.
    cluster.crash(0)
    cluster.restart(1)
    cluster.restart(2)
    assert cluster.maybe_elect(now) == 1
    cluster.submit_envelope(1, envelope(7), now=now)
    now = settle(cluster, now, 120)
    # Node 0 rejoins as follower; its uncommitted suffix is repaired.
    cluster.restart(0)
    now = settle(cluster, now, 120)
    assert committed_prefixes_consistent(cluster)
    assert len(cluster.nodes[0].log) == len(cluster.nodes[1].log)
    assert all(a.same_proposal(b) for a, b in zip(cluster.nodes[0].log, cluster.nodes[1].log))
    committed_txs = {t.tx_id for _, b in cluster.committed_blocks for t in b.transactions}
    assert orphan.tx_id not in committed_txs  # dropped with the truncated suffix


def test_restart_during_no_quorum_resumes_commits():
    cluster = fresh_cluster()
    for i in range(3):
        cluster.submit_envelope(0, envelope(i), now=1)
    settle(cluster, 1, 30)
    cluster.crash(1)
    cluster.crash(2)
    cluster.crash(0)
    assert cluster.maybe_elect(50) is None
    cluster.restart(0)
    cluster.restart(1)
    assert cluster.maybe_elect(60) is not None
    for i in range(3, 6):
        cluster.submit_envelope(cluster.leader().node_id, envelope(i), now=61)
    settle(cluster, 61, 120)
    blocks = [b for _, b in cluster.committed_blocks]
    assert [b.header.number for b in blocks] == list(range(len(blocks)))
    assert len(blocks) >= 2


def test_duplicate_submissions_are_absorbed():
    cluster = fresh_cluster()
    tx = envelope(0)
    cluster.submit_envelope(0, tx, now=1)
    cluster.submit_envelope(0, tx, now=2)
    settle(cluster, 2, 80)
    blocks = [b for _, b in cluster.committed_blocks]
    ids = [t.tx_id for b in blocks for t in b.transactions]
    assert ids.count(tx.tx_id) == 1


def test_block_numbers_contiguous_across_elections():
    cluster = fresh_cluster()
    now = 1
    for i in range(6):
        cluster.submit_envelope(cluster.leader().node_id, envelope(i), now=now)
        now = settle(cluster, now, 60)
        if i == 2:
            cluster.crash(cluster.leader().node_id)
            cluster.maybe_elect(now)
            now = settle(cluster, now, 60)
    blocks = [b for _, b in cluster.committed_blocks]
    assert [b.header.number for b in blocks] == list(range(len(blocks)))
    assert len(blocks) >= 5


def run_random_schedule(seed: int, steps: int = 400):
    """Randomized crash/restart driver shared with the acceptance suite.

    Checks after every step: pairwise committed-prefix consistency, commit
    emission in contiguous block order, and no emitted entry absent from a
    live leader's log.
    """
    rng = random.Random(seed)
    cluster = fresh_cluster()
    submitted: dict[bytes, object] = {}
    committed_ids: set[bytes] = set()
    emitted_blocks = []
    seq = 0
    now = 0
    for _ in range(steps):
        now += 1
        for node in cluster.nodes:
            if node.live and rng.random() < 0.01:
                cluster.crash(node.node_id)
            elif not node.live and rng.random() < 0.05:
                cluster.restart(node.node_id)
        cluster.maybe_elect(now)
        if rng.random() < 0.4:
            tx = envelope(seq)
            seq += 1
            submitted[tx.tx_id] = tx
        leader = cluster.leader()
        if leader is not None and leader.live and now % 20 == 0:
            for tx_id, tx in submitted.items():
                if tx_id not in committed_ids:
                    cluster.submit_envelope(leader.node_id, tx, now)
        cluster.tick(now)
        for _, block in cluster.drain_commits():
            emitted_blocks.append(block)
            committed_ids.update(t.tx_id for t in block.transactions)

        assert committed_prefixes_consistent(cluster), f"seed {seed}: prefix divergence"
        numbers = [b.header.number for b in emitted_blocks]
        assert numbers == list(range(len(numbers))), f"seed {seed}: block numbering"
        leader = cluster.leader()
        if leader is not None and leader.live:
            in_log = [e.block for e in leader.log if e.block is not None]
            assert in_log[: len(emitted_blocks)] == emitted_blocks, f"seed {seed}: committed entry lost"

    # Liveness: restore a majority, go quiet, and everything must commit.
    for node in cluster.nodes[: cluster.majority()]:
        cluster.restart(node.node_id)
    cluster.maybe_elect(now)
    deadline = now + 3000
    while now < deadline and committed_ids < set(submitted):
        now += 1
        leader = cluster.leader()
        if leader is not None and leader.live and now % 20 == 0:
            for tx_id, tx in submitted.items():
                if tx_id not in committed_ids:
                    cluster.submit_envelope(leader.node_id, tx, now)
        cluster.tick(now)
        for _, block in cluster.drain_commits():
            emitted_blocks.append(block)
            committed_ids.update(t.tx_id for t in block.transactions)
    assert set(submitted) <= committed_ids, f"seed {seed}: liveness violated"
    return len(emitted_blocks)


def test_randomized_crash_restart_schedules_small():
    for seed in range(25):
        run_random_schedule(seed, steps=300)


def test_parse_fault_schedule():
    content = "# faults\n100 crash 1\n50 restart 2\n"
    assert parse_fault_schedule(content) == [(50, "restart", 2), (100, "crash", 1)]
    with pytest.raises(Exception):
        parse_fault_schedule("100 explode 1\n")
