import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foodtrace.codec import ZERO_DIGEST, sha256
from foodtrace.ledger import (
    BadNumberError,
    BadPrevHashError,
    Block,
    BlockHeader,
    EmptyBlockError,
    StateKeyNotFound,
    WorldState,
    append_block,
    apply_block,
    chain_tip_hash,
    commit_block,
    decode_block,
    export_chain,
    get_history,
    get_state,
    hash_block,
    import_chain,
    make_block,
    make_transaction,
    parse_chain_file,
    replay_chain,
    tx_digest_of,
    verify_chain,
    verify_raw_chain,
)

# Pinned at first build; the header is (number=0, zero prev_hash, sha256(b"")).
GOLDEN_GENESIS_HASH = "756e2e87f46e31bd3a5841cd74d9588e1aadc5ae4af750ef6cf3b8269614e1a5"


def tx(key="k", value=b"v", reads=(), function="put", channel="ch", stamp=0):
    return make_transaction(
        channel=channel,
        chaincode=("cc", 1),
        function=function,
        args=[value],
        read_set=list(reads),
        write_set=[(key, value)],
        timestamp=stamp,
    )


def build_chain(n_blocks, txs_per_block=2):
    chain, state = (), WorldState()
    counter = 0
    for _ in range(n_blocks):
        txs = []
        for _ in range(txs_per_block):
            txs.append(tx(key=f"k{counter}", value=f"v{counter}".encode(), stamp=counter))
            counter += 1
        block = make_block(len(chain), chain_tip_hash(chain), txs)
        chain, state, _ = commit_block(chain, state, block)
    return chain, state


def test_hash_block_is_deterministic():
    h = BlockHeader(3, b"\x01" * 32, b"\x02" * 32)
    assert hash_block(h) == hash_block(h)


def test_golden_genesis_hash():
    header = BlockHeader(0, ZERO_DIGEST, sha256(b""))
    assert hash_block(header).hex() == GOLDEN_GENESIS_HASH


def test_bit_flips_never_collide():
    rng = random.Random(7)
    base = BlockHeader(5, bytes(rng.randbytes(32)), bytes(rng.randbytes(32)))
    baseline = hash_block(base)
    raw = base.encode()
    for _ in range(500):
        i = rng.randrange(len(raw))
        bit = 1 << rng.randrange(8)
        mutated = raw[:i] + bytes([raw[i] ^ bit]) + raw[i + 1 :]
        flipped = BlockHeader(
            int.from_bytes(mutated[:8], "big"), mutated[8:40], mutated[40:72]
        )
        assert hash_block(flipped) != baseline


def test_append_genesis_then_bad_prev():
    genesis = make_block(0, ZERO_DIGEST, [tx()])
    chain = append_block((), genesis)
    assert len(chain) == 1
    bad = make_block(1, b"\xab" * 32, [tx(key="x")])
    with pytest.raises(BadPrevHashError):
        append_block(chain, bad)
    wrong_number = make_block(5, chain_tip_hash(chain), [tx(key="x")])
    with pytest.raises(BadNumberError):
        append_block(chain, wrong_number)


def test_empty_block_rejected():
    with pytest.raises(EmptyBlockError):
        make_block(0, ZERO_DIGEST, [])


def test_hundred_block_chain_verifies():
    chain, _ = build_chain(100)
    assert verify_chain(chain).ok


def test_tamper_in_block4_third_tx_detected():
    chain, _ = build_chain(10, txs_per_block=3)
    raws = [b.encode() for b in chain]
    target = raws[4]
    # Flip one byte inside the third transaction's value region.
    offset = target.rfind(b"v" + str(4 * 3 + 2).encode())
    assert offset > 0
    raws[4] = target[:offset] + bytes([target[offset] ^ 0xFF]) + target[offset + 1 :]
    report = verify_raw_chain(raws)
    assert not report.ok
    assert report.first_bad_block == 4


def test_swapped_transactions_break_tx_digest():
    chain, _ = build_chain(6, txs_per_block=3)
    block = chain[3]
    swapped = Block(
        block.header,
        (block.transactions[1], block.transactions[0], block.transactions[2]),
        block.validity_flags,
    )
    tampered = chain[:3] + (swapped,) + chain[4:]
    report = verify_chain(tampered)
    assert not report.ok
    assert report.first_bad_block == 3


def test_mvcc_create_then_conflict():
    first = tx(key="k", reads=[("k", 0)])
    second = tx(key="k", value=b"other", reads=[("k", 0)])
    block = make_block(0, ZERO_DIGEST, [first, second])
    state, flags = apply_block(WorldState(), block)
    assert flags == (True, False)
    assert get_state(state, "k") == b"v"
    assert state.entries["k"].version == 1


def test_read_only_tx_is_valid_and_leaves_state_alone():
    setup = tx(key="k", reads=[("k", 0)])
    block0 = make_block(0, ZERO_DIGEST, [setup])
    state, _ = apply_block(WorldState(), block0)
    read_only = make_transaction(
        channel="ch", chaincode=("cc", 1), function="get", args=[],
        read_set=[("k", 1)], write_set=[], timestamp=1,
    )
    block1 = make_block(1, hash_block(block0.header), [read_only])
    state2, flags = apply_block(state, block1)
    assert flags == (True,)
    assert state2.entries == state.entries


def test_stale_read_invalidated():
    block = make_block(0, ZERO_DIGEST, [tx(key="k", reads=[("k", 3)])])
    _, flags = apply_block(WorldState(), block)
    assert flags == (False,)


def test_get_state_raises_for_absent_key():
    with pytest.raises(StateKeyNotFound):
        get_state(WorldState(), "nope")


def test_history_three_writes_in_block_order():
    chain, state = (), WorldState()
    for i in range(3):
        block = make_block(i, chain_tip_hash(chain), [tx(key="k", value=f"v{i}".encode(), reads=[("k", i)])])
        chain, state, _ = commit_block(chain, state, block)
    history = get_history(chain, "k")
    assert [h[0] for h in history] == [0, 1, 2]
    assert [h[2] for h in history] == [b"v0", b"v1", b"v2"]
    assert get_state(state, "k") == history[-1][2]


def test_invalid_tx_absent_from_history():
    good = tx(key="k", reads=[("k", 0)])
    conflicting = tx(key="k", value=b"loser", reads=[("k", 0)])
    chain, state, _ = commit_block((), WorldState(), make_block(0, ZERO_DIGEST, [good, conflicting]))
    history = get_history(chain, "k")
    assert len(history) == 1
    assert history[0][2] == b"v"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63), st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_block_encoding_round_trip(number, prev, digest):
    block = Block(BlockHeader(number, prev, digest), (tx(), tx(key="j")))
    assert decode_block(block.encode()).header == block.header
    assert decode_block(block.encode()).transactions == block.transactions


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 3)), max_size=12))
def test_replay_is_deterministic(spec):
    """Random read-version guesses; two replays agree flag-for-flag."""
    txs = [
        make_transaction(
            channel="ch", chaincode=("cc", 1), function="put",
            args=[], read_set=[(key, guess)], write_set=[(key, bytes([i]))], timestamp=i,
        )
        for i, (key, guess) in enumerate(spec)
    ]
    if not txs:
        return
    block = make_block(0, ZERO_DIGEST, txs)
    state_a, flags_a = apply_block(WorldState(), block)
    state_b, flags_b = apply_block(WorldState(), block)
    assert flags_a == flags_b
    assert state_a.entries == state_b.entries
    # Version monotonicity: per-key versions are 1..n with no gaps.
    for key, entry in state_a.entries.items():
        writes = sum(1 for t, f in zip(txs, flags_a) if f and any(k == key for k, _ in t.write_set))
        assert entry.version == writes


def test_export_import_bit_exact():
    chain, _ = build_chain(5)
    content = export_chain(chain)
    imported = import_chain(content)
    assert export_chain(imported) == content
    assert verify_chain(imported).ok
    # Flags recomputed on import match the committed ones.
    assert [b.validity_flags for b in imported] == [b.validity_flags for b in chain]


def test_signature_layer_catches_wrong_key():
    from tests.conftest import make_identity, make_msp

    msp = make_msp("FARM")
    ident = make_identity(msp, "writer", "client")
    signed = make_transaction(
        channel="ch", chaincode=("cc", 1), function="put", args=[],
        read_set=[], write_set=[("k", b"v")], submitter=ident, timestamp=0,
    )
    block = make_block(0, ZERO_DIGEST, [signed])
    directory = {("FARM", ident.serial): ident.cert.subject.public_key}
    assert verify_chain((block,), directory).ok
    wrong = {("FARM", ident.serial): make_identity(msp, "other", "client").cert.subject.public_key}
    assert not verify_chain((block,), wrong).ok
    assert not verify_chain((block,), {}).ok


def test_replay_chain_recommits_identically():
    chain, state = build_chain(8)
    replayed_state, replayed_chain = replay_chain(chain)
    assert replayed_state.entries == state.entries
    assert [b.validity_flags for b in replayed_chain] == [b.validity_flags for b in chain]


def test_parse_chain_file_rejects_bad_hex():
    from foodtrace.ledger import ChainParseError

    with pytest.raises(ChainParseError):
        parse_chain_file("zz-not-hex\n")
