"""Hash-chained blocks over a versioned key-value world state.

Tamper evidence is byte-level: every serialized block byte is covered
either by the header hash link or by per-transaction id recomputation,
so any single-byte mutation of an exported chain is detectable from the
file alone. Validity flags are derived at commit time and are not part
of the serialized block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .codec import DIGEST_SIZE, ZERO_DIGEST, DecodeError, Reader, lp, sha256, text, u32, u64
from .identity import Identity, verify_digest


class LedgerError(Exception):
    pass


class BadNumberError(LedgerError):
    pass


class BadPrevHashError(LedgerError):
    pass


class EmptyBlockError(LedgerError):
    pass


class StateKeyNotFound(LedgerError):
    pass


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    channel: str
    chaincode: tuple[str, int]
    function: str
    args: tuple[bytes, ...]
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    submitter_org: str
    submitter_serial: int
    timestamp: int
    signature: bytes

    def body_bytes(self) -> bytes:
        """Canonical serialization of everything the submitter signs."""
        out = [
            text(self.channel),
            text(self.chaincode[0]),
            u64(self.chaincode[1]),
            text(self.function),
            u32(len(self.args)),
        ]
        out.extend(lp(a) for a in self.args)
        out.append(u32(len(self.read_set)))
        for key, version in self.read_set:
            out.append(text(key))
            out.append(u64(version))
        out.append(u32(len(self.write_set)))
        for key, value in self.write_set:
            out.append(text(key))
            out.append(lp(value))
        out.append(text(self.submitter_org))
        out.append(u64(self.submitter_serial))
        out.append(u64(self.timestamp))
        return b"".join(out)

    def encode(self) -> bytes:
        return self.tx_id + self.body_bytes() + lp(self.signature)

    @classmethod
    def decode_from(cls, r: Reader) -> "Transaction":
        tx_id = r.digest()
        channel = r.text()
        cc_name = r.text()
        cc_version = r.u64()
        function = r.text()
        args = tuple(r.lp_bytes() for _ in range(r.u32()))
        read_set = tuple((r.text(), r.u64()) for _ in range(r.u32()))
        write_set = tuple((r.text(), r.lp_bytes()) for _ in range(r.u32()))
        submitter_org = r.text()
        submitter_serial = r.u64()
        timestamp = r.u64()
        signature = r.lp_bytes()
        return cls(
            tx_id,
            channel,
            (cc_name, cc_version),
            function,
            args,
            read_set,
            write_set,
            submitter_org,
            submitter_serial,
            timestamp,
            signature,
        )


def make_transaction(
    channel: str,
    chaincode: tuple[str, int],
    function: str,
    args: Sequence[bytes],
    read_set: Sequence[tuple[str, int]],
    write_set: Sequence[tuple[str, bytes]],
    submitter: Optional[Identity] = None,
    timestamp: int = 0,
) -> Transaction:
    """Build, sign, and id a transaction. Unsigned when no submitter is given."""
    if len({k for k, _ in read_set}) != len(read_set):
        raise LedgerError("read_set keys must be distinct")
    if len({k for k, _ in write_set}) != len(write_set):
        raise LedgerError("write_set keys must be distinct")
    tx = Transaction(
        tx_id=b"",
        channel=channel,
        chaincode=(chaincode[0], chaincode[1]),
        function=function,
        args=tuple(bytes(a) for a in args),
        read_set=tuple((k, int(v)) for k, v in read_set),
        write_set=tuple((k, bytes(v)) for k, v in write_set),
        submitter_org=submitter.org if submitter else "",
        submitter_serial=submitter.serial if submitter else 0,
        timestamp=timestamp,
        signature=b"",
    )
    body = tx.body_bytes()
    signature = submitter.sign(sha256(body)) if submitter else b""
    tx = replace(tx, signature=signature)
    return replace(tx, tx_id=sha256(body + lp(signature)))


@dataclass(frozen=True)
class BlockHeader:
    number: int
    prev_hash: bytes
    tx_digest: bytes

    def encode(self) -> bytes:
        return u64(self.number) + self.prev_hash + self.tx_digest


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    validity_flags: tuple[bool, ...] = ()

    def encode(self) -> bytes:
        out = [self.header.encode(), u32(len(self.transactions))]
        out.extend(lp(tx.encode()) for tx in self.transactions)
        return b"".join(out)


def hash_block(header: BlockHeader) -> bytes:
    """Digest of number || prev_hash || tx_digest."""
    return sha256(header.encode())


def tx_digest_of(transactions: Sequence[Transaction]) -> bytes:
    return sha256(b"".join(tx.tx_id for tx in transactions))


def make_block(number: int, prev_hash: bytes, transactions: Sequence[Transaction]) -> Block:
    if not transactions:
        raise EmptyBlockError("a block must carry at least one transaction")
    txs = tuple(transactions)
    return Block(BlockHeader(number, prev_hash, tx_digest_of(txs)), txs)


def decode_block(data: bytes) -> Block:
    r = Reader(data)
    number = r.u64()
    prev_hash = r.digest()
    tx_digest = r.digest()
    count = r.u32()
    txs = []
    for _ in range(count):
        tr = Reader(r.lp_bytes())
        txs.append(Transaction.decode_from(tr))
        tr.done()
    r.done()
    return Block(BlockHeader(number, prev_hash, tx_digest), tuple(txs))


Chain = tuple[Block, ...]


def chain_tip_hash(chain: Chain) -> bytes:
    return hash_block(chain[-1].header) if chain else ZERO_DIGEST


def append_block(chain: Chain, block: Block) -> Chain:
    if not block.transactions:
        raise EmptyBlockError("empty block")
    if block.header.number != len(chain):
        raise BadNumberError(f"expected block {len(chain)}, got {block.header.number}")
    if block.header.prev_hash != chain_tip_hash(chain):
        raise BadPrevHashError(f"prev_hash mismatch at block {block.header.number}")
    return chain + (block,)


@dataclass(frozen=True)
class StateEntry:
    value: bytes
    version: int
    last_tx: bytes


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot; apply_block returns a fresh copy."""

    entries: Mapping[str, StateEntry] = field(default_factory=dict)

    def version_of(self, key: str) -> int:
        entry = self.entries.get(key)
        return entry.version if entry else 0

    def get(self, key: str) -> Optional[StateEntry]:
        return self.entries.get(key)


def get_state(state: WorldState, key: str) -> bytes:
    entry = state.entries.get(key)
    if entry is None:
        raise StateKeyNotFound(key)
    return entry.value


def apply_block(state: WorldState, block: Block) -> tuple[WorldState, tuple[bool, ...]]:
    """MVCC validation in order: a tx is valid iff every read matches the
    current version (absent key reads version 0); valid writes bump versions."""
    entries = dict(state.entries)
    flags = []
    for tx in block.transactions:
        valid = all(
            (entries[k].version if k in entries else 0) == v for k, v in tx.read_set
        )
        if valid:
            for key, value in tx.write_set:
                old = entries.get(key)
                entries[key] = StateEntry(value, (old.version if old else 0) + 1, tx.tx_id)
        flags.append(valid)
    return WorldState(entries), tuple(flags)


def commit_block(chain: Chain, state: WorldState, block: Block) -> tuple[Chain, WorldState, Block]:
    """Validate against the tip, apply, and append with flags set."""
    new_state, flags = apply_block(state, block)
    committed = replace(block, validity_flags=flags)
    return append_block(chain, committed), new_state, committed


def replay_chain(chain: Chain) -> tuple[WorldState, Chain]:
    """Fold apply_block from empty state; returns final state and flagged chain."""
    state = WorldState()
    flagged: Chain = ()
    for block in chain:
        flagged, state, _ = commit_block(flagged, state, block)
    return state, flagged


def get_history(chain: Chain, key: str) -> list[tuple[int, bytes, bytes]]:
    """Committed writes to key, oldest first, as (block number, tx_id, value)."""
    out = []
    for block in chain:
        for tx, valid in zip(block.transactions, block.validity_flags):
            if not valid:
                continue
            for k, value in tx.write_set:
                if k == key:
                    out.append((block.header.number, tx.tx_id, value))
    return out


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    first_bad_block: Optional[int] = None
    reason: Optional[str] = None

    @classmethod
    def bad(cls, index: int, reason: str) -> "VerificationReport":
        return cls(False, index, reason)


KeyDirectory = Mapping[tuple[str, int], bytes]  # (org, serial) -> public key


def verify_raw_chain(
    raw_blocks: Sequence[bytes],
    key_directory: Optional[KeyDirectory] = None,
) -> VerificationReport:
    """Verify hash links, tx digests, and tx ids directly over serialized bytes.

    Signature verification runs only when a key directory is supplied; the
    hash layers alone cover every serialized byte.
    """
    prev_raw_header: Optional[bytes] = None
    for index, raw in enumerate(raw_blocks):
        header_len = 8 + 2 * DIGEST_SIZE
        if len(raw) < header_len:
            return VerificationReport.bad(index, "truncated header")
        raw_header = raw[:header_len]
        number = int.from_bytes(raw_header[:8], "big")
        prev_hash = raw_header[8 : 8 + DIGEST_SIZE]
        tx_digest = raw_header[8 + DIGEST_SIZE :]
        if number != index:
            return VerificationReport.bad(index, f"bad block number {number}")
        expected_prev = sha256(prev_raw_header) if prev_raw_header is not None else ZERO_DIGEST
        if prev_hash != expected_prev:
            return VerificationReport.bad(index, "hash link broken")

        r = Reader(raw[header_len:])
        try:
            count = r.u32()
            if count == 0:
                return VerificationReport.bad(index, "empty block")
            tx_ids = []
            decoded = []
            for _ in range(count):
                raw_tx = r.lp_bytes()
                if len(raw_tx) < DIGEST_SIZE:
                    return VerificationReport.bad(index, "truncated transaction")
                stored_id = raw_tx[:DIGEST_SIZE]
                if sha256(raw_tx[DIGEST_SIZE:]) != stored_id:
                    return VerificationReport.bad(index, "tx_id recomputation failed")
                tx_ids.append(stored_id)
                if key_directory is not None:
                    tr = Reader(raw_tx)
                    decoded.append(Transaction.decode_from(tr))
                    tr.done()
            r.done()
        except DecodeError as exc:
            return VerificationReport.bad(index, f"undecodable block: {exc}")
        if sha256(b"".join(tx_ids)) != tx_digest:
            return VerificationReport.bad(index, "tx_digest mismatch")
        if key_directory is not None:
            for tx in decoded:
                pub = key_directory.get((tx.submitter_org, tx.submitter_serial))
                if pub is None:
                    return VerificationReport.bad(index, "unknown submitter")
                if not verify_digest(pub, tx.signature, sha256(tx.body_bytes())):
                    return VerificationReport.bad(index, "tx signature invalid")
        prev_raw_header = raw_header
    return VerificationReport(True)


def verify_chain(chain: Chain, key_directory: Optional[KeyDirectory] = None) -> VerificationReport:
    return verify_raw_chain([block.encode() for block in chain], key_directory)


def export_chain(chain: Chain) -> str:
    """One hex-encoded canonical block per line."""
    return "".join(block.encode().hex() + "\n" for block in chain)


class ChainParseError(LedgerError):
    """File-level problem (bad hex, truncated line), distinct from verification failure."""


def parse_chain_file(content: str) -> list[bytes]:
    raw_blocks = []
    for lineno, line in enumerate(content.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw_blocks.append(bytes.fromhex(line))
        except ValueError as exc:
            raise ChainParseError(f"line {lineno}: not hex: {exc}") from exc
    return raw_blocks


def decode_raw_chain(raw_blocks: Iterable[bytes]) -> Chain:
    return tuple(decode_block(raw) for raw in raw_blocks)


def import_chain(content: str, replay: bool = True) -> Chain:
    """Parse an exported chain; optionally replay to restore validity flags."""
    chain = decode_raw_chain(parse_chain_file(content))
    if replay:
        _, chain = replay_chain(chain)
    return chain
