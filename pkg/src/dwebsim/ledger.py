"""Permissioned ledger: signed transactions, round-robin blocks, fork choice, merge.

Only gateways with a committed certificate may originate transactions; blocks
are proposed round-robin by position in certificate-registration order. Chain
weight counts object registrations only, and ties break on the lexicographically
smaller tip digest so every node picks the same winner after a partition heals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import wire
from .identity import (
    AUTHORITY_MAC,
    DIGEST_SIZE,
    MAC_SIZE,
    Certificate,
    KeyPair,
    MacAddress,
    Metadata,
    Oid,
    compute_oid,
    digest,
    verify_signature,
)

GENESIS_PREV = b"\x00" * DIGEST_SIZE
DEFAULT_MAX_TXS_PER_BLOCK = 100


class TxKind(Enum):
    OBJECT_REGISTRATION = 1
    CERTIFICATE_REGISTRATION = 2


class Reject(str, Enum):
    """Reasons a transaction or block is refused."""

    NO_CERTIFICATE = "NoCertificate"
    BAD_SIGNATURE = "BadSignature"
    REVOKED_KEY = "RevokedKey"
    DUPLICATE_OID = "DuplicateOid"
    BAD_AUTHORITY_SIGNATURE = "BadAuthoritySignature"
    STALE_SERIAL = "StaleSerial"
    BAD_LINK = "BadLink"
    BAD_PROPOSER = "BadProposer"
    BAD_TRANSACTION = "BadTransaction"
    BAD_DIGEST = "BadDigest"


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: Reject | None = None
    tx_index: int | None = None
    tx_reason: Reject | None = None

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = Verdict(True)


def reject(reason: Reject, tx_index: int | None = None, tx_reason: Reject | None = None) -> Verdict:
    return Verdict(False, reason, tx_index, tx_reason)


class LedgerError(Exception):
    pass


@dataclass(frozen=True)
class Transaction:
    """Ledger entry: an object registration or a certificate registration.

    The signature covers the canonical body followed by the origin address and
    must verify against the origin's active on-chain certificate.
    """

    kind: TxKind
    origin: MacAddress
    signature: bytes
    oid: Oid | None = None
    metadata: Metadata | None = None
    certificate: Certificate | None = None
    _verified_under: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def body_bytes(self) -> bytes:
        if self.kind is TxKind.OBJECT_REGISTRATION:
            return wire.u8(self.kind.value) + self.oid.digest + self.metadata.canonical_bytes()
        return wire.u8(self.kind.value) + self.certificate.encode()

    def signing_bytes(self) -> bytes:
        return self.body_bytes() + self.origin.raw

    def dedupe_key(self) -> tuple:
        if self.kind is TxKind.OBJECT_REGISTRATION:
            return ("obj", self.oid.digest)
        return ("cert", self.certificate.subject.raw, self.certificate.serial)

    def signature_valid(self, public_key: bytes) -> bool:
        # Same transaction object is validated by every node in a run; memoize
        # per public key so repeated gossip checks cost one dict lookup.
        cached = self._verified_under.get(public_key)
        if cached is None:
            cached = verify_signature(public_key, self.signature, self.signing_bytes())
            self._verified_under[public_key] = cached
        return cached

    def encode(self) -> bytes:
        return self.body_bytes() + self.origin.raw + wire.blob(self.signature)

    @classmethod
    def decode(cls, r: wire.Reader) -> "Transaction":
        kind = TxKind(r.u8())
        if kind is TxKind.OBJECT_REGISTRATION:
            oid = Oid(r.take(DIGEST_SIZE))
            metadata = Metadata.decode(r)
            origin = MacAddress(r.take(MAC_SIZE))
            signature = r.blob()
            return cls(kind, origin, signature, oid=oid, metadata=metadata)
        certificate = Certificate.decode(r)
        origin = MacAddress(r.take(MAC_SIZE))
        signature = r.blob()
        return cls(kind, origin, signature, certificate=certificate)


def make_object_transaction(
    payload: bytes, metadata: Metadata, origin_keys: KeyPair, origin: MacAddress
) -> Transaction:
    """Signed object registration; the identifier is recomputed from the payload."""
    oid = compute_oid(payload, metadata)
    tx = Transaction(TxKind.OBJECT_REGISTRATION, origin, b"", oid=oid, metadata=metadata)
    return Transaction(
        TxKind.OBJECT_REGISTRATION,
        origin,
        origin_keys.sign(tx.signing_bytes()),
        oid=oid,
        metadata=metadata,
    )


def make_certificate_transaction(
    certificate: Certificate, origin_keys: KeyPair, origin: MacAddress
) -> Transaction:
    """Certificate registration originated by a sponsor gateway (or the authority)."""
    tx = Transaction(TxKind.CERTIFICATE_REGISTRATION, origin, b"", certificate=certificate)
    return Transaction(
        TxKind.CERTIFICATE_REGISTRATION,
        origin,
        origin_keys.sign(tx.signing_bytes()),
        certificate=certificate,
    )


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: bytes
    proposer: MacAddress
    transactions: tuple[Transaction, ...]
    block_digest: bytes

    @staticmethod
    def content_bytes(
        height: int, prev_digest: bytes, proposer: MacAddress, transactions: tuple[Transaction, ...]
    ) -> bytes:
        parts = [wire.u64(height), prev_digest, proposer.raw, wire.u32(len(transactions))]
        parts.extend(tx.encode() for tx in transactions)
        return b"".join(parts)

    @classmethod
    def build(
        cls, height: int, prev_digest: bytes, proposer: MacAddress, transactions: tuple[Transaction, ...]
    ) -> "Block":
        content = cls.content_bytes(height, prev_digest, proposer, transactions)
        return cls(height, prev_digest, proposer, transactions, digest(content))

    def digest_valid(self) -> bool:
        content = self.content_bytes(self.height, self.prev_digest, self.proposer, self.transactions)
        return digest(content) == self.block_digest

    def encode(self) -> bytes:
        return (
            wire.u64(self.height)
            + self.prev_digest
            + self.proposer.raw
            + wire.u32(len(self.transactions))
            + b"".join(wire.blob(tx.encode()) for tx in self.transactions)
        )

    @classmethod
    def decode(cls, r: wire.Reader) -> "Block":
        height = r.u64()
        prev_digest = r.take(DIGEST_SIZE)
        proposer = MacAddress(r.take(MAC_SIZE))
        txs = tuple(Transaction.decode(wire.Reader(r.blob())) for _ in range(r.u32()))
        return cls.build(height, prev_digest, proposer, txs)


@dataclass
class CertRecord:
    certificate: Certificate
    registered_by: MacAddress
    height: int


class _LedgerState:
    """Committed-state view maintained incrementally while blocks apply."""

    def __init__(self):
        self.oids: set[bytes] = set()
        self.certs: dict[MacAddress, list[CertRecord]] = {}
        self.registration_order: list[MacAddress] = []
        self.object_count = 0

    def active_record(self, subject: MacAddress) -> CertRecord | None:
        records = self.certs.get(subject)
        return records[-1] if records else None

    def is_revoked(self, subject: MacAddress) -> bool:
        # A later-serial certificate registered on the subject's behalf by
        # someone else means the subject no longer holds a usable secret key.
        record = self.active_record(subject)
        if record is None:
            return False
        return record.certificate.serial >= 2 and record.registered_by != subject

    def apply(self, tx: Transaction, height: int) -> None:
        if tx.kind is TxKind.OBJECT_REGISTRATION:
            self.oids.add(tx.oid.digest)
            self.object_count += 1
        else:
            subject = tx.certificate.subject
            records = self.certs.setdefault(subject, [])
            if not records:
                self.registration_order.append(subject)
            records.append(CertRecord(tx.certificate, tx.origin, height))


def _validate_tx_against_state(
    tx: Transaction, state: _LedgerState, authority_public_key: bytes
) -> Verdict:
    if tx.kind is TxKind.CERTIFICATE_REGISTRATION and tx.origin == AUTHORITY_MAC:
        # Bootstrap path: the authority itself vouches, outside the gateway set.
        if not tx.certificate.verify(authority_public_key):
            return reject(Reject.BAD_AUTHORITY_SIGNATURE)
        if not tx.signature_valid(authority_public_key):
            return reject(Reject.BAD_SIGNATURE)
    else:
        record = state.active_record(tx.origin)
        if record is None:
            return reject(Reject.NO_CERTIFICATE)
        if not tx.signature_valid(record.certificate.public_key):
            # Distinguish a rotated-away key from plain garbage: a signature
            # that verifies under an older certificate means the origin signs
            # with a key that has since been replaced (revocation).
            for old in state.certs[tx.origin][:-1]:
                if tx.signature_valid(old.certificate.public_key):
                    return reject(Reject.REVOKED_KEY)
            return reject(Reject.BAD_SIGNATURE)
        if state.is_revoked(tx.origin):
            return reject(Reject.REVOKED_KEY)
    if tx.kind is TxKind.OBJECT_REGISTRATION:
        if tx.oid.digest in state.oids:
            return reject(Reject.DUPLICATE_OID)
    else:
        if not tx.certificate.verify(authority_public_key):
            return reject(Reject.BAD_AUTHORITY_SIGNATURE)
        existing = state.active_record(tx.certificate.subject)
        if existing is not None and tx.certificate.serial <= existing.certificate.serial:
            return reject(Reject.STALE_SERIAL)
    return ACCEPT


class Chain:
    """Append-only hash-linked block list plus derived committed state."""

    def __init__(self, genesis: Block, authority_public_key: bytes):
        self.authority_public_key = authority_public_key
        self.blocks: list[Block] = []
        self._state = _LedgerState()
        verdict = self._validate_genesis(genesis)
        if not verdict:
            raise LedgerError(f"invalid genesis: {verdict.reason}")
        self._apply(genesis)

    def _validate_genesis(self, genesis: Block) -> Verdict:
        if genesis.height != 0 or genesis.prev_digest != GENESIS_PREV:
            return reject(Reject.BAD_LINK)
        if not genesis.digest_valid():
            return reject(Reject.BAD_DIGEST)
        for i, tx in enumerate(genesis.transactions):
            if tx.kind is not TxKind.CERTIFICATE_REGISTRATION or tx.origin != AUTHORITY_MAC:
                return reject(Reject.BAD_TRANSACTION, i, Reject.BAD_SIGNATURE)
            verdict = _validate_tx_against_state(tx, self._state, self.authority_public_key)
            if not verdict:
                return reject(Reject.BAD_TRANSACTION, i, verdict.reason)
        return ACCEPT

    def _apply(self, block: Block) -> None:
        for tx in block.transactions:
            self._state.apply(tx, block.height)
        self.blocks.append(block)

    # -- queries -----------------------------------------------------------

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def next_height(self) -> int:
        return len(self.blocks)

    def has_object(self, oid: Oid) -> bool:
        return oid.digest in self._state.oids

    def object_count(self) -> int:
        return self._state.object_count

    def committed_keys(self) -> set[tuple]:
        keys = set()
        for block in self.blocks:
            for tx in block.transactions:
                keys.add(tx.dedupe_key())
        return keys

    def active_certificate(self, subject: MacAddress) -> Certificate | None:
        record = self._state.active_record(subject)
        return record.certificate if record else None

    def is_revoked(self, subject: MacAddress) -> bool:
        return self._state.is_revoked(subject)

    def schedule_order(self) -> list[MacAddress]:
        """Registered, non-revoked gateways in certificate-registration order."""
        return [m for m in self._state.registration_order if not self._state.is_revoked(m)]

    def object_transactions(self):
        for block in self.blocks:
            for tx in block.transactions:
                if tx.kind is TxKind.OBJECT_REGISTRATION:
                    yield tx

    # -- growth ------------------------------------------------------------

    def append(self, block: Block, active_set: list[MacAddress] | None = None) -> None:
        verdict = validate_block(block, self, active_set)
        if not verdict:
            raise LedgerError(
                f"invalid block at height {block.height}: {verdict.reason}"
                + (f" (tx {verdict.tx_index}: {verdict.tx_reason})" if verdict.tx_index is not None else "")
            )
        self._apply(block)

    # -- serialization -----------------------------------------------------

    MAGIC = b"DWCH"
    VERSION = 1

    def dump(self) -> bytes:
        parts = [self.MAGIC, wire.u32(self.VERSION), wire.blob(self.authority_public_key)]
        parts.append(wire.u32(len(self.blocks)))
        parts.extend(wire.blob(b.encode()) for b in self.blocks)
        return b"".join(parts)

    @classmethod
    def load(cls, data: bytes, expected_authority: bytes | None = None) -> "Chain":
        r = wire.Reader(data)
        if r.take(4) != cls.MAGIC:
            raise LedgerError("not a chain stream")
        if r.u32() != cls.VERSION:
            raise LedgerError("unsupported chain stream version")
        authority = r.blob()
        if expected_authority is not None and authority != expected_authority:
            raise LedgerError("chain stream signed under a different authority")
        count = r.u32()
        if count == 0:
            raise LedgerError("empty chain stream")
        blocks = [Block.decode(wire.Reader(r.blob())) for _ in range(count)]
        if not r.eof():
            raise LedgerError("trailing bytes in chain stream")
        chain = cls(blocks[0], authority)
        for block in blocks[1:]:
            chain.append(block)
        return chain


def make_genesis(authority, registrations: list[tuple[MacAddress, bytes]]) -> Block:
    """Bootstrap block carrying authority-signed certificates for the founders."""
    txs = []
    for mac, public_key in sorted(registrations):
        cert = authority.issue(mac, public_key)
        txs.append(make_certificate_transaction(cert, authority.keys, AUTHORITY_MAC))
    return Block.build(0, GENESIS_PREV, AUTHORITY_MAC, tuple(txs))


def active_certificate(chain: Chain, subject: MacAddress) -> Certificate | None:
    """Highest-serial certificate committed for this subject, if any."""
    return chain.active_certificate(subject)


def validate_transaction(tx: Transaction, chain: Chain) -> Verdict:
    """Accept iff the signature verifies under the origin's active certificate
    and the registration-specific rules hold (no duplicate object, authority
    signature and strictly increasing serial for certificates)."""
    if len(tx.signature) == 0:
        return reject(Reject.BAD_SIGNATURE)
    return _validate_tx_against_state(tx, chain._state, chain.authority_public_key)


def next_proposer(chain: Chain, active_set: list[MacAddress]) -> MacAddress:
    if not active_set:
        raise LedgerError("empty active set")
    return active_set[chain.next_height % len(active_set)]


class PendingPool:
    """Validated-but-uncommitted transactions, oldest first, deduped by key."""

    def __init__(self):
        self._txs: dict[tuple, Transaction] = {}

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, key: tuple) -> bool:
        return key in self._txs

    def add(self, tx: Transaction) -> bool:
        key = tx.dedupe_key()
        if key in self._txs:
            return False
        self._txs[key] = tx
        return True

    def oldest(self, limit: int) -> list[Transaction]:
        out = []
        for tx in self._txs.values():
            if len(out) == limit:
                break
            out.append(tx)
        return out

    def transactions(self) -> list[Transaction]:
        return list(self._txs.values())

    def remove_committed(self, block: Block) -> None:
        for tx in block.transactions:
            self._txs.pop(tx.dedupe_key(), None)

    def drop_invalid(self, chain: Chain) -> list[Transaction]:
        dropped = [tx for tx in self._txs.values() if not validate_transaction(tx, chain)]
        for tx in dropped:
            del self._txs[tx.dedupe_key()]
        return dropped


def propose_block(
    chain: Chain,
    pool: PendingPool,
    proposer: MacAddress,
    max_txs: int = DEFAULT_MAX_TXS_PER_BLOCK,
) -> Block | None:
    """Package the oldest still-valid pending transactions; None if none qualify.

    Transactions are validated sequentially against the chain state as the
    block accumulates, so an in-block certificate registration can authorize a
    later transaction in the same block and duplicate objects cannot co-commit.
    """
    state = _clone_state(chain._state)
    packed = []
    for tx in pool.transactions():
        if len(packed) == max_txs:
            break
        if _validate_tx_against_state(tx, state, chain.authority_public_key):
            state.apply(tx, chain.next_height)
            packed.append(tx)
    if not packed:
        return None
    return Block.build(chain.next_height, chain.tip.block_digest, proposer, tuple(packed))


def _clone_state(state: _LedgerState) -> _LedgerState:
    clone = _LedgerState()
    clone.oids = set(state.oids)
    clone.certs = {mac: list(records) for mac, records in state.certs.items()}
    clone.registration_order = list(state.registration_order)
    clone.object_count = state.object_count
    return clone


def validate_block(block: Block, chain: Chain, active_set: list[MacAddress] | None = None) -> Verdict:
    """Full validation against the chain tip.

    With an active set the proposer must match the round-robin schedule; with
    None (historical replay during sync/merge, where reachable sets are not
    reconstructible) the proposer need only be a registered, non-revoked
    gateway.
    """
    if block.height != chain.next_height or block.prev_digest != chain.tip.block_digest:
        return reject(Reject.BAD_LINK)
    if not block.digest_valid():
        return reject(Reject.BAD_DIGEST)
    if active_set is not None:
        if block.proposer != next_proposer(chain, active_set):
            return reject(Reject.BAD_PROPOSER)
    else:
        if block.proposer not in chain.schedule_order():
            return reject(Reject.BAD_PROPOSER)
    state = _clone_state(chain._state)
    for i, tx in enumerate(block.transactions):
        if len(tx.signature) == 0:
            return reject(Reject.BAD_TRANSACTION, i, Reject.BAD_SIGNATURE)
        verdict = _validate_tx_against_state(tx, state, chain.authority_public_key)
        if not verdict:
            return reject(Reject.BAD_TRANSACTION, i, verdict.reason)
        state.apply(tx, block.height)
    return ACCEPT


def chain_weight(chain: Chain) -> int:
    """Number of committed object registrations; certificates do not count."""
    return chain.object_count()


def select_chain(a: Chain, b: Chain) -> Chain:
    """Heavier chain wins; equal weights break on the smaller tip digest."""
    wa, wb = chain_weight(a), chain_weight(b)
    if wa != wb:
        return a if wa > wb else b
    if a.tip.block_digest <= b.tip.block_digest:
        return a
    return b


def merge_after_partition(local: Chain, winner: Chain) -> tuple[Chain, list[Transaction]]:
    """Adopt the winner; return local commits missing from it for rebroadcast."""
    winner_keys = winner.committed_keys()
    rebroadcast = []
    seen = set()
    for block in local.blocks:
        for tx in block.transactions:
            key = tx.dedupe_key()
            if key not in winner_keys and key not in seen:
                seen.add(key)
                rebroadcast.append(tx)
    return winner, rebroadcast
