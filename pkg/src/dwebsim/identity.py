"""Content fingerprints, node addresses, key pairs and the certificate authority.

Object identifiers are the SHA-256 digest of the payload concatenated with the
canonical metadata encoding, so the identifier doubles as an integrity check.
Signatures are Ed25519 (deterministic, with seedable key generation so whole
scenarios replay bit-for-bit).
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from . import wire

DIGEST_SIZE = 32
MAC_SIZE = 6
SIGNATURE_SIZE = 64

# First address byte encodes the node kind; keeps exported edge lists
# re-ingestable without a separate role table.
GATEWAY_TAG = 0x02
EDGE_TAG = 0x0E


def digest(data: bytes) -> bytes:
    """The scenario-wide 32-byte collision-resistant digest."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True, order=True)
class MacAddress:
    """6-byte flat node address, totally ordered lexicographically."""

    raw: bytes

    def __post_init__(self):
        if len(self.raw) != MAC_SIZE:
            raise ValueError(f"address must be {MAC_SIZE} bytes, got {len(self.raw)}")

    @classmethod
    def from_index(cls, tag: int, index: int) -> "MacAddress":
        return cls(bytes([tag, 0]) + index.to_bytes(4, "big"))

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        parts = text.split(":")
        if len(parts) != MAC_SIZE:
            raise ValueError(f"bad address {text!r}")
        return cls(bytes(int(p, 16) for p in parts))

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.raw)

    def __repr__(self) -> str:
        return f"MacAddress({self})"


AUTHORITY_MAC = MacAddress(b"\x00" * MAC_SIZE)


def gateway_mac(index: int) -> MacAddress:
    return MacAddress.from_index(GATEWAY_TAG, index)


def edge_mac(index: int) -> MacAddress:
    return MacAddress.from_index(EDGE_TAG, index)


@dataclass(frozen=True)
class Oid:
    """32-byte object identifier; equality is byte equality."""

    digest: bytes

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError("object identifier must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __repr__(self) -> str:
        return f"Oid({self.digest.hex()[:12]}…)"


@dataclass(frozen=True)
class Metadata:
    """Object metadata; the canonical encoding is injective and deterministic."""

    name: str
    keywords: tuple[str, ...]
    publisher: MacAddress
    created_at: int
    size_bytes: int

    def __post_init__(self):
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")
        if self.created_at < 0:
            raise ValueError("created_at must be non-negative")
        if not isinstance(self.keywords, tuple):
            object.__setattr__(self, "keywords", tuple(self.keywords))

    def canonical_bytes(self) -> bytes:
        parts = [wire.text(self.name), wire.u32(len(self.keywords))]
        parts.extend(wire.text(k) for k in self.keywords)
        parts.append(self.publisher.raw)
        parts.append(wire.u64(self.created_at))
        parts.append(wire.u64(self.size_bytes))
        return b"".join(parts)

    @classmethod
    def decode(cls, r: wire.Reader) -> "Metadata":
        name = r.text()
        keywords = tuple(r.text() for _ in range(r.u32()))
        publisher = MacAddress(r.take(MAC_SIZE))
        created_at = r.u64()
        size_bytes = r.u64()
        return cls(name, keywords, publisher, created_at, size_bytes)


def compute_oid(payload: bytes, metadata: Metadata) -> Oid:
    """Fingerprint of payload followed by canonical metadata; pure and deterministic."""
    if metadata.size_bytes != len(payload):
        raise ValueError(
            f"metadata.size_bytes={metadata.size_bytes} does not match payload length {len(payload)}"
        )
    return Oid(digest(payload + metadata.canonical_bytes()))


def verify_object(payload: bytes, metadata: Metadata, claimed: Oid) -> bool:
    """True iff the (payload, metadata) pair fingerprints to the claimed identifier."""
    if metadata.size_bytes != len(payload):
        return False
    return digest(payload + metadata.canonical_bytes()) == claimed.digest


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 key pair; the 32-byte seed doubles as the secret key encoding."""

    public_key: bytes
    secret_seed: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError("key seed must be 32 bytes")
        private = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
        public = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(public, seed)

    def sign(self, message: bytes) -> bytes:
        private = ed25519.Ed25519PrivateKey.from_private_bytes(self.secret_seed)
        return private.sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE or len(public_key) != 32:
        return False
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except InvalidSignature:
        return False


@dataclass(frozen=True)
class Certificate:
    """Binds a gateway address to a public key; serials increase per subject."""

    subject: MacAddress
    public_key: bytes
    issuer: str
    authority_signature: bytes
    serial: int

    def signed_payload(self) -> bytes:
        # subject, key and serial are fixed-width, so plain concatenation is injective
        return self.subject.raw + self.public_key + wire.u64(self.serial)

    def verify(self, authority_public_key: bytes) -> bool:
        return verify_signature(authority_public_key, self.authority_signature, self.signed_payload())

    def encode(self) -> bytes:
        return (
            self.subject.raw
            + wire.blob(self.public_key)
            + wire.text(self.issuer)
            + wire.u64(self.serial)
            + wire.blob(self.authority_signature)
        )

    @classmethod
    def decode(cls, r: wire.Reader) -> "Certificate":
        subject = MacAddress(r.take(MAC_SIZE))
        public_key = r.blob()
        issuer = r.text()
        serial = r.u64()
        signature = r.blob()
        return cls(subject, public_key, issuer, signature, serial)


class Authority:
    """In-simulation certification authority; tracks per-subject serials."""

    def __init__(self, name: str, keys: KeyPair, seed: int = 0):
        self.name = name
        self.keys = keys
        self._serials: dict[MacAddress, int] = {}
        self._rng = random.Random(seed)

    @classmethod
    def from_seed(cls, seed: int, name: str = "community-ca") -> "Authority":
        key_seed = digest(b"authority-key" + wire.u64(seed))
        return cls(name, KeyPair.from_seed(key_seed), seed)

    @property
    def public_key(self) -> bytes:
        return self.keys.public_key

    def next_serial(self, subject: MacAddress) -> int:
        return self._serials.get(subject, 0) + 1

    def issue(self, subject: MacAddress, public_key: bytes) -> Certificate:
        serial = self.next_serial(subject)
        cert = Certificate(
            subject=subject,
            public_key=public_key,
            issuer=self.name,
            authority_signature=b"",
            serial=serial,
        )
        signature = self.keys.sign(cert.signed_payload())
        cert = Certificate(subject, public_key, self.name, signature, serial)
        self._serials[subject] = serial
        return cert

    def issue_dummy(self, subject: MacAddress) -> Certificate:
        # Fresh key pair whose secret half is dropped on the floor: nobody can
        # ever sign under this certificate again.
        throwaway = KeyPair.from_seed(self._rng.randbytes(32))
        return self.issue(subject, throwaway.public_key)


def issue_certificate(authority: Authority, subject: MacAddress, public_key: bytes) -> Certificate:
    """Authority-signed certificate with the next serial for this subject."""
    return authority.issue(subject, public_key)


def make_dummy_certificate(authority: Authority, subject: MacAddress) -> Certificate:
    """Revocation certificate: valid, but its secret key was never stored."""
    return authority.issue_dummy(subject)


def derive_node_keys(scenario_seed: int, mac: MacAddress) -> KeyPair:
    """Deterministic per-node key pair for reproducible scenarios."""
    return KeyPair.from_seed(digest(b"node-key" + wire.u64(scenario_seed) + mac.raw))
