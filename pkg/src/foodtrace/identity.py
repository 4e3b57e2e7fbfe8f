"""PKI-lite membership service: per-org registration and certification authority.

Certificates are canonical length-prefixed records signed with Ed25519
(deterministic, so identical inputs always yield identical bytes). All
timestamps are logical simulator milliseconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .codec import Reader, lp, sha256, text, u64

DEFAULT_VALIDITY_MS = 10**9

ROLES = ("admin", "peer", "orderer", "client")

ROOT_SERIAL = 0  # reserved for the self-signed MSP root


class IdentityError(Exception):
    pass


class UnknownOrgError(IdentityError):
    pass


class EmptyNameError(IdentityError):
    pass


class ValidationResult(enum.Enum):
    OK = "ok"
    BAD_SIGNATURE = "bad_signature"
    EXPIRED = "expired"
    NOT_YET_VALID = "not_yet_valid"
    REVOKED = "revoked"
    WRONG_ISSUER = "wrong_issuer"


def new_signing_key(seed: bytes) -> Ed25519PrivateKey:
    """Derive an Ed25519 key from arbitrary seed material."""
    return Ed25519PrivateKey.from_private_bytes(sha256(seed))


def public_bytes(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign_digest(key: Ed25519PrivateKey, digest: bytes) -> bytes:
    return key.sign(digest)


def verify_digest(pub: bytes, signature: bytes, digest: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(signature, digest)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class PrincipalInfo:
    common_name: str
    org_id: str
    role: str
    public_key: bytes

    def encode(self) -> bytes:
        return text(self.common_name) + text(self.org_id) + text(self.role) + lp(self.public_key)

    @classmethod
    def decode(cls, r: Reader) -> "PrincipalInfo":
        return cls(r.text(), r.text(), r.text(), r.lp_bytes())


@dataclass(frozen=True)
class PendingRegistration:
    """Output of the registration authority, input to certificate issuance."""

    info: PrincipalInfo


@dataclass(frozen=True)
class Certificate:
    serial: int
    subject: PrincipalInfo
    issuer_org: str
    not_before: int
    not_after: int
    signature: bytes

    def signed_region(self) -> bytes:
        return (
            u64(self.serial)
            + lp(self.subject.encode())
            + text(self.issuer_org)
            + u64(self.not_before)
            + u64(self.not_after)
        )

    def encode(self) -> bytes:
        return self.signed_region() + lp(self.signature)

    @classmethod
    def decode_from(cls, r: Reader) -> "Certificate":
        serial = r.u64()
        subject = PrincipalInfo.decode(Reader(r.lp_bytes()))
        issuer_org = r.text()
        not_before = r.u64()
        not_after = r.u64()
        signature = r.lp_bytes()
        return cls(serial, subject, issuer_org, not_before, not_after, signature)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        r = Reader(data)
        cert = cls.decode_from(r)
        r.done()
        return cert


@dataclass(frozen=True)
class Identity:
    """A certificate together with its private signing key."""

    cert: Certificate
    key: Ed25519PrivateKey

    @property
    def org(self) -> str:
        return self.cert.subject.org_id

    @property
    def serial(self) -> int:
        return self.cert.serial

    def sign(self, digest: bytes) -> bytes:
        return sign_digest(self.key, digest)


class OrgMsp:
    """Membership service provider: the org's CA plus admin and revocation sets.

    Mutable state (serial counter, revocations) is only touched inside the
    single-threaded simulation step.
    """

    def __init__(self, org_id: str, root_key: Ed25519PrivateKey | None, root_cert: Certificate):
        # root_key is None for verification-only MSPs rebuilt from a chain.
        self.org_id = org_id
        self.root_cert = root_cert
        self.admins: set[int] = set()
        self.revoked: set[int] = set()
        self._root_key = root_key
        self._next_serial = ROOT_SERIAL + 1

    @classmethod
    def create(cls, org_id: str, key_seed: bytes, now: int = 0, validity_ms: int = DEFAULT_VALIDITY_MS) -> "OrgMsp":
        root_key = new_signing_key(key_seed)
        info = PrincipalInfo(f"{org_id}-root", org_id, "admin", public_bytes(root_key))
        unsigned = Certificate(ROOT_SERIAL, info, org_id, now, now + validity_ms, b"")
        signature = sign_digest(root_key, sha256(unsigned.signed_region()))
        root_cert = Certificate(ROOT_SERIAL, info, org_id, now, now + validity_ms, signature)
        return cls(org_id, root_key, root_cert)

    @property
    def root_public_key(self) -> bytes:
        return self.root_cert.subject.public_key

    def root_identity(self) -> Identity:
        if self._root_key is None:
            raise IdentityError(f"MSP {self.org_id} is verification-only")
        return Identity(self.root_cert, self._root_key)

    def allocate_serial(self) -> int:
        # Revoked serials are never issued, even if revoked before issuance.
        serial = self._next_serial
        while serial in self.revoked:
            serial += 1
        self._next_serial = serial + 1
        return serial


def register_principal(msp: OrgMsp, info: PrincipalInfo) -> PendingRegistration:
    """Registration authority: field checks, then hand off for issuance."""
    if not info.common_name:
        raise EmptyNameError("common_name must be non-empty")
    if info.org_id != msp.org_id:
        raise UnknownOrgError(f"org {info.org_id!r} not served by MSP {msp.org_id!r}")
    if info.role not in ROLES:
        raise IdentityError(f"unknown role {info.role!r}")
    return PendingRegistration(info)


def issue_certificate(
    msp: OrgMsp,
    pending: PendingRegistration,
    now: int,
    validity_ms: int = DEFAULT_VALIDITY_MS,
) -> Certificate:
    """Certification authority: fresh serial, validity window, root signature."""
    if validity_ms <= 0:
        raise IdentityError("validity_ms must be positive")
    if msp._root_key is None:
        raise IdentityError(f"MSP {msp.org_id} is verification-only")
    serial = msp.allocate_serial()
    unsigned = Certificate(serial, pending.info, msp.org_id, now, now + validity_ms, b"")
    signature = sign_digest(msp._root_key, sha256(unsigned.signed_region()))
    cert = Certificate(serial, pending.info, msp.org_id, now, now + validity_ms, signature)
    if pending.info.role == "admin":
        msp.admins.add(serial)
    return cert


def validate_certificate(cert: Certificate, msp: OrgMsp, now: int) -> ValidationResult:
    if cert.issuer_org != msp.org_id:
        return ValidationResult.WRONG_ISSUER
    if not verify_digest(msp.root_public_key, cert.signature, sha256(cert.signed_region())):
        return ValidationResult.BAD_SIGNATURE
    if cert.serial in msp.revoked:
        return ValidationResult.REVOKED
    if now < cert.not_before:
        return ValidationResult.NOT_YET_VALID
    if now > cert.not_after:
        return ValidationResult.EXPIRED
    return ValidationResult.OK


def revoke_certificate(msp: OrgMsp, serial: int) -> OrgMsp:
    """Record the serial as revoked; idempotent. Unknown serials are blacklisted."""
    msp.revoked.add(serial)
    return msp
