import pytest

from foodtrace.codec import sha256
from foodtrace.identity import (
    Certificate,
    EmptyNameError,
    OrgMsp,
    PrincipalInfo,
    UnknownOrgError,
    ValidationResult,
    issue_certificate,
    new_signing_key,
    public_bytes,
    register_principal,
    revoke_certificate,
    validate_certificate,
)
from tests.conftest import make_msp


def vet_info(org="FARM", cn="vet-01"):
    key = new_signing_key(b"vet")
    return PrincipalInfo(cn, org, "client", public_bytes(key))


def test_register_passes_info_through(farm_msp):
    pending = register_principal(farm_msp, vet_info())
    assert pending.info == vet_info()


def test_register_rejects_empty_name(farm_msp):
    with pytest.raises(EmptyNameError):
        register_principal(farm_msp, vet_info(cn=""))


def test_register_rejects_foreign_org(farm_msp):
    with pytest.raises(UnknownOrgError):
        register_principal(farm_msp, vet_info(org="MFG"))


def test_first_issuance_gets_serial_one(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    assert cert.serial == 1


def test_serials_are_distinct_and_increasing(farm_msp):
    pending = register_principal(farm_msp, vet_info())
    serials = [issue_certificate(farm_msp, pending, now=0).serial for _ in range(5)]
    assert serials == [1, 2, 3, 4, 5]


def test_issued_certificate_validates_right_after_issuance(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=100)
    assert validate_certificate(cert, farm_msp, now=101) is ValidationResult.OK


def test_window_boundaries(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=100, validity_ms=50)
    assert validate_certificate(cert, farm_msp, 100) is ValidationResult.OK
    assert validate_certificate(cert, farm_msp, 150) is ValidationResult.OK
    assert validate_certificate(cert, farm_msp, 151) is ValidationResult.EXPIRED
    assert validate_certificate(cert, farm_msp, 99) is ValidationResult.NOT_YET_VALID


def test_every_signature_byte_flip_is_rejected(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    for i in range(len(cert.signature)):
        mutated = cert.signature[:i] + bytes([cert.signature[i] ^ 0xFF]) + cert.signature[i + 1 :]
        bad = Certificate(cert.serial, cert.subject, cert.issuer_org, cert.not_before, cert.not_after, mutated)
        assert validate_certificate(bad, farm_msp, 1) is ValidationResult.BAD_SIGNATURE


def test_every_encoded_byte_flip_is_rejected(farm_msp):
    """Mutate-and-check over the whole canonical certificate: any single-byte
    flip must fail decoding or fail validation."""
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    raw = cert.encode()
    for i in range(len(raw)):
        mutated = raw[:i] + bytes([raw[i] ^ 0xFF]) + raw[i + 1 :]
        try:
            bad = Certificate.decode(mutated)
        except Exception:
            continue
        assert validate_certificate(bad, farm_msp, 1) is not ValidationResult.OK, f"byte {i}"


def test_certificate_encoding_round_trip(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    assert Certificate.decode(cert.encode()) == cert


def test_revocation_is_idempotent_and_detected(farm_msp):
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    revoke_certificate(farm_msp, cert.serial)
    first = set(farm_msp.revoked)
    revoke_certificate(farm_msp, cert.serial)
    assert farm_msp.revoked == first
    assert validate_certificate(cert, farm_msp, 1) is ValidationResult.REVOKED


def test_revoked_serials_are_never_issued(farm_msp):
    """Exhaustive scan: blacklisting serials ahead of the counter skips them."""
    for pre_revoked in (2, 3, 7):
        revoke_certificate(farm_msp, pre_revoked)
    pending = register_principal(farm_msp, vet_info())
    issued = [issue_certificate(farm_msp, pending, now=0).serial for _ in range(8)]
    assert issued == sorted(issued)
    assert len(set(issued)) == len(issued)
    assert not set(issued) & {2, 3, 7}


def test_validation_against_foreign_msp_never_ok(farm_msp):
    other = make_msp("MFG")
    cert = issue_certificate(farm_msp, register_principal(farm_msp, vet_info()), now=0)
    assert validate_certificate(cert, other, 1) in (
        ValidationResult.WRONG_ISSUER,
        ValidationResult.BAD_SIGNATURE,
    )


def test_root_certificate_is_self_signed(farm_msp):
    assert validate_certificate(farm_msp.root_cert, farm_msp, 1) is ValidationResult.OK
    assert farm_msp.root_cert.subject.org_id == farm_msp.org_id


def test_issuance_is_deterministic():
    a = issue_certificate(make_msp("FARM"), register_principal(make_msp("FARM"), vet_info()), now=5)
    b = issue_certificate(make_msp("FARM"), register_principal(make_msp("FARM"), vet_info()), now=5)
    assert a.encode() == b.encode()


def test_admin_issuance_registers_admin_serial(farm_msp):
    key = new_signing_key(b"adm")
    info = PrincipalInfo("boss", "FARM", "admin", public_bytes(key))
    cert = issue_certificate(farm_msp, register_principal(farm_msp, info), now=0)
    assert cert.serial in farm_msp.admins
