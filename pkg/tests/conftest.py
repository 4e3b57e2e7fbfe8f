"""Shared fixtures: deterministic MSPs, identities, and channel scaffolding."""

import pytest

from foodtrace.consortium import ChannelConfig, Consortium, majority
from foodtrace.identity import (
    Identity,
    OrgMsp,
    PrincipalInfo,
    issue_certificate,
    new_signing_key,
    public_bytes,
    register_principal,
)

ORGS = ("FARM", "MFG", "DIST")


def make_msp(org: str, seed: bytes = b"test") -> OrgMsp:
    return OrgMsp.create(org, seed + org.encode())


def make_identity(msp: OrgMsp, cn: str, role: str, now: int = 0, validity_ms: int = 10**9) -> Identity:
    key = new_signing_key(b"key:" + msp.org_id.encode() + cn.encode())
    info = PrincipalInfo(cn, msp.org_id, role, public_bytes(key))
    cert = issue_certificate(msp, register_principal(msp, info), now, validity_ms)
    return Identity(cert, key)


@pytest.fixture
def farm_msp():
    return make_msp("FARM")


@pytest.fixture
def consortium():
    con = Consortium({org: make_msp(org) for org in ORGS})
    con.admins = {org: make_identity(con.msps[org], f"{org.lower()}-admin", "admin") for org in ORGS}
    return con


def admin_sigs(consortium, *orgs):
    return {(org, consortium.admins[org].serial) for org in orgs}


@pytest.fixture
def channel(consortium):
    from foodtrace.consortium import create_channel

    config = ChannelConfig(
        name="supply",
        member_orgs=frozenset({"FARM", "MFG"}),
        admin_policy=majority({"FARM", "MFG"}),
        endorsement_policy=majority({"FARM", "MFG"}),
    )
    return create_channel(consortium, config, admin_sigs(consortium, "FARM", "MFG"))
