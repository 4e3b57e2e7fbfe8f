"""Scenario configuration: TOML files describing a deterministic run.

A scenario declares the consortium (orgs and node counts), the ordering
cluster, the channels with their policies and traceability model, the
ingestion setup, optional event/fault schedule files, and the generated
workload. Identical config plus seed always produces identical runs.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .consortium import TRACEABILITY_MODELS, Policy, any_admin, majority, n_of
from .ordering import OrderingConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class OrgSpec:
    org_id: str
    peers: int = 2
    clients: int = 1


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    members: tuple[str, ...]
    admin_policy: str = "majority"
    endorsement_policy: str = "majority"
    traceability_model: str = "segregation"


@dataclass(frozen=True)
class IngestionSpec:
    period_ms: int = 60_000
    ranges: tuple[tuple[str, Fraction, Fraction], ...] = ()


@dataclass(frozen=True)
class WorkloadSpec:
    animals: int = 6
    organic_fraction: float = 0.5
    packages_per_animal: int = 2
    packages_per_batch: int = 3
    units_per_batch: int = 4
    unit_shipments: int = 4
    registration_spacing_ms: int = 1000
    sensor_readings_per_animal: int = 4
    vet_records_per_animal: int = 1
    scans_per_animal: int = 1
    workload_tick_ms: int = 250
    transport_delay_ms: int = 1000
    producer_org: str = "FARM"
    manufacturer_org: str = "MFG"
    distributor_org: str = "DIST"
    farm_channel: str = "farm"
    market_channel: str = "market"


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 42
    duration_ms: int = 120_000
    orgs: tuple[OrgSpec, ...] = ()
    ordering: OrderingConfig = OrderingConfig()
    consortium_admin_policy: str = "majority"
    channels: tuple[ChannelSpec, ...] = ()
    ingestion: IngestionSpec = IngestionSpec()
    workload: WorkloadSpec = WorkloadSpec()
    event_file: Optional[str] = None
    fault_file: Optional[str] = None

    def org_ids(self) -> list[str]:
        return [o.org_id for o in self.orgs]

    def validate(self, base_dir: Optional[Path] = None) -> None:
        ids = self.org_ids()
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate org ids")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate channel names")
        for channel in self.channels:
            unknown = set(channel.members) - set(ids)
            if unknown:
                raise ConfigError(f"channel {channel.name}: unknown orgs {sorted(unknown)}")
            if channel.traceability_model not in TRACEABILITY_MODELS:
                raise ConfigError(f"channel {channel.name}: bad model {channel.traceability_model}")
        for rel in (self.event_file, self.fault_file):
            if rel is not None:
                path = (base_dir / rel) if base_dir else Path(rel)
                if not path.exists():
                    raise ConfigError(f"missing file {path}")
        wl = self.workload
        for org, role in (
            (wl.producer_org, "producer"),
            (wl.manufacturer_org, "manufacturer"),
            (wl.distributor_org, "distributor"),
        ):
            if self.orgs and org not in ids:
                raise ConfigError(f"workload {role} org {org!r} not declared")
        if self.channels:
            if wl.farm_channel not in names or wl.market_channel not in names:
                raise ConfigError("workload channels must be declared channels")


def parse_policy(spec: str, scope: tuple[str, ...]) -> Policy:
    """`majority` | `any` | `n_of:<k>`."""
    if spec == "majority":
        return majority(scope)
    if spec == "any":
        return any_admin(scope)
    if spec.startswith("n_of:"):
        return n_of(int(spec.split(":", 1)[1]), scope)
    raise ConfigError(f"unknown policy spec {spec!r}")


def default_config() -> ScenarioConfig:
    """The shipped three-org scenario: FARM runs a private channel while
    MFG and DIST trade on a second, disjoint one."""
    return ScenarioConfig(
        orgs=(OrgSpec("FARM"), OrgSpec("MFG"), OrgSpec("DIST")),
        channels=(
            ChannelSpec("farm", ("FARM",)),
            ChannelSpec("market", ("MFG", "DIST")),
        ),
    )


def _parse_fraction(value) -> Fraction:
    if isinstance(value, bool):
        raise ConfigError(f"expected number, got {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, str):
        return Fraction(value)
    raise ConfigError(f"expected number, got {value!r}")


def config_from_dict(data: dict) -> ScenarioConfig:
    defaults = ScenarioConfig()
    orgs = tuple(
        OrgSpec(org_id, **{k: v for k, v in spec.items() if k in ("peers", "clients")})
        for org_id, spec in sorted(data.get("orgs", {}).items())
    )
    channels = tuple(
        ChannelSpec(
            name,
            tuple(spec["members"]),
            spec.get("admin_policy", "majority"),
            spec.get("endorsement_policy", "majority"),
            spec.get("traceability_model", "segregation"),
        )
        for name, spec in sorted(data.get("channels", {}).items())
    )
    ordering_data = data.get("ordering", {})
    ordering = OrderingConfig(
        cluster_size=ordering_data.get("cluster_size", 3),
        batch_max_txs=ordering_data.get("batch_max_txs", 10),
        batch_timeout_ms=ordering_data.get("batch_timeout_ms", 500),
        link_delay_ms=ordering_data.get("link_delay_ms", 1),
        heartbeat_interval_ms=ordering_data.get("heartbeat_interval_ms", 100),
    )
    ingestion_data = data.get("ingestion", {})
    ranges = tuple(
        (metric, _parse_fraction(bounds["lo"]), _parse_fraction(bounds["hi"]))
        for metric, bounds in sorted(ingestion_data.get("ranges", {}).items())
    )
    ingestion = IngestionSpec(ingestion_data.get("period_ms", 60_000), ranges)
    workload_data = data.get("workload", {})
    known = {f for f in WorkloadSpec.__dataclass_fields__}
    unknown = set(workload_data) - known
    if unknown:
        raise ConfigError(f"unknown workload keys {sorted(unknown)}")
    workload = WorkloadSpec(**workload_data)
    config = ScenarioConfig(
        seed=data.get("seed", defaults.seed),
        duration_ms=data.get("duration_ms", defaults.duration_ms),
        orgs=orgs or default_config().orgs,
        ordering=ordering,
        consortium_admin_policy=data.get("consortium", {}).get("admin_policy", "majority"),
        channels=channels or default_config().channels,
        ingestion=ingestion,
        workload=workload,
        event_file=data.get("events", {}).get("file"),
        fault_file=data.get("faults", {}).get("file"),
    )
    return config


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    config = config_from_dict(data)
    config.validate(base_dir=path.parent)
    return config
