"""IoT event capture: per-org staging store with fixed-frequency flush.

Raw sensor streams stay in the org's conventional store; at each flush
only window aggregates (count/min/max/mean per source and metric) move
onto the channel, while RFID scans and veterinary records are committed
verbatim because they carry identity and custody meaning. Values are
exact rationals so aggregates are order-insensitive and replay is
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence, Union

from .codec import canonical_json, frac_from_str, frac_to_str
from .identity import Identity
from .ledger import Transaction, make_transaction
from .provenance import EntityId, parse_entity_id

# metric -> (unit, default plausibility range)
METRICS: dict[str, tuple[str, tuple[Fraction, Fraction]]] = {
    "water_quality": ("index", (Fraction(0), Fraction(100))),
    "water_temperature": ("celsius", (Fraction(0), Fraction(45))),
    "air_quality": ("aqi", (Fraction(0), Fraction(500))),
    "environment_temperature": ("celsius", (Fraction(-40), Fraction(55))),
    "humidity": ("percent", (Fraction(0), Fraction(100))),
    "body_temperature": ("celsius", (Fraction(35), Fraction(42))),
    "ruminal_ph": ("ph", (Fraction(4), Fraction(9))),
    "activity": ("steps_per_hour", (Fraction(0), Fraction(10000))),
    "drinking_cycle": ("cycles_per_day", (Fraction(0), Fraction(60))),
}

VET_EVENTS = ("vaccination", "disease_control", "weight")

SENSOR_CHAINCODE = ("telemetry", 1)


class IngestionError(Exception):
    pass


class OutOfRangeError(IngestionError):
    def __init__(self, metric: str, value: Fraction):
        super().__init__(f"{metric} value {frac_to_str(value)} out of range")
        self.metric = metric
        self.value = value


class UnknownTagError(IngestionError):
    pass


class NotDueError(IngestionError):
    pass


@dataclass(frozen=True)
class SensorReading:
    source_id: str
    metric: str
    value: Fraction
    timestamp: int


@dataclass(frozen=True)
class RfidScan:
    tag_id: str
    antenna_id: str
    timestamp: int


@dataclass(frozen=True)
class VetRecord:
    animal: EntityId
    event: str
    detail: str
    value: Optional[Fraction]
    timestamp: int


Event = Union[SensorReading, RfidScan, VetRecord]

RangesConfig = Mapping[str, tuple[Fraction, Fraction]]


@dataclass(frozen=True)
class RangeCheck:
    ok: bool
    warning: Optional[str] = None


def validate_reading(reading: SensorReading, ranges: Optional[RangesConfig] = None) -> RangeCheck:
    """Inclusive [lo, hi] check; unconfigured metrics pass with a warning."""
    if ranges and reading.metric in ranges:
        lo, hi = ranges[reading.metric]
    elif reading.metric in METRICS:
        lo, hi = METRICS[reading.metric][1]
    else:
        return RangeCheck(True, f"no range configured for metric {reading.metric!r}")
    return RangeCheck(lo <= reading.value <= hi)


@dataclass
class StagingStore:
    """The org's 'traditional database': append-only buffer, arrival order."""

    org: str
    buffer: list[Event] = field(default_factory=list)
    last_flush: int = 0
    warnings: list[str] = field(default_factory=list)


def record_event(
    store: StagingStore,
    event: Event,
    ranges: Optional[RangesConfig] = None,
    known_tags: Optional[Mapping[str, EntityId]] = None,
    known_animals: Optional[Iterable[EntityId]] = None,
) -> StagingStore:
    """Validate and append; the store is untouched on rejection."""
    if isinstance(event, SensorReading):
        check = validate_reading(event, ranges)
        if not check.ok:
            raise OutOfRangeError(event.metric, event.value)
        if check.warning:
            store.warnings.append(check.warning)
    elif isinstance(event, RfidScan):
        if known_tags is not None and event.tag_id not in known_tags:
            raise UnknownTagError(event.tag_id)
    elif isinstance(event, VetRecord):
        if known_animals is not None and event.animal not in set(known_animals):
            raise UnknownTagError(event.animal.render())
        if event.event not in VET_EVENTS:
            raise IngestionError(f"unknown vet event {event.event!r}")
    else:
        raise IngestionError(f"unknown event type {type(event).__name__}")
    store.buffer.append(event)
    return store


def _aggregate_tx(
    org: str,
    channel: str,
    source_id: str,
    metric: str,
    values: Sequence[Fraction],
    window_start: int,
    window_end: int,
    submitter: Identity,
) -> Transaction:
    mean = sum(values, Fraction(0)) / len(values)
    key = f"sensor/{org}/{source_id}/{metric}/{window_end}"
    record = {
        "org": org,
        "source": source_id,
        "metric": metric,
        "unit": METRICS.get(metric, ("unknown",))[0],
        "window_start": window_start,
        "window_end": window_end,
        "count": len(values),
        "min": frac_to_str(min(values)),
        "max": frac_to_str(max(values)),
        "mean": frac_to_str(mean),
    }
    return make_transaction(
        channel=channel,
        chaincode=SENSOR_CHAINCODE,
        function="record_aggregate",
        args=[canonical_json(record)],
        read_set=[(key, 0)],
        write_set=[(key, canonical_json(record))],
        submitter=submitter,
        timestamp=window_end,
    )


def flush(
    store: StagingStore,
    channel: str,
    now: int,
    period_ms: int,
    submitter: Identity,
) -> list[Transaction]:
    """Drain the buffer into transactions: one aggregate per (source, metric),
    scans and vet records verbatim. Raises NotDueError before the period."""
    if now - store.last_flush < period_ms:
        raise NotDueError(f"flush due at {store.last_flush + period_ms}, now {now}")
    window_start = store.last_flush

    groups: dict[tuple[str, str], list[Fraction]] = {}
    txs: list[Transaction] = []
    for event in store.buffer:
        if isinstance(event, SensorReading):
            groups.setdefault((event.source_id, event.metric), []).append(event.value)
        elif isinstance(event, RfidScan):
            key = f"scan/{store.org}/{event.tag_id}/{event.timestamp}/{event.antenna_id}"
            record = {
                "org": store.org,
                "tag": event.tag_id,
                "antenna": event.antenna_id,
                "timestamp": event.timestamp,
            }
            txs.append(
                make_transaction(
                    channel=channel,
                    chaincode=SENSOR_CHAINCODE,
                    function="record_scan",
                    args=[canonical_json(record)],
                    read_set=[(key, 0)],
                    write_set=[(key, canonical_json(record))],
                    submitter=submitter,
                    timestamp=event.timestamp,
                )
            )
        else:
            key = f"vet/{event.animal.render()}/{event.timestamp}/{event.event}"
            record = {
                "org": store.org,
                "animal": event.animal.render(),
                "event": event.event,
                "detail": event.detail,
                "value": frac_to_str(event.value) if event.value is not None else None,
                "timestamp": event.timestamp,
            }
            txs.append(
                make_transaction(
                    channel=channel,
                    chaincode=SENSOR_CHAINCODE,
                    function="record_vet",
                    args=[canonical_json(record)],
                    read_set=[(key, 0)],
                    write_set=[(key, canonical_json(record))],
                    submitter=submitter,
                    timestamp=event.timestamp,
                )
            )

    aggregates = [
        _aggregate_tx(store.org, channel, source_id, metric, values, window_start, now, submitter)
        for (source_id, metric), values in sorted(groups.items())
    ]
    store.buffer.clear()
    store.last_flush = now
    return aggregates + txs


def parse_event_line(line: str) -> tuple[int, str, Event]:
    """`<time_ms> <org> sensor <source> <metric> <value>`
    | `<time_ms> <org> scan <tag> <antenna>`
    | `<time_ms> <org> vet <animal_id> <event> <detail> [<value>]`"""
    parts = line.split()
    if len(parts) < 4:
        raise IngestionError(f"short event line: {line!r}")
    time_ms, org, kind = int(parts[0]), parts[1], parts[2]
    rest = parts[3:]
    if kind == "sensor":
        if len(rest) != 3:
            raise IngestionError(f"sensor line needs <source> <metric> <value>: {line!r}")
        return time_ms, org, SensorReading(rest[0], rest[1], _parse_value(rest[2]), time_ms)
    if kind == "scan":
        if len(rest) != 2:
            raise IngestionError(f"scan line needs <tag> <antenna>: {line!r}")
        return time_ms, org, RfidScan(rest[0], rest[1], time_ms)
    if kind == "vet":
        if len(rest) not in (3, 4):
            raise IngestionError(f"vet line needs <animal> <event> <detail> [<value>]: {line!r}")
        value = _parse_value(rest[3]) if len(rest) == 4 else None
        return time_ms, org, VetRecord(parse_entity_id(rest[0]), rest[1], rest[2], value, time_ms)
    raise IngestionError(f"unknown event type {kind!r}")


def _parse_value(s: str) -> Fraction:
    if "/" in s:
        return frac_from_str(s)
    return Fraction(s)


def parse_event_file(content: str) -> list[tuple[int, str, Event]]:
    events = []
    for line in content.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        events.append(parse_event_line(line))
    return sorted(events, key=lambda t: t[0])
