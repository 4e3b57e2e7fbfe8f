import random
from fractions import Fraction

import pytest

from foodtrace.ingestion import (
    METRICS,
    NotDueError,
    OutOfRangeError,
    RfidScan,
    SensorReading,
    StagingStore,
    UnknownTagError,
    VetRecord,
    flush,
    parse_event_file,
    parse_event_line,
    record_event,
    validate_reading,
)
from foodtrace.provenance import EntityId
from tests.conftest import make_identity, make_msp

ANIMAL = EntityId("FARM", "ANIMAL", 1)


@pytest.fixture
def submitter():
    return make_identity(make_msp("FARM"), "ingestor", "client")


def reading(value, metric="body_temperature", source="tag-1", ts=0):
    return SensorReading(source, metric, Fraction(value), ts)


def test_in_range_reading_accepted():
    store = StagingStore("FARM")
    record_event(store, reading(Fraction(77, 2)))  # 38.5 C
    assert len(store.buffer) == 1


def test_out_of_range_reading_rejected():
    store = StagingStore("FARM")
    with pytest.raises(OutOfRangeError):
        record_event(store, reading(90))
    assert store.buffer == []


def test_unknown_tag_scan_rejected():
    store = StagingStore("FARM")
    with pytest.raises(UnknownTagError):
        record_event(store, RfidScan("ghost", "ant-1", 0), known_tags={"tag-1": ANIMAL})
    record_event(store, RfidScan("tag-1", "ant-1", 0), known_tags={"tag-1": ANIMAL})
    assert len(store.buffer) == 1


def test_validate_reading_boundaries():
    lo, hi = METRICS["body_temperature"][1]
    assert validate_reading(reading(lo)).ok
    assert validate_reading(reading(hi)).ok
    assert not validate_reading(reading(hi + Fraction(1, 1000))).ok


def test_unconfigured_metric_passes_with_warning():
    check = validate_reading(SensorReading("s", "soil_moisture", Fraction(1), 0))
    assert check.ok and check.warning
    store = StagingStore("FARM")
    record_event(store, SensorReading("s", "soil_moisture", Fraction(1), 0))
    assert store.warnings


def test_flush_aggregates_mean_against_independent_recompute(submitter):
    store = StagingStore("FARM")
    values = [Fraction(37) + Fraction(i, 10) for i in range(10)]
    for i, v in enumerate(values):
        record_event(store, reading(v, ts=i))
    txs = flush(store, "farm", now=60_000, period_ms=60_000, submitter=submitter)
    assert len(txs) == 1
    import json

    record = json.loads(txs[0].args[0])
    assert record["count"] == 10
    mean = sum(values, Fraction(0)) / len(values)
    assert record["mean"] == f"{mean.numerator}/{mean.denominator}"
    assert record["min"] == "37/1"
    assert store.buffer == [] and store.last_flush == 60_000


def test_flush_not_due():
    store = StagingStore("FARM")
    record_event(store, reading(38))
    with pytest.raises(NotDueError):
        flush(store, "farm", now=100, period_ms=60_000, submitter=None)


def test_flush_empty_buffer_advances_clock(submitter):
    store = StagingStore("FARM")
    txs = flush(store, "farm", now=60_000, period_ms=60_000, submitter=submitter)
    assert txs == []
    assert store.last_flush == 60_000


def test_flush_emits_scans_and_vets_verbatim(submitter):
    store = StagingStore("FARM")
    record_event(store, reading(38, ts=1))
    record_event(store, RfidScan("tag-1", "ant-2", 5))
    record_event(store, VetRecord(ANIMAL, "vaccination", "ibr", None, 9))
    txs = flush(store, "farm", now=60_000, period_ms=60_000, submitter=submitter)
    functions = sorted(tx.function for tx in txs)
    assert functions == ["record_aggregate", "record_scan", "record_vet"]


def test_conservation_over_random_schedules(submitter):
    """Sum of flushed aggregate counts equals the number of accepted events."""
    rng = random.Random(3)
    for _ in range(10):
        store = StagingStore("FARM")
        accepted = 0
        now = 0
        total_counts = 0
        for _ in range(rng.randint(5, 40)):
            now += rng.randint(1, 5000)
            metric = rng.choice(list(METRICS))
            lo, hi = METRICS[metric][1]
            value = lo + Fraction(rng.randint(0, 100), 100) * (hi - lo)
            try:
                record_event(store, SensorReading(f"s{rng.randint(0, 3)}", metric, value, now))
                accepted += 1
            except OutOfRangeError:
                pass
            if now - store.last_flush >= 10_000:
                import json

                for tx in flush(store, "farm", now, 10_000, submitter):
                    if tx.function == "record_aggregate":
                        total_counts += json.loads(tx.args[0])["count"]
        for tx in flush(store, "farm", store.last_flush + 10_000, 10_000, submitter):
            import json

            if tx.function == "record_aggregate":
                total_counts += json.loads(tx.args[0])["count"]
        assert total_counts == accepted


def test_replay_yields_byte_identical_transactions(submitter):
    events = [reading(Fraction(37) + Fraction(i, 7), ts=i * 100) for i in range(20)]
    events += [RfidScan("tag-1", "ant-1", 1500), VetRecord(ANIMAL, "weight", "kg", Fraction(450), 1700)]

    def run():
        store = StagingStore("FARM")
        for e in events:
            record_event(store, e)
        return flush(store, "farm", now=60_000, period_ms=60_000, submitter=submitter)

    first = [tx.encode() for tx in run()]
    second = [tx.encode() for tx in run()]
    assert first == second


def test_window_aggregates_are_order_insensitive(submitter):
    events = [reading(Fraction(37) + Fraction(i, 9), ts=i) for i in range(12)]

    def run(order):
        store = StagingStore("FARM")
        for e in order:
            record_event(store, e)
        txs = flush(store, "farm", now=60_000, period_ms=60_000, submitter=submitter)
        import json

        record = json.loads(txs[0].args[0])
        return record["count"], record["min"], record["max"], record["mean"]

    shuffled = list(events)
    random.Random(5).shuffle(shuffled)
    assert run(events) == run(shuffled)


def test_parse_event_lines():
    t, org, ev = parse_event_line("1000 FARM sensor tag-1 body_temperature 38.5")
    assert (t, org) == (1000, "FARM")
    assert ev.value == Fraction("38.5")
    t, org, ev = parse_event_line("2000 FARM scan tag-1 ant-3")
    assert ev.antenna_id == "ant-3"
    t, org, ev = parse_event_line("3000 FARM vet FARM-ANIMAL-00000001 weight kg 450")
    assert ev.animal == ANIMAL and ev.value == Fraction(450)


def test_parse_event_file_sorts_by_time():
    content = "# comment\n3000 FARM scan t a\n1000 FARM sensor s body_temperature 38\n"
    events = parse_event_file(content)
    assert [e[0] for e in events] == [1000, 3000]
