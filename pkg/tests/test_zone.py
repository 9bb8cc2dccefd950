from __future__ import annotations

import itertools
import re

import pytest

from edera.errors import IllegalTransition
from edera.zone import (
    LEGAL_SUCCESSORS,
    LifecycleEvent as E,
    Role,
    ZoneRecord,
    ZoneSpec,
    ZoneState as S,
    new_zone_id,
    seeded_id_generator,
    transition,
)

UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")

# Successor sets written out by hand, independently of TRANSITIONS.
EXPECTED_SUCCESSORS = {
    S.PROVISIONING: {S.WARM, S.ACTIVE, S.DEPROVISIONED},
    S.WARM: {S.ACTIVE, S.DEPROVISIONED},
    S.ACTIVE: {S.QUARANTINED, S.NOT_RESPONDING, S.DEPROVISIONED},
    S.QUARANTINED: {S.ACTIVE, S.NOT_RESPONDING, S.DEPROVISIONED},
    S.NOT_RESPONDING: {S.DEPROVISIONED},
    S.DEPROVISIONED: set(),
}


def test_transition_examples():
    assert transition(S.PROVISIONING, E.BOOT_COMPLETE_WARM) is S.WARM
    assert transition(S.ACTIVE, E.HEARTBEAT_TIMEOUT) is S.NOT_RESPONDING
    with pytest.raises(IllegalTransition):
        transition(S.DEPROVISIONED, E.ACTIVATE)


def test_successor_sets_match_table():
    reachable = {s: set() for s in S}
    for s, e in itertools.product(S, E):
        try:
            reachable[s].add(transition(s, e))
        except IllegalTransition:
            pass
    assert reachable == EXPECTED_SUCCESSORS
    assert {s: set(v) for s, v in LEGAL_SUCCESSORS.items()} == EXPECTED_SUCCESSORS


def test_deprovisioned_is_terminal():
    for e in E:
        with pytest.raises(IllegalTransition):
            transition(S.DEPROVISIONED, e)


def test_illegal_transition_carries_pair():
    with pytest.raises(IllegalTransition) as info:
        transition(S.WARM, E.QUARANTINE)
    assert info.value.state is S.WARM and info.value.event is E.QUARANTINE


def test_ids_unique_and_formatted():
    a, b = new_zone_id(), new_zone_id()
    assert a != b
    assert UUID_RE.match(a) and UUID_RE.match(b)


def test_seeded_id_is_pinned():
    gen = seeded_id_generator(0)
    assert gen() == "e3e70682-c209-4cac-a29f-6fbed82c07cd"
    assert UUID_RE.match(gen())


def test_spec_validation():
    with pytest.raises(ValueError):
        ZoneSpec("")
    with pytest.raises(ValueError):
        ZoneSpec("img", memory_mib=-1)
    assert ZoneSpec("img").zero_resource
    assert not ZoneSpec("img", 1).zero_resource


def test_record_roundtrip_and_tombstone():
    rec = ZoneRecord("z", ZoneSpec("img", 64, 1, Role.DRIVER), S.ACTIVE, domain=3, granted_cpus={1, 2},
                     granted_pages=16384, workload={"pod": "a/b"})
    assert ZoneRecord.from_dict(rec.to_dict()) == rec
    tomb = rec.tombstone()
    assert tomb.state is S.DEPROVISIONED
    assert tomb.domain is None and tomb.granted_cpus == set() and tomb.granted_pages == 0
    with pytest.raises(IllegalTransition):
        tomb.advanced(E.ACTIVATE)
