from __future__ import annotations

from pathlib import Path

import pytest

from edera.cri import (
    DEFAULT_KERNEL,
    DEFAULT_MEMORY_MIB,
    CriShim,
    PodDesiredState,
    parse_manifest,
    parse_manifests,
)
from edera.errors import BadAnnotationValue, DaemonUnavailable, MalformedManifest, UnmanagedPod
from edera.zone import ZoneState

DATA = Path(__file__).parent / "data"


def pod(name, ns="default", memory=64):
    return parse_manifest(
        {
            "kind": "Pod",
            "metadata": {"name": name, "namespace": ns, "annotations": {"dev.edera/memory": str(memory)}},
            "spec": {"runtimeClassName": "edera", "containers": [{"name": "c", "image": "nginx"}]},
        }
    )


def test_edera_manifest():
    p = parse_manifest((DATA / "leaky-vessel-edera.yaml").read_text())
    assert p.kernel_image == "ghcr.io/edera-dev/linux-kernel:latest"
    assert p.memory_mib == 600 and p.managed
    assert p.ref == "test/leaky-vessel"


def test_plain_manifest_unmanaged():
    p = parse_manifest((DATA / "leaky-vessel.yaml").read_text())
    assert not p.managed
    assert (p.kernel_image, p.memory_mib) == (DEFAULT_KERNEL, DEFAULT_MEMORY_MIB)


@pytest.mark.parametrize("value", ["abc", "0", "-5", "1.5", ""])
def test_bad_memory_annotation(value):
    doc = {"kind": "Pod", "metadata": {"name": "x", "annotations": {"dev.edera/memory": value}},
           "spec": {"containers": [{"name": "c", "image": "i"}]}}
    with pytest.raises(BadAnnotationValue):
        parse_manifest(doc)


@pytest.mark.parametrize("text", ["kind: Service\n", "- a\n", "kind: Pod\nmetadata: {}\n", "a: [\n",
                                  "kind: Pod\nmetadata: {name: x}\nspec: {containers: []}\n"])
def test_malformed(text):
    with pytest.raises(MalformedManifest):
        parse_manifest(text)


def test_multi_document():
    text = (DATA / "leaky-vessel.yaml").read_text() + "\n---\n" + (DATA / "leaky-vessel-edera.yaml").read_text()
    assert [p.managed for p in parse_manifests(text)] == [False, True]


def test_desired_state_roundtrip():
    p = pod("a")
    assert PodDesiredState.from_dict(p.to_dict()) == p


def test_apply_separates_intent_and_actuation(stack):
    cri, d = stack.cri, stack.daemon
    cri.apply(pod("p1"))
    cri.apply(pod("p1"))
    assert len(cri.desired) == 1 and d.list_zones() == []
    with pytest.raises(UnmanagedPod):
        cri.apply(parse_manifest((DATA / "leaky-vessel.yaml").read_text()))
    assert cri.delete("default", "p1") and not cri.desired


def test_reconcile_create_destroy_converge(stack):
    cri, d = stack.cri, stack.daemon
    cri.apply(pod("p1"))
    diff = cri.reconcile()
    assert [p.name for p in diff.to_create] == ["p1"]
    (b,) = cri.list_bindings()
    assert b.pod == "default/p1" and b.state is ZoneState.ACTIVE
    assert cri.reconcile().empty
    cri.delete("default", "p1")
    diff = cri.reconcile()
    assert diff.to_destroy == [b.zone] and cri.list_bindings() == []


def test_two_pods_bound_active(stack):
    cri = stack.cri
    cri.apply(pod("a"))
    cri.apply(pod("b"))
    cri.reconcile()
    assert [(b.pod, b.state) for b in cri.list_bindings()] == [("default/a", ZoneState.ACTIVE),
                                                               ("default/b", ZoneState.ACTIVE)]


def test_changed_pod_is_replaced(stack):
    cri = stack.cri
    cri.apply(pod("a", memory=64))
    cri.reconcile()
    old = cri.list_bindings()[0].zone
    cri.apply(pod("a", memory=128))
    diff = cri.reconcile()
    assert diff.to_destroy == [old] and len(diff.to_create) == 1
    assert stack.daemon.get(cri.list_bindings()[0].zone).spec.memory_mib == 128


def test_item_failure_does_not_block_others(stack):
    cri = stack.cri
    cri.apply(pod("huge", memory=10**6))
    cri.apply(pod("ok"))
    diff = cri.reconcile()
    assert [r for r, _ in diff.failed] == ["default/huge"]
    assert [b.pod for b in cri.list_bindings()] == ["default/ok"]


def test_daemon_unavailable_carries_diff(stack):
    stack.cri.apply(pod("a"))
    stack.daemon.available = False
    with pytest.raises(DaemonUnavailable) as info:
        stack.cri.reconcile()
    assert [p.name for p in info.value.diff.to_create] == ["a"]


def test_desired_state_persists(tmp_path):
    from conftest import small_config
    from edera.stack import build_stack

    cfg = small_config(store_path=tmp_path / "s.log")
    st = build_stack(cfg)
    st.cri.apply(pod("keep"))
    st.close()
    st2 = build_stack(cfg)
    assert list(st2.cri.desired) == [("default", "keep")]
    st2.close()


def test_tick_respects_period(stack, clock):
    stack.cri.apply(pod("a"))
    assert stack.cri.tick(clock.now()) is not None
    assert stack.cri.tick(clock.now() + 10) is None
    assert stack.cri.tick(clock.now() + 1000) is not None
