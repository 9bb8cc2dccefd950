"""protect-cri: pod manifests in, zones out.

Parses the subset of the Kubernetes Pod manifest this runtime cares about,
keeps a desired-state table keyed by (namespace, name), and reconciles it
against the zones the daemon is running. One pod maps to one zone.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import yaml

from .errors import BadAnnotationValue, DaemonUnavailable, EderaError, MalformedManifest, UnmanagedPod
from .zone import ZoneId, ZoneSpec, ZoneState

KERNEL_ANNOTATION = "dev.edera/kernel"
MEMORY_ANNOTATION = "dev.edera/memory"
RUNTIME_CLASS = "edera"
DEFAULT_KERNEL = "ghcr.io/edera-dev/linux-kernel:latest"
DEFAULT_MEMORY_MIB = 512
DEFAULT_VCPUS = 1
RECONCILE_PERIOD_MS = 1000

PodKey = tuple[str, str]


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    image: str
    env: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "image": self.image, "env": dict(self.env)}


@dataclass(frozen=True)
class PodDesiredState:
    name: str
    namespace: str
    kernel_image: str
    memory_mib: int
    runtime_class: str
    containers: tuple[ContainerSpec, ...] = ()

    @property
    def managed(self) -> bool:
        return self.runtime_class == RUNTIME_CLASS

    @property
    def key(self) -> PodKey:
        return (self.namespace, self.name)

    @property
    def ref(self) -> str:
        return f"{self.namespace}/{self.name}"

    def zone_spec(self) -> ZoneSpec:
        return ZoneSpec(self.kernel_image, self.memory_mib, DEFAULT_VCPUS)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "namespace": self.namespace,
            "kernel_image": self.kernel_image,
            "memory_mib": self.memory_mib,
            "runtime_class": self.runtime_class,
            "containers": [c.to_dict() for c in self.containers],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PodDesiredState":
        return cls(
            d["name"],
            d["namespace"],
            d["kernel_image"],
            int(d["memory_mib"]),
            d["runtime_class"],
            tuple(ContainerSpec(c["name"], c["image"], tuple(sorted(c.get("env", {}).items()))) for c in d["containers"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def binding(self) -> dict[str, Any]:
        """Workload descriptor stored on the zone record."""
        return {"pod": self.ref, "namespace": self.namespace, "name": self.name, "digest": self.digest(),
                "containers": [c.to_dict() for c in self.containers]}


def parse_manifest(document: Union[str, bytes, dict]) -> PodDesiredState:
    if isinstance(document, (str, bytes)):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as e:
            raise MalformedManifest(f"not valid YAML: {e}") from e
    if not isinstance(document, dict):
        raise MalformedManifest("manifest must be a mapping")
    if document.get("kind") != "Pod":
        raise MalformedManifest(f"unsupported kind {document.get('kind')!r}")
    meta = document.get("metadata") or {}
    spec = document.get("spec") or {}
    if not isinstance(meta, dict) or not isinstance(spec, dict):
        raise MalformedManifest("metadata and spec must be mappings")
    name = meta.get("name")
    if not name or not isinstance(name, str):
        raise MalformedManifest("metadata.name is required")
    namespace = meta.get("namespace") or "default"
    annotations = meta.get("annotations") or {}
    if not isinstance(annotations, dict):
        raise MalformedManifest("metadata.annotations must be a mapping")

    kernel = annotations.get(KERNEL_ANNOTATION, DEFAULT_KERNEL)
    if not isinstance(kernel, str) or not kernel.strip():
        raise BadAnnotationValue(f"{KERNEL_ANNOTATION} must be a non-empty image reference")
    memory = DEFAULT_MEMORY_MIB
    if MEMORY_ANNOTATION in annotations:
        raw = str(annotations[MEMORY_ANNOTATION]).strip()
        if not raw.isdigit() or int(raw) <= 0:
            raise BadAnnotationValue(f"{MEMORY_ANNOTATION}={annotations[MEMORY_ANNOTATION]!r} is not a positive integer")
        memory = int(raw)

    containers = []
    for c in spec.get("containers") or []:
        if not isinstance(c, dict) or "name" not in c or "image" not in c:
            raise MalformedManifest("each container needs a name and an image")
        env = tuple(sorted((str(e["name"]), str(e.get("value", ""))) for e in c.get("env") or []))
        containers.append(ContainerSpec(str(c["name"]), str(c["image"]), env))
    if not containers:
        raise MalformedManifest("spec.containers must be non-empty")

    return PodDesiredState(
        name=name,
        namespace=str(namespace),
        kernel_image=kernel.strip(),
        memory_mib=memory,
        runtime_class=str(spec.get("runtimeClassName") or ""),
        containers=tuple(containers),
    )


def parse_manifests(text: Union[str, bytes]) -> list[PodDesiredState]:
    try:
        docs = [d for d in yaml.safe_load_all(text) if d is not None]
    except yaml.YAMLError as e:
        raise MalformedManifest(f"not valid YAML: {e}") from e
    return [parse_manifest(d) for d in docs]


@dataclass(frozen=True)
class ReconcileDiff:
    to_create: list[PodDesiredState] = field(default_factory=list)
    to_destroy: list[ZoneId] = field(default_factory=list)
    unchanged: int = 0
    failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.to_create and not self.to_destroy


@dataclass(frozen=True)
class Binding:
    pod: str
    zone: ZoneId
    state: ZoneState


_SERVING = (ZoneState.PROVISIONING, ZoneState.WARM, ZoneState.ACTIVE, ZoneState.QUARANTINED)


class CriShim:
    def __init__(self, daemon, store_desired: bool = True):
        self.daemon = daemon
        self.desired: dict[PodKey, PodDesiredState] = {}
        self._lock = threading.RLock()
        self._persist = store_desired
        self.last_reconcile: Optional[float] = None
        self.alive = True
        self._load()

    def _load(self) -> None:
        if not self._persist:
            return
        for key, raw in self.daemon.store.items("pod/"):
            pod = PodDesiredState.from_dict(json.loads(raw))
            self.desired[pod.key] = pod

    # -- desired state ---------------------------------------------------

    def apply(self, pod: PodDesiredState) -> PodDesiredState:
        """Upsert the pod's desired state; no zone changes until reconcile."""
        if not pod.managed:
            raise UnmanagedPod(f"{pod.ref} has runtimeClassName {pod.runtime_class!r}, not {RUNTIME_CLASS!r}")
        with self._lock:
            self.desired[pod.key] = pod
            if self._persist:
                self.daemon.store.put(f"pod/{pod.ref}", json.dumps(pod.to_dict(), sort_keys=True).encode())
        return pod

    def delete(self, namespace: str, name: str) -> bool:
        with self._lock:
            pod = self.desired.pop((namespace, name), None)
            if pod is not None and self._persist:
                self.daemon.store.delete(f"pod/{pod.ref}")
            return pod is not None

    # -- reconciliation --------------------------------------------------

    def diff(self) -> ReconcileDiff:
        with self._lock:
            kept: dict[str, ZoneId] = {}
            to_destroy: list[ZoneId] = []
            for rec in self.daemon.list_zones(include_tombstones=False):
                wl = rec.workload or {}
                ref = wl.get("pod")
                if ref is None:
                    continue
                ns, _, name = ref.partition("/")
                pod = self.desired.get((ns, name))
                ok = (
                    pod is not None
                    and rec.state in _SERVING
                    and wl.get("digest") == pod.digest()
                    and ref not in kept
                )
                if ok:
                    kept[ref] = rec.id
                else:
                    to_destroy.append(rec.id)
            to_create = [p for k, p in sorted(self.desired.items()) if p.ref not in kept]
            return ReconcileDiff(to_create, to_destroy, len(kept))

    def reconcile(self, now: Optional[float] = None) -> ReconcileDiff:
        """Drive the daemon towards the desired pods; returns what was actuated.

        Destroys run before creates so freed memory is reusable in the same
        round. A failing item is reported and retried next round; it does not
        stop the others.
        """
        with self._lock:
            diff = self.diff()
            self.last_reconcile = self.daemon.clock.now() if now is None else now
            try:
                self.daemon.ping()
            except DaemonUnavailable as e:
                raise DaemonUnavailable(str(e), diff=diff) from None
            failed: list[tuple[str, str]] = []
            destroyed, created = [], []
            for zid in diff.to_destroy:
                try:
                    self.daemon.destroy_zone(zid)
                    destroyed.append(zid)
                except EderaError as e:
                    failed.append((zid, f"{type(e).__name__}: {e}"))
            for pod in diff.to_create:
                try:
                    self.daemon.create_zone(pod.zone_spec(), workload=pod.binding())
                    created.append(pod)
                except EderaError as e:
                    failed.append((pod.ref, f"{type(e).__name__}: {e}"))
            return ReconcileDiff(created, destroyed, diff.unchanged, failed)

    def tick(self, now: float) -> Optional[ReconcileDiff]:
        """Periodic trigger: reconcile if a period has passed since the last run."""
        if self.last_reconcile is None or now - self.last_reconcile >= RECONCILE_PERIOD_MS:
            return self.reconcile(now)
        return None

    def list_bindings(self) -> list[Binding]:
        out = []
        for rec in self.daemon.list_zones(include_tombstones=False):
            ref = (rec.workload or {}).get("pod")
            if ref is not None:
                out.append(Binding(ref, rec.id, rec.state))
        return sorted(out, key=lambda b: (b.pod, b.zone))

    # -- request surface (run/stop/list) ---------------------------------

    def run_pod(self, pod: PodDesiredState) -> ReconcileDiff:
        self.apply(pod)
        return self.reconcile()

    def stop_pod(self, namespace: str, name: str) -> ReconcileDiff:
        self.delete(namespace, name)
        return self.reconcile()

    def list_pods(self) -> list[dict[str, Any]]:
        bindings = {b.pod: b for b in self.list_bindings()}
        rows = []
        for key, pod in sorted(self.desired.items()):
            b = bindings.get(pod.ref)
            rows.append(
                {
                    "pod": pod.ref,
                    "managed": pod.managed,
                    "zone": b.zone if b else None,
                    "state": b.state.value if b else "pending",
                }
            )
        return rows
