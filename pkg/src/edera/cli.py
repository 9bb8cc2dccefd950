"""Command-line entry points: ``ederactl`` (admin) and ``ederad`` (host daemon).

``ederactl`` either opens the store directly (the default; state is restored
from the store on every invocation) or forwards its arguments to a running
``ederad --listen ADDR`` with ``--connect ADDR``.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Callable, Optional, TextIO

from . import __version__
from .bench import bench_startup, format_report
from .clock import WallClock
from .cri import parse_manifests
from .daemon import DaemonConfig
from .devices import DeviceMode
from .errors import EderaError
from .hv import HostConfig
from .rpc import MetricsServer, RpcServer, call
from .scenarios import SCENARIOS, run_scenario
from .stack import Stack, build_stack
from .zone import ZoneSpec

DEFAULT_STORE = "edera-store.log"
STEP_INTERVAL_S = 0.1

log = logging.getLogger("edera")


class UsageError(Exception):
    pass


class _HelpExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so the same parser works inside the daemon."""

    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")

    def exit(self, status: int = 0, message: Optional[str] = None):
        if message:
            sys.stderr.write(message)
        raise _HelpExit(status)


# -- parsers ---------------------------------------------------------------


def _ctl_commands(p: argparse.ArgumentParser) -> None:
    groups = p.add_subparsers(dest="group", metavar="{zone,pod,device,bench,scenario,metrics}", parser_class=_Parser)
    groups.required = True

    zone = groups.add_parser("zone", help="manage zones").add_subparsers(dest="cmd", parser_class=_Parser)
    zone.required = True
    c = zone.add_parser("create", help="create a zone and wait for its first heartbeat")
    c.add_argument("--kernel", required=True, help="kernel image reference")
    c.add_argument("--memory", type=int, default=0, help="memory in MiB")
    c.add_argument("--vcpus", type=int, default=1)
    c.add_argument("--warm", action="store_true", help="create an idle zone with no resources")
    c = zone.add_parser("list", help="list zones")
    c.add_argument("--all", action="store_true", help="include deprovisioned zones")
    for name in ("destroy", "quarantine", "release"):
        zone.add_parser(name).add_argument("zone_id")
    c = zone.add_parser("activate", help="grant resources to a warm zone")
    c.add_argument("zone_id")
    c.add_argument("--cpus", type=int, default=1)
    c.add_argument("--memory", type=int, required=True, help="memory in MiB")
    c = zone.add_parser("exec", help="run a command through the zone's init agent")
    c.add_argument("zone_id")
    c.add_argument("argv", nargs=argparse.REMAINDER)

    pod = groups.add_parser("pod", help="manage pods").add_subparsers(dest="cmd", parser_class=_Parser)
    pod.required = True
    c = pod.add_parser("apply", help="apply pod manifests and reconcile")
    c.add_argument("-f", "--filename", required=True, help="manifest file, or - for stdin")
    c = pod.add_parser("delete", help="delete a pod and reconcile")
    c.add_argument("name")
    c.add_argument("-n", "--namespace", default="default")
    pod.add_parser("list", help="list desired pods and their zones")

    dev = groups.add_parser("device", help="manage device attachments").add_subparsers(dest="cmd", parser_class=_Parser)
    dev.required = True
    c = dev.add_parser("attach", help="attach a device through a new driver zone")
    c.add_argument("device_id")
    c.add_argument("--mode", choices=[m.value for m in DeviceMode], default=DeviceMode.PASSTHROUGH.value)
    c.add_argument("--slices", type=int, default=1)
    c.add_argument("--kernel", default="driver-kernel:latest")
    c.add_argument("--memory", type=int, default=64)
    c = dev.add_parser("bind", help="bind a slice to a client zone")
    c.add_argument("device_id")
    c.add_argument("slice", type=int)
    c.add_argument("zone_id")
    c = dev.add_parser("unbind", help="unbind and wipe a slice")
    c.add_argument("device_id")
    c.add_argument("slice", type=int)
    dev.add_parser("fault", help="inject a fault into the device's driver zone").add_argument("device_id")
    dev.add_parser("list", help="list attachments")

    bench = groups.add_parser("bench", help="benchmarks").add_subparsers(dest="cmd", parser_class=_Parser)
    bench.required = True
    c = bench.add_parser("startup", help="zone startup latency")
    c.add_argument("--runs", type=int, default=5)
    c.add_argument("--warm", action="store_true", help="time warm-zone activation instead of cold creation")
    c.add_argument("--compare", action="store_true", help="run both cold and warm and print the ratio")
    c.add_argument("--clock", choices=["wall", "logical"], default="wall")

    sc = groups.add_parser("scenario", help="escape-analog scenarios").add_subparsers(dest="cmd", parser_class=_Parser)
    sc.required = True
    sc.add_parser("run").add_argument("name", choices=[*SCENARIOS, "all"])
    sc.add_parser("list")

    groups.add_parser("metrics", help="print metrics in text exposition format")


def ctl_parser() -> _Parser:
    p = _Parser(prog="ederactl", description="Zone control plane admin tool.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--store", default=os.environ.get("EDERA_STORE", DEFAULT_STORE), help="daemon store file")
    p.add_argument("--connect", default=os.environ.get("EDERA_CONNECT"), help="ederad address (unix:/path or host:port)")
    p.add_argument("--host-cpus", type=int, default=8, help="host CPUs when creating a new store")
    p.add_argument("--host-memory-mib", type=int, default=16384, help="host memory when creating a new store")
    _ctl_commands(p)
    return p


def remote_parser() -> _Parser:
    p = _Parser(prog="ederactl")
    _ctl_commands(p)
    return p


def daemon_parser() -> _Parser:
    p = _Parser(prog="ederad", description="Host daemon: supervises zones and serves ederactl requests.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--host-cpus", type=int, required=True)
    p.add_argument("--host-memory-mib", type=int, required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--listen", help="RPC address (unix:/path or host:port)")
    p.add_argument("--metrics-listen", help="serve /metrics on host:port")
    p.add_argument("--no-fsync", action="store_true", help="skip fsync on store writes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# -- command execution -----------------------------------------------------


def _print_table(out: TextIO, header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        out.write("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() + "\n")


def execute(stack: Stack, args: argparse.Namespace, stdin: bytes, out: TextIO, err: TextIO) -> int:
    d = stack.daemon
    g, cmd = args.group, getattr(args, "cmd", None)

    if g == "zone":
        if cmd == "create":
            rec = d.create_zone(ZoneSpec(args.kernel, args.memory, 0 if args.warm else args.vcpus), warm=args.warm)
            out.write(rec.id + "\n")
        elif cmd == "list":
            rows = []
            for r in d.list_zones(include_tombstones=args.all):
                wl = r.workload or {}
                rows.append([r.id, r.state.value, r.spec.role.value, r.spec.kernel_image, str(r.spec.memory_mib),
                             str(r.spec.vcpus), str(r.granted_pages), wl.get("pod") or wl.get("device") or "-"])
            _print_table(out, ["ID", "STATE", "ROLE", "KERNEL", "MEMORY_MIB", "VCPUS", "PAGES", "WORKLOAD"], rows)
        elif cmd == "destroy":
            d.destroy_zone(args.zone_id)
            out.write(f"{args.zone_id} {d.get(args.zone_id).state.value}\n")
        elif cmd == "activate":
            out.write(f"{args.zone_id} {d.activate_zone(args.zone_id, args.cpus, args.memory).state.value}\n")
        elif cmd == "quarantine":
            out.write(f"{args.zone_id} {d.quarantine_zone(args.zone_id).state.value}\n")
        elif cmd == "release":
            out.write(f"{args.zone_id} {d.release_zone(args.zone_id).state.value}\n")
        elif cmd == "exec":
            argv = [a for a in args.argv if a != "--"] if args.argv[:1] == ["--"] else args.argv
            if not argv:
                raise UsageError("ederactl zone exec: a command is required\n")
            res = d.exec(args.zone_id, argv, stdin)
            out.write(res.stdout.decode(errors="replace"))
            err.write(res.stderr.decode(errors="replace"))
            if res.exit_code != 0:
                err.write(f"exit status {res.exit_code}\n")
                return 1
        return 0

    if g == "pod":
        cri = stack.cri
        if cmd == "apply":
            text = stdin if args.filename == "-" else Path(args.filename).read_bytes()
            code = 0
            for pod in parse_manifests(text):
                if not pod.managed:
                    err.write(f"pod/{pod.ref} skipped: runtimeClassName {pod.runtime_class or '<none>'!r} is not managed by this runtime\n")
                    code = 1
                    continue
                cri.apply(pod)
            diff = cri.reconcile()
            for ref, why in diff.failed:
                err.write(f"reconcile {ref}: {why}\n")
                code = 1
            bindings = {b.pod: b for b in cri.list_bindings()}
            for pod in parse_manifests(text):
                if pod.managed and pod.ref in bindings:
                    b = bindings[pod.ref]
                    out.write(f"pod/{pod.ref} applied (managed) zone {b.zone} {b.state.value}\n")
            return code
        if cmd == "delete":
            if not cri.delete(args.namespace, args.name):
                err.write(f"pod {args.namespace}/{args.name} not found\n")
                return 1
            cri.reconcile()
            out.write(f"pod/{args.namespace}/{args.name} deleted\n")
            return 0
        if cmd == "list":
            rows = [[r["pod"], "yes" if r["managed"] else "no", r["zone"] or "-", r["state"]] for r in cri.list_pods()]
            _print_table(out, ["POD", "MANAGED", "ZONE", "STATE"], rows)
            return 0

    if g == "device":
        if cmd == "attach":
            spec = ZoneSpec(args.kernel, args.memory, 1)
            att = d.attach_device(args.device_id, args.mode, spec, slices=args.slices)
            out.write(f"{att.device_id} {att.mode.value} driver {att.driver_zone}\n")
        elif cmd == "bind":
            d.bind_slice(args.device_id, args.slice, args.zone_id)
            out.write(f"{args.device_id}[{args.slice}] -> {args.zone_id}\n")
        elif cmd == "unbind":
            d.unbind_slice(args.device_id, args.slice)
            out.write(f"{args.device_id}[{args.slice}] unbound (wiped)\n")
        elif cmd == "fault":
            report = d.inject_driver_fault(args.device_id)
            d.supervise()
            changed = report.changed()
            out.write(f"driver {report.driver_zone} faulted; zones changed: {len(changed)}\n")
            for z in changed:
                out.write(f"  {z} {report.states_before[z].value} -> {d.get(z).state.value}\n")
        elif cmd == "list":
            rows = []
            for dev_id in sorted(d.devices):
                att = d.devices[dev_id]
                bound = ",".join(f"{i}:{c}" for i, c in sorted(att.slices.items()) if c) or "-"
                rows.append([dev_id, att.mode.value, att.driver_zone, "yes" if att.driver_alive else "no", bound])
            _print_table(out, ["DEVICE", "MODE", "DRIVER", "ALIVE", "SLICES"], rows)
        return 0

    if g == "bench":
        if args.compare:
            cold = bench_startup(args.runs, warm=False, clock=args.clock)
            warm = bench_startup(args.runs, warm=True, clock=args.clock)
            out.write(format_report(cold) + "\n" + format_report(warm))
            out.write(f"warm/cold ratio: {warm.mean_ms / cold.mean_ms:.4f}\n")
        else:
            out.write(format_report(bench_startup(args.runs, warm=args.warm, clock=args.clock)))
        return 0

    if g == "scenario":
        if cmd == "list":
            out.write("".join(n + "\n" for n in SCENARIOS))
            return 0
        names = list(SCENARIOS) if args.name == "all" else [args.name]
        passed = 0
        for name in names:
            res = run_scenario(name)
            if res.passed:
                passed += 1
                out.write(f"PASS {name} ({len(res.checks)} checks, {res.elapsed_s:.3f}s)\n")
            else:
                out.write(f"FAIL {name}: {res.error}\n")
            for what, ok in res.checks:
                out.write(f"  [{'ok' if ok else 'FAILED'}] {what}\n")
        out.write(f"{passed}/{len(names)} passed\n")
        return 0 if passed == len(names) else 1

    if g == "metrics":
        out.write(stack.orchestrator.render_metrics())
        return 0
    raise UsageError(f"unknown command {g} {cmd}\n")


def _run_guarded(fn: Callable[[], int], err: TextIO) -> int:
    try:
        return fn()
    except UsageError as e:
        err.write(str(e))
        return 2
    except _HelpExit as e:
        return int(e.args[0]) if e.args else 0
    except (EderaError, ValueError, KeyError, OSError) as e:
        name = type(e).__name__
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        err.write(f"error: {name}: {msg}\n")
        return 1


# -- ederactl --------------------------------------------------------------


def _strip_globals(argv: list[str]) -> list[str]:
    """Drop client-only options before forwarding argv to the daemon."""
    out, skip = [], False
    flags = {"--store", "--connect", "--host-cpus", "--host-memory-mib"}
    for a in argv:
        if skip:
            skip = False
            continue
        if a in flags:
            skip = True
            continue
        if a.split("=", 1)[0] in flags:
            continue
        out.append(a)
    return out


def ederactl(argv: Optional[list[str]] = None, stdin: Optional[bytes] = None,
             out: Optional[TextIO] = None, err: Optional[TextIO] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    err = err or sys.stderr

    def run() -> int:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            args = ctl_parser().parse_args(argv)
        data = stdin
        if args.group == "pod" and args.cmd == "apply" and args.filename == "-" and data is None:
            data = sys.stdin.buffer.read()
        if args.connect:
            fwd = _strip_globals(argv)
            if args.group == "pod" and args.cmd == "apply" and args.filename != "-":
                data = Path(args.filename).read_bytes()
                i = fwd.index(args.filename)
                fwd[i] = "-"
            code, o, e = call(args.connect, fwd, data or b"")
            out.write(o.decode(errors="replace"))
            err.write(e.decode(errors="replace"))
            return code
        cfg = DaemonConfig(host=HostConfig.from_mib(args.host_cpus, args.host_memory_mib), store_path=args.store)
        stack = build_stack(cfg, clock=WallClock())
        try:
            return execute(stack, args, data or b"", out, err)
        finally:
            stack.close()

    return _run_guarded(run, err)


# -- ederad ----------------------------------------------------------------


def _serve_handler(stack: Stack) -> Callable[[list[str], bytes], tuple[int, bytes, bytes]]:
    def handle(argv: list[str], stdin: bytes) -> tuple[int, bytes, bytes]:
        out, err = io.StringIO(), io.StringIO()

        def run() -> int:
            with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
                args = remote_parser().parse_args(argv)
            return execute(stack, args, stdin, out, err)

        code = _run_guarded(run, err)
        return code, out.getvalue().encode(), err.getvalue().encode()

    return handle


def ederad(argv: Optional[list[str]] = None, stop: Optional[threading.Event] = None,
           ready: Optional[Callable[[dict], None]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    err = sys.stderr

    def run() -> int:
        args = daemon_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        cfg = DaemonConfig(host=HostConfig.from_mib(args.host_cpus, args.host_memory_mib),
                           store_path=args.store, fsync=not args.no_fsync)
        stack = build_stack(cfg, clock=WallClock())
        live = [r for r in stack.daemon.list_zones(include_tombstones=False)]
        host = stack.daemon.hv.host
        sys.stdout.write(f"ederad: store {args.store}; host {host.cpu_count} cpus, {host.page_count} pages; "
                         f"{len(live)} live zones restored\n")
        sys.stdout.flush()
        if not args.listen and not args.metrics_listen:
            stack.close()
            return 0
        lock = threading.Lock()
        servers = []
        info = {}
        if args.listen:
            srv = RpcServer(args.listen, _serve_handler(stack), lock)
            srv.start()
            servers.append(srv)
            info["listen"] = srv.address
        if args.metrics_listen:
            ms = MetricsServer(args.metrics_listen, stack.orchestrator.render_metrics, lock)
            ms.start()
            servers.append(ms)
            info["metrics"] = ms.address
        sys.stdout.write("".join(f"ederad: {k} on {v}\n" for k, v in info.items()))
        sys.stdout.flush()
        halt = stop or threading.Event()
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                signal.signal(sig, lambda *_: halt.set())
        if ready:
            ready(info)
        try:
            while not halt.wait(STEP_INTERVAL_S):
                with lock:
                    try:
                        stack.step()
                    except EderaError as e:
                        log.warning("supervision step: %s", e)
        finally:
            for s in servers:
                s.shutdown()
            with lock:
                stack.close()
        return 0

    return _run_guarded(run, err)


def main(argv: Optional[list[str]] = None) -> int:
    """``python -m edera {ederactl|ederad} ...``"""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("ederactl", "ederad"):
        sys.stderr.write("usage: python -m edera {ederactl,ederad} ...\n")
        return 2
    prog, rest = argv[0], argv[1:]
    return ederactl(rest) if prog == "ederactl" else ederad(rest)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
