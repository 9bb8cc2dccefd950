"""Local control RPC for ``ederactl --connect``.

One request per connection, framed with the IDM codec: the client sends a
single ExecRequest whose ARGV fields are the ederactl arguments (and STDIN
for ``pod apply -f -``); the server answers with ExecOutput chunks on fd 1/2
and a final ExitEvent carrying the exit code. Requests are applied one at a
time.
"""

from __future__ import annotations

import http.server
import os
import socket
import socketserver
import struct
import threading
from typing import Callable, Union

from .agent import OUTPUT_CHUNK, exec_request_payload, exit_code_of
from .errors import IdmError
from .idm import Frame, MsgType, Tag, read_frame, tlv_all, tlv_decode, tlv_encode, tlv_get

Handler = Callable[[list[str], bytes], tuple[int, bytes, bytes]]
Address = Union[str, tuple[str, int]]


def parse_addr(addr: str) -> tuple[str, Address]:
    """``unix:/path`` or ``host:port`` (``:port`` means 127.0.0.1)."""
    if addr.startswith("unix:"):
        return "unix", addr[5:]
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; use unix:/path or host:port")
    return "tcp", (host or "127.0.0.1", int(port))


def _reply_frames(code: int, out: bytes, err: bytes) -> list[Frame]:
    frames = []
    for fd, data in ((1, out), (2, err)):
        for i in range(0, len(data), OUTPUT_CHUNK):
            payload = tlv_encode([(Tag.FD, bytes([fd])), (Tag.DATA, data[i : i + OUTPUT_CHUNK])])
            frames.append(Frame(MsgType.EXEC_OUTPUT, 1, payload))
    frames.append(Frame(MsgType.EXIT_EVENT, 1, tlv_encode([(Tag.EXIT_CODE, struct.pack(">i", code))])))
    return frames


class _RequestHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: "_Mixin" = self.server  # type: ignore[assignment]
        try:
            frame = read_frame(self.rfile.read)
        except IdmError as e:
            self._send(_reply_frames(2, b"", f"bad request: {e}\n".encode()))
            return
        if frame is None:
            return
        if frame.msg_type is not MsgType.EXEC_REQUEST:
            self._send(_reply_frames(2, b"", b"bad request: expected ExecRequest\n"))
            return
        fields = tlv_decode(frame.payload)
        argv = [a.decode() for a in tlv_all(fields, Tag.ARGV)]
        stdin = tlv_get(fields, Tag.STDIN, b"")
        with server.lock:
            code, out, err = server.handler(argv, stdin)
        self._send(_reply_frames(code, out, err))

    def _send(self, frames: list[Frame]) -> None:
        self.wfile.write(b"".join(f.encode() for f in frames))


class _Mixin(socketserver.ThreadingMixIn):
    daemon_threads = True
    allow_reuse_address = True
    handler: Handler
    lock: threading.Lock


class _TcpServer(_Mixin, socketserver.TCPServer):
    pass


class _UnixServer(_Mixin, socketserver.UnixStreamServer):
    pass


class RpcServer:
    def __init__(self, addr: str, handler: Handler, lock: threading.Lock | None = None):
        kind, where = parse_addr(addr)
        if kind == "unix":
            if os.path.exists(where):
                os.unlink(where)
            self._srv: _Mixin = _UnixServer(where, _RequestHandler)
        else:
            self._srv = _TcpServer(where, _RequestHandler)
        self._srv.handler = handler
        self._srv.lock = lock or threading.Lock()
        self._kind = kind

    @property
    def address(self) -> str:
        if self._kind == "unix":
            return "unix:" + self._srv.server_address  # type: ignore[operator]
        host, port = self._srv.server_address[:2]  # type: ignore[index]
        return f"{host}:{port}"

    def serve_forever(self) -> None:
        self._srv.serve_forever(poll_interval=0.1)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def shutdown(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()


def call(addr: str, argv: list[str], stdin: bytes = b"", timeout: float = 30.0) -> tuple[int, bytes, bytes]:
    kind, where = parse_addr(addr)
    family = socket.AF_UNIX if kind == "unix" else socket.AF_INET
    with socket.socket(family, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(where)
        sock.sendall(Frame(MsgType.EXEC_REQUEST, 1, exec_request_payload(argv, stdin)).encode())
        rfile = sock.makefile("rb")
        out, err = bytearray(), bytearray()
        while True:
            frame = read_frame(rfile.read)
            if frame is None:
                raise ConnectionError("server closed the connection without an exit code")
            if frame.msg_type is MsgType.EXIT_EVENT:
                return exit_code_of(frame), bytes(out), bytes(err)
            fields = tlv_decode(frame.payload)
            target = err if tlv_get(fields, Tag.FD) == b"\x02" else out
            target += tlv_get(fields, Tag.DATA, b"")


class MetricsServer:
    """Serves ``render()`` as text/plain on GET /metrics."""

    def __init__(self, addr: str, render: Callable[[], str], lock: threading.Lock | None = None):
        kind, where = parse_addr(addr)
        if kind != "tcp":
            raise ValueError("metrics endpoint needs host:port")
        guard = lock or threading.Lock()

        class _H(http.server.BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802
                if self.path.split("?")[0] != "/metrics":
                    self.send_error(404)
                    return
                with guard:
                    body = render().encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/plain; version=0.0.4")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._srv = http.server.ThreadingHTTPServer(where, _H)

    @property
    def address(self) -> str:
        host, port = self._srv.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self._srv.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)
        t.start()
        return t

    def shutdown(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()
