"""Live reverse proxy: real sockets in front of the same selection engine.

One HTTP/1.1 exchange per client connection, Connection: close on both legs.
N worker threads accept and proxy concurrently; every pool mutation (dispatch,
release, health transitions) goes through the pool's serialized critical
section, exactly as the simulator drives it.
"""

from __future__ import annotations

import os
import signal
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, TextIO

from . import core
from .algorithms import AlgorithmConfig, Rng
from .core import (
    GET,
    POST,
    BackendPool,
    BalanceError,
    Headers,
    Request,
    ServerSpec,
    ip_to_int,
)

MAX_HEAD_BYTES = 65536


class BindError(BalanceError):
    """The listen address could not be bound."""


class ParseError(BalanceError):
    """The client sent something that is not a parseable HTTP/1.x request."""


@dataclass
class BackendAddress:
    """One proxied backend: where it lives and how it may be loaded."""

    name: str
    host: str
    port: int
    weight: int = 1
    maxconn: Optional[int] = None


@dataclass
class ProxyConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    maxconn: int = 256
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    balance: AlgorithmConfig = field(default_factory=lambda: AlgorithmConfig(kind="roundrobin"))
    servers: list[BackendAddress] = field(default_factory=list)
    health_interval_s: float = 2.0
    spread_checks_pct: float = 0.0
    fall_threshold: int = 3
    rise_threshold: int = 2
    rdp_cookie_name: str = "msts"
    access_log: Optional[str] = None
    backend_timeout_s: float = 10.0
    probe_timeout_s: float = 1.0

    def __post_init__(self):
        if not self.servers:
            raise ValueError("proxy needs at least one backend server")
        if self.maxconn < 1:
            raise ValueError("maxconn must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0.0 <= self.spread_checks_pct <= 50.0:
            raise ValueError("spread_checks_pct must be in [0, 50]")
        if self.health_interval_s <= 0:
            raise ValueError("health_interval_s must be > 0")


@dataclass
class HealthStatus:
    """Probe bookkeeping for one backend."""

    server_id: int
    up: bool = True
    consecutive_failures: int = 0
    consecutive_successes: int = 0
    last_check: Optional[float] = None


# -- HTTP plumbing -----------------------------------------------------------


def recv_head(sock: socket.socket) -> tuple[bytes, bytes]:
    """Read up to and including the blank line; returns (head, leftover body bytes)."""
    data = b""
    while b"\r\n\r\n" not in data:
        if len(data) > MAX_HEAD_BYTES:
            raise ParseError("header block too large")
        chunk = sock.recv(8192)
        if not chunk:
            if data:
                raise ParseError("connection closed mid-header")
            return b"", b""
        data += chunk
    head, _, rest = data.partition(b"\r\n\r\n")
    return head, rest


def parse_head(head: bytes) -> tuple[str, str, str, list[tuple[str, str]]]:
    """Parse a request head into (method, target, version, header pairs)."""
    try:
        text = head.decode("iso-8859-1")
    except UnicodeDecodeError as err:  # pragma: no cover - latin-1 cannot fail
        raise ParseError(str(err)) from None
    lines = text.split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3:
        raise ParseError(f"malformed request line: {lines[0]!r}")
    method, target, version = parts
    if not version.startswith("HTTP/1."):
        raise ParseError(f"unsupported protocol {version!r}")
    headers: list[tuple[str, str]] = []
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep or not name.strip():
            raise ParseError(f"malformed header line: {line!r}")
        headers.append((name.strip(), value.strip()))
    return method, target, version, headers


def cookie_value(headers: Headers, cookie_name: str) -> Optional[str]:
    raw = headers.get("Cookie")
    if raw is None:
        return None
    for part in raw.split(";"):
        name, sep, value = part.strip().partition("=")
        if sep and name == cookie_name:
            return value
    return None


def _build_head(first_line: str, headers: list[tuple[str, str]], extra: list[tuple[str, str]]) -> bytes:
    # Connection is forced to close on both legs; everything else is relayed as-is.
    lines = [first_line]
    for name, value in headers:
        if name.lower() in ("connection", "proxy-connection", "keep-alive"):
            continue
        lines.append(f"{name}: {value}")
    for name, value in extra:
        lines.append(f"{name}: {value}")
    lines.append("Connection: close")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("iso-8859-1")


def _simple_response(status: int, reason: str, body: str) -> bytes:
    payload = body.encode("utf-8")
    return (
        f"HTTP/1.1 {status} {reason}\r\n"
        f"Content-Type: text/plain\r\n"
        f"Content-Length: {len(payload)}\r\n"
        f"Connection: close\r\n\r\n"
    ).encode("iso-8859-1") + payload


def _recv_exact(sock: socket.socket, buffered: bytes, length: int) -> bytes:
    data = buffered
    while len(data) < length:
        chunk = sock.recv(min(65536, length - len(data)))
        if not chunk:
            raise ParseError("connection closed mid-body")
        data += chunk
    return data


# -- health checking ----------------------------------------------------------


class HealthMonitor:
    """Periodic GET / probes with optional jitter, driving pool up/down flips.

    A probe succeeds when any status below 500 arrives within the probe
    timeout. Forwarding errors feed the same failure counters, so a dead
    backend is evicted even between probes.
    """

    def __init__(self, config: ProxyConfig, pool: BackendPool, utilization_feed: bool):
        self.config = config
        self.pool = pool
        self.utilization_feed = utilization_feed
        self.status = {
            spec.server_id: HealthStatus(server_id=spec.server_id)
            for spec, _ in pool.servers
        }
        self._addresses = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._rng = Rng(config.balance.rng_seed ^ 0x9E3779B9)
        for backend, (spec, _) in zip(config.servers, pool.servers):
            self._addresses[spec.server_id] = (backend.host, backend.port)

    def next_gap(self) -> float:
        """Nominal interval jittered by +/- spread_checks_pct percent."""
        pct = self.config.spread_checks_pct
        if pct == 0.0:
            return self.config.health_interval_s
        spread = (2.0 * self._rng.uniform() - 1.0) * (pct / 100.0)
        return self.config.health_interval_s * (1.0 + spread)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="health", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def record_failure(self, server_id: int) -> None:
        with self._lock:
            status = self.status[server_id]
            status.consecutive_failures += 1
            status.consecutive_successes = 0
            if status.up and status.consecutive_failures >= self.config.fall_threshold:
                status.up = False
                self.pool.set_up(server_id, False)

    def record_success(self, server_id: int) -> None:
        with self._lock:
            status = self.status[server_id]
            status.consecutive_successes += 1
            status.consecutive_failures = 0
            if not status.up and status.consecutive_successes >= self.config.rise_threshold:
                status.up = True
                self.pool.set_up(server_id, True)

    def probe(self, server_id: int) -> bool:
        host, port = self._addresses[server_id]
        timeout = self.config.probe_timeout_s
        try:
            with socket.create_connection((host, port), timeout=timeout) as sock:
                sock.settimeout(timeout)
                sock.sendall(
                    f"GET / HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n".encode()
                )
                line = b""
                while b"\r\n" not in line:
                    chunk = sock.recv(1024)
                    if not chunk:
                        break
                    line += chunk
            parts = line.split(b" ", 2)
            ok = len(parts) >= 2 and int(parts[1]) < 500
        except (OSError, ValueError):
            ok = False
        status = self.status[server_id]
        status.last_check = time.monotonic()
        if ok:
            self.record_success(server_id)
        else:
            self.record_failure(server_id)
        return ok

    def read_utilization(self, server_id: int) -> float:
        """Fetch GET /utilization; backends without the endpoint count as idle."""
        host, port = self._addresses[server_id]
        timeout = self.config.probe_timeout_s
        try:
            with socket.create_connection((host, port), timeout=timeout) as sock:
                sock.settimeout(timeout)
                sock.sendall(
                    f"GET /utilization HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n".encode()
                )
                data = b""
                while True:
                    chunk = sock.recv(4096)
                    if not chunk:
                        break
                    data += chunk
            head, _, body = data.partition(b"\r\n\r\n")
            status_line = head.split(b"\r\n", 1)[0].split(b" ")
            if int(status_line[1]) != 200:
                return 0.0
            value = float(body.strip().split(b"\n")[0])
        except (OSError, ValueError, IndexError):
            return 0.0
        return min(max(value, 0.0), 1.0)

    def _run(self) -> None:
        # first round fires almost immediately so a dead backend is noticed fast
        first = time.monotonic() + 0.01
        due = {sid: first for sid in self.status}
        while not self._stop.is_set():
            now = time.monotonic()
            for sid, when in sorted(due.items()):
                if when <= now:
                    self.probe(sid)
                    if self.utilization_feed:
                        value = self.read_utilization(sid)
                        with self.pool.lock:
                            self.pool.state_of(sid).cpu_utilization = value
                    due[sid] = time.monotonic() + self.next_gap()
            self._stop.wait(timeout=0.05)


def health_loop(config: ProxyConfig, pool: BackendPool) -> HealthMonitor:
    """Start the periodic prober against an existing pool; returns the running monitor."""
    monitor = HealthMonitor(config, pool, utilization_feed=config.balance.kind == "cpu_random")
    monitor.start()
    return monitor


# -- the proxy ------------------------------------------------------------------


class ReverseProxy:
    """Accepts client connections, proxies one exchange each, and balances via core.dispatch."""

    def __init__(self, config: ProxyConfig, log_stream: Optional[TextIO] = sys.stdout):
        self.config = config
        specs = []
        for i, backend in enumerate(config.servers):
            specs.append(
                ServerSpec(
                    server_id=i + 1,
                    name=backend.name or f"srv{i + 1}",
                    weight=backend.weight,
                    maxconn=backend.maxconn,
                )
            )
        self.pool = BackendPool(specs)
        self._backend_by_id = {
            spec.server_id: backend for spec, backend in zip(specs, config.servers)
        }
        self.health = HealthMonitor(
            config, self.pool, utilization_feed=config.balance.kind == "cpu_random"
        )
        self._log_stream = log_stream
        self._log_lock = threading.Lock()
        self._listen_sock: Optional[socket.socket] = None
        self._workers: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._conn_lock = threading.Lock()
        self._active_conns = 0
        self._next_request_id = 0
        self.host = config.listen_host
        self.port = config.listen_port

    # -- lifecycle --

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.config.listen_host, self.config.listen_port))
        except OSError as err:
            sock.close()
            raise BindError(f"cannot bind {self.config.listen_host}:{self.config.listen_port}: {err}")
        sock.listen(128)
        # blocking accepts: the kernel wakes exactly one worker per connection
        # (a timeout/poll loop here makes every connection wake every worker)
        self._listen_sock = sock
        self.host, self.port = sock.getsockname()[:2]
        for i in range(self.config.workers):
            thread = threading.Thread(target=self._worker, name=f"proxy-w{i}", daemon=True)
            thread.start()
            self._workers.append(thread)
        self.health.start()

    def shutdown(self) -> None:
        """Graceful drain: stop accepting, finish in-flight exchanges, stop probing."""
        self._stopping.set()
        if self._listen_sock is not None:
            try:
                # shutdown(2) wakes every worker parked in accept(); close() alone would not
                self._listen_sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listen_sock.close()
            except OSError:
                pass
        for thread in self._workers:
            thread.join(timeout=10)
        self.health.stop()
        if self._log_stream is not None:
            try:
                self._log_stream.flush()
            except (OSError, ValueError):
                pass

    # -- internals --

    def _log(self, client_ip: str, method: str, path: str, status: int, server: str, ms: float) -> None:
        if self._log_stream is None:
            return
        line = f"{time.time():.3f} {client_ip} {method} {path} {status} {server} {ms:.1f}\n"
        with self._log_lock:
            try:
                self._log_stream.write(line)
            except (OSError, ValueError):
                pass

    def _worker(self) -> None:
        assert self._listen_sock is not None
        while True:
            try:
                conn, addr = self._listen_sock.accept()
            except OSError:
                return  # listen socket closed: drain and exit
            if self._stopping.is_set():
                try:
                    conn.close()
                except OSError:
                    pass
                return
            try:
                conn.settimeout(self.config.backend_timeout_s)
                self._handle(conn, addr)
            finally:
                try:
                    conn.close()
                except OSError:
                    pass

    def _handle(self, conn: socket.socket, addr) -> None:
        started = time.monotonic()
        client_ip = addr[0]
        with self._conn_lock:
            admitted = self._active_conns < self.config.maxconn
            if admitted:
                self._active_conns += 1
        if not admitted:
            conn.sendall(_simple_response(503, "Service Unavailable", "proxy at maxconn\n"))
            self._log(client_ip, "-", "-", 503, "-", 0.0)
            return
        method = path = "-"
        status = 0
        server_name = "-"
        try:
            conn.settimeout(self.config.backend_timeout_s)
            method, path, status, server_name = self._exchange(conn, client_ip)
        except ParseError:
            status = 400
            try:
                conn.sendall(_simple_response(400, "Bad Request", "malformed request\n"))
            except OSError:
                pass
        except OSError:
            status = 0  # client went away; nothing to answer
        finally:
            with self._conn_lock:
                self._active_conns -= 1
            self._log(client_ip, method, path, status,
                      server_name, (time.monotonic() - started) * 1000.0)

    def _exchange(self, conn: socket.socket, client_ip: str) -> tuple[str, str, int, str]:
        head, leftover = recv_head(conn)
        if not head:
            raise ParseError("empty request")
        method, target, version, header_pairs = parse_head(head)
        headers = Headers(header_pairs)
        path, _, query = target.partition("?")
        if method not in (GET, POST):
            conn.sendall(_simple_response(501, "Not Implemented", f"method {method} not supported\n"))
            return method, path, 501, "-"
        body = b""
        length_header = headers.get("Content-Length")
        if length_header is not None:
            try:
                length = int(length_header)
            except ValueError:
                raise ParseError(f"bad Content-Length {length_header!r}") from None
            body = _recv_exact(conn, leftover, length)[:length]
        with self._conn_lock:
            request_id = self._next_request_id
            self._next_request_id += 1
        try:
            ip_value = ip_to_int(client_ip)
        except ValueError:
            ip_value = 0
        try:
            request = Request(
                request_id=request_id,
                arrival_time=time.monotonic(),
                method=method,
                path=path if path.startswith("/") else "/",
                query=query or None,
                headers=headers,
                client_ip=ip_value,
                rdp_cookie=cookie_value(headers, self.config.rdp_cookie_name),
            )
        except ValueError as err:
            raise ParseError(str(err)) from None
        decision = core.dispatch(request, self.pool, self.config.balance)
        if decision.rejected:
            conn.sendall(_simple_response(503, "Service Unavailable", "no server available\n"))
            return method, path, 503, "-"
        spec = self.pool.spec_of(decision.chosen)
        backend = self._backend_by_id[decision.chosen]
        try:
            status = self._forward(conn, backend, spec.name, target, method, version,
                                   header_pairs, body)
            self.health.record_success(decision.chosen)
            return method, path, status, spec.name
        except (OSError, ParseError):
            self.health.record_failure(decision.chosen)
            try:
                conn.sendall(_simple_response(502, "Bad Gateway", "backend error\n"))
            except OSError:
                pass
            return method, path, 502, spec.name
        finally:
            core.release(decision.chosen, self.pool)

    def _forward(
        self,
        conn: socket.socket,
        backend: BackendAddress,
        server_name: str,
        target: str,
        method: str,
        version: str,
        header_pairs: list[tuple[str, str]],
        body: bytes,
    ) -> int:
        timeout = self.config.backend_timeout_s
        with socket.create_connection((backend.host, backend.port), timeout=timeout) as upstream:
            upstream.settimeout(timeout)
            upstream.sendall(_build_head(f"{method} {target} {version}", header_pairs, []) + body)
            resp_head, resp_leftover = recv_head(upstream)
            if not resp_head:
                raise ParseError("backend closed without a response")
            resp_text = resp_head.decode("iso-8859-1")
            resp_lines = resp_text.split("\r\n")
            status_parts = resp_lines[0].split(" ")
            if len(status_parts) < 2 or not status_parts[1].isdigit():
                raise ParseError(f"bad backend status line: {resp_lines[0]!r}")
            status = int(status_parts[1])
            resp_headers: list[tuple[str, str]] = []
            content_length: Optional[int] = None
            for line in resp_lines[1:]:
                if not line:
                    continue
                name, _, value = line.partition(":")
                name, value = name.strip(), value.strip()
                resp_headers.append((name, value))
                if name.lower() == "content-length":
                    content_length = int(value)
            conn.sendall(
                _build_head(resp_lines[0], resp_headers,
                            [("X-Balancelab-Server", server_name)])
            )
            if content_length is not None:
                remaining = content_length - len(resp_leftover)
                conn.sendall(resp_leftover[:content_length])
                while remaining > 0:
                    chunk = upstream.recv(min(65536, remaining))
                    if not chunk:
                        break
                    conn.sendall(chunk)
                    remaining -= len(chunk)
            else:
                conn.sendall(resp_leftover)
                while True:
                    chunk = upstream.recv(65536)
                    if not chunk:
                        break
                    conn.sendall(chunk)
        return status


def serve(config: ProxyConfig, log_stream: Optional[TextIO] = None) -> int:
    """Run the proxy until SIGINT/SIGTERM, then drain gracefully. Returns 0."""
    proxy = ReverseProxy(config, log_stream=log_stream if log_stream is not None else sys.stdout)
    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, _on_signal)
    try:
        proxy.start()
        print(f"balancelab proxy listening on {proxy.host}:{proxy.port}", file=sys.stderr)
        while not stop.is_set():
            stop.wait(timeout=0.2)
    finally:
        proxy.shutdown()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return 0
