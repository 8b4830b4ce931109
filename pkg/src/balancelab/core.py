"""Domain types and the dispatch/release lifecycle shared by the simulator and the proxy."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional

GET = "GET"
POST = "POST"
METHODS = (GET, POST)

#: Connection slots are unlimited unless a finite maxconn is configured.
UNLIMITED = None

#: Default per-request patience window, in seconds.
DEFAULT_DEADLINE_S = 3.0


class BalanceError(Exception):
    """Base class for all balancelab errors."""


class EmptyPool(BalanceError):
    """No up server is available for selection."""


class AllServersFull(BalanceError):
    """Every eligible server is at its connection limit."""


class UnderflowRelease(BalanceError):
    """release() was called on a server with zero active connections."""


class UnknownServer(BalanceError):
    """The referenced server_id is not part of the pool."""


class InvalidWeight(BalanceError):
    """Server weights must be >= 1."""


class InvalidConfig(BalanceError):
    """The algorithm configuration cannot be applied to this pool or request."""


def ip_to_int(dotted: str) -> int:
    """Convert a dotted-quad IPv4 string to its 32-bit integer value."""
    parts = dotted.split(".")
    if len(parts) != 4:
        raise ValueError(f"not an IPv4 address: {dotted!r}")
    value = 0
    for part in parts:
        octet = int(part)
        if not 0 <= octet <= 255:
            raise ValueError(f"not an IPv4 address: {dotted!r}")
        value = (value << 8) | octet
    return value


def int_to_ip(value: int) -> str:
    return ".".join(str((value >> shift) & 0xFF) for shift in (24, 16, 8, 0))


class Headers:
    """Ordered header map with case-insensitive lookup.

    Duplicate names are preserved in iteration order; get() returns the first
    occurrence, matching how proxies read request headers.
    """

    __slots__ = ("_items", "_index")

    def __init__(self, items: Iterable[tuple[str, str]] | dict[str, str] = ()):
        if isinstance(items, Headers):
            items = items._items
        elif isinstance(items, dict):
            items = list(items.items())
        self._items: list[tuple[str, str]] = [(str(k), str(v)) for k, v in items]
        index: dict[str, str] = {}
        for name, value in self._items:
            index.setdefault(name.lower(), value)
        self._index = index

    def get(self, name: str, default: Optional[str] = None) -> Optional[str]:
        return self._index.get(name.lower(), default)

    def __contains__(self, name: str) -> bool:
        return name.lower() in self._index

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Headers):
            return self._items == other._items
        return NotImplemented

    def __repr__(self) -> str:
        return f"Headers({self._items!r})"


@dataclass(frozen=True)
class HardwareProfile:
    """Static hardware description of one backend machine."""

    cores: int
    core_speed_ghz: float
    ram_gb: float
    label: str = ""

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError("cores must be >= 1")
        if self.core_speed_ghz <= 0:
            raise ValueError("core_speed_ghz must be > 0")
        if self.ram_gb <= 0:
            raise ValueError("ram_gb must be > 0")


#: Placeholder hardware for pools where the profile is irrelevant (proxy mode).
GENERIC_PROFILE = HardwareProfile(cores=16, core_speed_ghz=1.80, ram_gb=32.0, label="generic")


@dataclass(slots=True)
class Request:
    """One routable unit of work."""

    request_id: int
    arrival_time: float
    method: str
    path: str
    query: Optional[str] = None
    headers: Headers = field(default_factory=Headers)
    client_ip: int = 0
    rdp_cookie: Optional[str] = None
    deadline: float = DEFAULT_DEADLINE_S

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unsupported method {self.method!r}")
        # '//' is exactly an empty intermediate segment; a single trailing '/' is fine.
        if not self.path.startswith("/") or "//" in self.path:
            raise ValueError(f"malformed path {self.path!r}")
        if self.deadline <= 0:
            raise ValueError("deadline must be > 0")
        if not 0 <= self.client_ip < (1 << 32):
            raise ValueError("client_ip must be a 32-bit value")
        if not isinstance(self.headers, Headers):
            self.headers = Headers(self.headers)


@dataclass
class ServerSpec:
    """Admin-assigned description of one backend server.

    weight is the live weight; the value present at pool construction is kept
    in the pool's static snapshot.
    """

    server_id: int
    name: str = ""
    weight: int = 1
    maxconn: Optional[int] = UNLIMITED
    profile: HardwareProfile = GENERIC_PROFILE

    def __post_init__(self):
        if self.server_id < 1:
            raise ValueError("server_id must be a positive integer")
        if self.weight < 1:
            raise InvalidWeight(f"weight must be >= 1, got {self.weight}")
        if self.maxconn is not None and self.maxconn < 1:
            raise ValueError("maxconn must be >= 1 or UNLIMITED")
        if not self.name:
            self.name = f"srv{self.server_id}"


@dataclass(slots=True)
class ServerState:
    """Live, mutable state of one backend server."""

    active_connections: int = 0
    cpu_utilization: float = 0.0
    up: bool = True
    total_dispatched: int = 0


class SelectionDecision(NamedTuple):
    """Outcome of one dispatch: either a chosen server or a rejection."""

    chosen: Optional[int]
    algorithm: str
    fallback_used: bool = False
    rejected: bool = False


class MetricsRecord(NamedTuple):
    """Per-request outcome produced by the simulator or a proxy driver."""

    request_id: int
    method: str
    server_id: Optional[int]
    arrival_time: float
    response_time: Optional[float]
    deadline_met: bool
    rejected: bool


class BackendPool:
    """Id-ordered server list plus the per-algorithm cursors that persist across dispatches.

    All mutation goes through `lock`; dispatch/release/set_weight/set_up each
    form one atomic read-modify-write, which is the whole concurrency contract
    the proxy workers rely on.
    """

    def __init__(self, specs: Iterable[ServerSpec]):
        ordered = sorted(specs, key=lambda s: s.server_id)
        if not ordered:
            raise ValueError("a pool needs at least one server")
        ids = [s.server_id for s in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError("server_id values must be unique")
        self.servers: list[tuple[ServerSpec, ServerState]] = [
            (spec, ServerState()) for spec in ordered
        ]
        self._by_id = {pair[0].server_id: pair for pair in self.servers}
        self.static_weight_snapshot: tuple[int, ...] = tuple(s.weight for s in ordered)
        self._static_by_id = {s.server_id: s.weight for s in ordered}
        self.lock = threading.Lock()
        # Persistent per-algorithm state. Cycle tuples are (order, pos, credit)
        # where order is a list of (server_id, weight) frozen at cycle start.
        self._rr_cycle: Optional[list[tuple[int, int]]] = None
        self._rr_pos = 0
        self._rr_credit = 0
        self._static_cycle: Optional[list[tuple[int, int]]] = None
        self._static_pos = 0
        self._static_credit = 0
        self._first_idx = 0
        self._lc_last: Optional[int] = None
        self._rng = None
        self._ups: list[tuple[ServerSpec, ServerState]] = []
        self._sum_weight = 0
        self._rebuild_up_cache()

    # -- bookkeeping -------------------------------------------------------

    def _rebuild_up_cache(self) -> None:
        self._ups = [pair for pair in self.servers if pair[1].up]
        self._sum_weight = sum(spec.weight for spec, _ in self._ups)

    def up_pairs(self) -> list[tuple[ServerSpec, ServerState]]:
        """Up servers in id order, as (spec, state) pairs."""
        return self._ups

    @property
    def sum_weight(self) -> int:
        return self._sum_weight

    @property
    def up_count(self) -> int:
        return len(self._ups)

    def pair_of(self, server_id: int) -> tuple[ServerSpec, ServerState]:
        try:
            return self._by_id[server_id]
        except KeyError:
            raise UnknownServer(f"no server with id {server_id}") from None

    def spec_of(self, server_id: int) -> ServerSpec:
        return self.pair_of(server_id)[0]

    def state_of(self, server_id: int) -> ServerState:
        return self.pair_of(server_id)[1]

    def static_weight_of(self, server_id: int) -> int:
        return self._static_by_id[server_id]

    def set_up(self, server_id: int, up: bool) -> None:
        """Flip a server's up flag; resets cycle cursors on membership change."""
        with self.lock:
            spec, state = self.pair_of(server_id)
            if state.up == up:
                return
            state.up = up
            self._rebuild_up_cache()
            self._rr_cycle = None
            self._static_cycle = None

    def algo_rng(self, seed: int):
        """Pool-scoped generator for the random-family selectors, seeded lazily."""
        if self._rng is None:
            from .algorithms import Rng

            self._rng = Rng(seed)
        return self._rng


_SELECTORS = None


def dispatch(request: Request, pool: BackendPool, config) -> SelectionDecision:
    """Select a server for the request and claim one connection slot on it.

    Selection and the counter increments happen under the pool lock as one
    atomic step. When no server can accept, returns a rejected decision and
    leaves every counter untouched.
    """
    global _SELECTORS
    if _SELECTORS is None:
        from .algorithms import SELECTORS

        _SELECTORS = SELECTORS
    try:
        selector = _SELECTORS[config.kind]
    except KeyError:
        raise InvalidConfig(f"unknown algorithm kind {config.kind!r}") from None
    with pool.lock:
        if not pool._ups:
            return SelectionDecision(None, config.kind, False, True)
        try:
            server_id, fallback_used = selector(pool, request, config)
        except (EmptyPool, AllServersFull):
            return SelectionDecision(None, config.kind, False, True)
        state = pool._by_id[server_id][1]
        state.active_connections += 1
        state.total_dispatched += 1
        return SelectionDecision(server_id, config.kind, fallback_used, False)


def release(server_id: int, pool: BackendPool) -> None:
    """Return one connection slot; the inverse of a successful dispatch."""
    with pool.lock:
        try:
            state = pool._by_id[server_id][1]
        except KeyError:
            raise UnknownServer(f"no server with id {server_id}") from None
        if state.active_connections < 1:
            raise UnderflowRelease(f"server {server_id} has no active connections")
        state.active_connections -= 1


def set_weight(pool: BackendPool, server_id: int, new_weight: int) -> None:
    """Change a server's live weight.

    The static snapshot is untouched, and a round-robin cycle already in
    progress finishes with the weights it started with.
    """
    if new_weight < 1:
        raise InvalidWeight(f"weight must be >= 1, got {new_weight}")
    with pool.lock:
        spec, _ = pool.pair_of(server_id)
        spec.weight = new_weight
        pool._rebuild_up_cache()
