"""The selection method catalog: every built-in balancer plus the CPU-filtered random variant.

Each selector is a pure decision over a pool snapshot, the request, and the
per-algorithm cursors the pool carries. Selectors are only ever invoked inside
the dispatch critical section, so cursor updates need no extra locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .core import AllServersFull, EmptyPool, InvalidConfig
from .hashing import MASK64, hash_text, map_hash_to_server, stable_hash

if TYPE_CHECKING:
    from .core import BackendPool, Request  # pragma: no cover

KINDS = (
    "random",
    "first",
    "leastconn",
    "source",
    "roundrobin",
    "static_rr",
    "uri",
    "header",
    "rdp_cookie",
    "url_param",
    "cpu_random",
)


class Rng:
    """SplitMix64 generator: tiny, fast, and seed-stable on every platform.

    Used instead of random.Random so that traces frozen into tests and CSV
    outputs can never drift with the Python version.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        """Uniform-ish integer in [0, n); the modulo bias is immaterial for n << 2**64."""
        return self.next_u64() % n

    def uniform(self) -> float:
        """Float in [0, 1)."""
        return self.next_u64() / 18446744073709551616.0

    def choice(self, seq):
        return seq[self.next_u64() % len(seq)]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), drawn by partial Fisher-Yates."""
        idx = list(range(n))
        for i in range(k):
            j = i + self.next_u64() % (n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]


@dataclass
class AlgorithmConfig:
    """Knobs for one selection method; `kind` names are the stable CLI/config strings."""

    kind: str
    power_n: int = 2
    uri_use_path: bool = True
    uri_use_query: bool = False
    uri_depth: int = 0
    header_name: str = ""
    param_name: Optional[str] = None
    cpu_threshold: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown algorithm kind {self.kind!r}")
        if self.power_n < 1:
            raise InvalidConfig("power_n must be >= 1")
        if self.uri_depth < 0:
            raise InvalidConfig("uri_depth must be >= 0")
        if self.kind == "uri" and not (self.uri_use_path or self.uri_use_query):
            raise InvalidConfig("uri needs at least one of path/query enabled")
        if self.kind == "header" and not self.header_name:
            raise InvalidConfig("header kind needs a header_name")
        if not 0.0 < self.cpu_threshold <= 1.0:
            raise InvalidConfig("cpu_threshold must be in (0, 1]")


# -- random family ----------------------------------------------------------


def _best_of_draw(pairs, power_n: int, rng: Rng) -> int:
    n = len(pairs)
    if n == 1:
        return pairs[0][0].server_id
    if power_n == 2 and n > 2:
        # allocation-free equivalent of sample_indices(n, 2): after the first
        # Fisher-Yates swap, position j2 holds 0 exactly when j2 == j1
        j1 = rng.next_u64() % n
        j2 = 1 + rng.next_u64() % (n - 1)
        a = pairs[j1]
        b = pairs[0 if j2 == j1 else j2]
        a_conn = a[1].active_connections
        b_conn = b[1].active_connections
        if a_conn < b_conn:
            return a[0].server_id
        if b_conn < a_conn:
            return b[0].server_id
        a_id = a[0].server_id
        b_id = b[0].server_id
        return a_id if a_id < b_id else b_id
    k = power_n if power_n < n else n
    best_id = -1
    best_conn = -1
    for i in rng.sample_indices(n, k):
        spec, state = pairs[i]
        conns = state.active_connections
        if best_id < 0 or conns < best_conn or (conns == best_conn and spec.server_id < best_id):
            best_id = spec.server_id
            best_conn = conns
    return best_id


def select_random(pool: "BackendPool", power_n: int, rng: Rng) -> int:
    """Draw power_n distinct up servers and return the least-loaded of them.

    Ties break toward the lowest server id. With power_n >= the up count the
    draw degenerates to a global least-connections pick.
    """
    ups = pool.up_pairs()
    if not ups:
        raise EmptyPool("random: no up server")
    return _best_of_draw(ups, power_n, rng)


def select_cpu_random(
    pool: "BackendPool",
    threshold: float,
    power_n: int,
    rng: Rng,
    utilization_feed=None,
) -> tuple[int, bool]:
    """Random draw restricted to servers whose CPU utilization is below threshold.

    The utilization feed defaults to the pool's own per-server state, which the
    simulator refreshes at every event and the proxy's prober refreshes each
    health cycle; pass a callable server_id -> float to override. When every
    server sits at or above the threshold, the unfiltered random draw takes
    over and the fallback flag is set.
    """
    ups = pool.up_pairs()
    if not ups:
        raise EmptyPool("cpu_random: no up server")
    if utilization_feed is None:
        cool = [pair for pair in ups if pair[1].cpu_utilization < threshold]
    else:
        cool = [pair for pair in ups if utilization_feed(pair[0].server_id) < threshold]
    if cool:
        return _best_of_draw(cool, power_n, rng), False
    return _best_of_draw(ups, power_n, rng), True


# -- first fit ----------------------------------------------------------------


def select_first(pool: "BackendPool") -> int:
    """Keep filling the cursor's server until it is full, then move up in id order.

    The cursor is sticky: a slot freed on the current server keeps it selected
    even when lower-id servers also have room. Wraps around once before
    declaring every server full.
    """
    servers = pool.servers
    n = len(servers)
    start = pool._first_idx
    for off in range(n):
        idx = start + off
        if idx >= n:
            idx -= n
        spec, state = servers[idx]
        if not state.up:
            continue
        if spec.maxconn is None:
            raise InvalidConfig(f"first requires a finite maxconn on server {spec.server_id}")
        if state.active_connections < spec.maxconn:
            pool._first_idx = idx
            return spec.server_id
    raise AllServersFull("first: every server is at maxconn")


# -- least connections --------------------------------------------------------


def select_leastconn(pool: "BackendPool") -> int:
    """Pick the up server with the fewest active connections.

    Ties cycle round-robin through the tied subgroup via a dedicated cursor, so
    a perpetual tie degrades to plain round-robin.
    """
    ups = pool.up_pairs()
    if not ups:
        raise EmptyPool("leastconn: no up server")
    best = min(state.active_connections for _, state in ups)
    tied = [spec.server_id for spec, state in ups if state.active_connections == best]
    if len(tied) == 1:
        pool._lc_last = tied[0]
        return tied[0]
    last = pool._lc_last
    chosen = tied[0]
    if last is not None:
        for server_id in tied:
            if server_id > last:
                chosen = server_id
                break
    pool._lc_last = chosen
    return chosen


# -- weighted round-robin ------------------------------------------------------


def _advance_cycle(pool: "BackendPool", static: bool) -> int:
    """Shared batch engine for roundrobin/static_rr.

    Each server receives `weight` consecutive selections before the cursor
    moves on; a cycle covers sum-of-weights selections. Weights (live or
    snapshot) are re-read only at cycle boundaries.
    """
    if static:
        cycle, pos, credit = pool._static_cycle, pool._static_pos, pool._static_credit
    else:
        cycle, pos, credit = pool._rr_cycle, pool._rr_pos, pool._rr_credit
    if cycle is None:
        ups = pool.up_pairs()
        if not ups:
            raise EmptyPool("roundrobin: no up server")
        if static:
            cycle = [(spec.server_id, pool.static_weight_of(spec.server_id)) for spec, _ in ups]
        else:
            cycle = [(spec.server_id, spec.weight) for spec, _ in ups]
        pos = 0
        credit = cycle[0][1]
    server_id = cycle[pos][0]
    credit -= 1
    if credit == 0:
        pos += 1
        if pos >= len(cycle):
            cycle = None  # cycle complete; weights re-read next time
            pos = 0
        else:
            credit = cycle[pos][1]
    if static:
        pool._static_cycle, pool._static_pos, pool._static_credit = cycle, pos, credit
    else:
        pool._rr_cycle, pool._rr_pos, pool._rr_credit = cycle, pos, credit
    return server_id


def select_roundrobin(pool: "BackendPool") -> int:
    """Batch-weighted round-robin over live weights."""
    return _advance_cycle(pool, static=False)


def select_static_rr(pool: "BackendPool") -> int:
    """Batch-weighted round-robin over the construction-time weight snapshot."""
    return _advance_cycle(pool, static=True)


# -- hash-keyed methods --------------------------------------------------------


def select_source(pool: "BackendPool", request: "Request") -> int:
    """Hash the client IP so one client always reaches the same server."""
    return map_hash_to_server(stable_hash(request.client_ip.to_bytes(4, "big")), pool)


def uri_key(request: "Request", config: AlgorithmConfig) -> str:
    """Build the hash key for the uri method: truncated path and/or the query."""
    key = ""
    if config.uri_use_path:
        key = request.path
        if config.uri_depth > 0:
            segments = key.split("/")
            key = "/" + "/".join(segments[1 : config.uri_depth + 1])
    if config.uri_use_query and request.query:
        key += "?" + request.query
    return key


def select_uri(pool: "BackendPool", request: "Request", config: AlgorithmConfig) -> int:
    if not (config.uri_use_path or config.uri_use_query):
        raise InvalidConfig("uri needs at least one of path/query enabled")
    return map_hash_to_server(hash_text(uri_key(request, config)), pool)


def select_header(pool: "BackendPool", request: "Request", header_name: str) -> tuple[int, bool]:
    """Hash the named header's value; requests without it fall back to round-robin."""
    value = request.headers.get(header_name)
    if value is None:
        return select_roundrobin(pool), True
    return map_hash_to_server(hash_text(value), pool), False


def select_rdp_cookie(pool: "BackendPool", request: "Request") -> tuple[int, bool]:
    """Hash the RDP cookie so returning clients stick; no cookie falls back to round-robin."""
    if request.rdp_cookie is None:
        return select_roundrobin(pool), True
    return map_hash_to_server(hash_text(request.rdp_cookie), pool), False


def query_param(query: str, name: str) -> Optional[str]:
    """First value of `name` in a k1=v1&k2=v2 query; raw bytes, no percent-decoding."""
    for pair in query.split("&"):
        key, _, value = pair.partition("=")
        if key == name:
            return value
    return None


def select_url_param(
    pool: "BackendPool", request: "Request", param_name: Optional[str]
) -> tuple[int, bool]:
    """Hash the named query parameter, or the whole query string when unnamed.

    A missing query (or missing parameter) falls back to round-robin.
    """
    query = request.query
    if query is None:
        return select_roundrobin(pool), True
    if param_name is not None:
        value = query_param(query, param_name)
        if value is None:
            return select_roundrobin(pool), True
        return map_hash_to_server(hash_text(value), pool), False
    return map_hash_to_server(hash_text(query), pool), False


# -- registry ------------------------------------------------------------------
# Uniform wrappers: (pool, request, config) -> (server_id, fallback_used).

SELECTORS = {
    "random": lambda p, r, c: (select_random(p, c.power_n, p.algo_rng(c.rng_seed)), False),
    "first": lambda p, r, c: (select_first(p), False),
    "leastconn": lambda p, r, c: (select_leastconn(p), False),
    "source": lambda p, r, c: (select_source(p, r), False),
    "roundrobin": lambda p, r, c: (select_roundrobin(p), False),
    "static_rr": lambda p, r, c: (select_static_rr(p), False),
    "uri": lambda p, r, c: (select_uri(p, r, c), False),
    "header": lambda p, r, c: select_header(p, r, c.header_name),
    "rdp_cookie": lambda p, r, c: select_rdp_cookie(p, r),
    "url_param": lambda p, r, c: select_url_param(p, r, c.param_name),
    "cpu_random": lambda p, r, c: select_cpu_random(
        p, c.cpu_threshold, c.power_n, p.algo_rng(c.rng_seed)
    ),
}
