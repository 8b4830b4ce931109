"""Seeded request-stream generation over a small blog/shop page catalog."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .algorithms import Rng
from .core import DEFAULT_DEADLINE_S, GET, POST, BalanceError, Headers, Request, ip_to_int


class EmptyCatalog(BalanceError):
    """The catalog has no entries for a task type the scenario needs."""


class InvalidStep(BalanceError):
    """scenario_suite needs a positive step."""


ARRIVALS = ("uniform_rate", "poisson")


@dataclass(frozen=True)
class PageCatalog:
    """The pages a workload can request, plus synthetic client identities.

    Entries may carry a query ("/shop/item/9?ref=home"). get_paths and
    post_paths are disjoint; the defaults below are additionally chosen so
    that, on an equal-weight five-server pool, path hashing sends every GET
    page to servers 1-3 and every POST endpoint to servers 4-5. Path-keyed
    balancing therefore partitions the two task types onto disjoint backends,
    which is the behavior the uri comparisons exercise.
    """

    get_paths: tuple[str, ...]
    post_paths: tuple[str, ...]
    client_ips: tuple[int, ...]
    header_templates: tuple[tuple[tuple[str, str], ...], ...]


_DEFAULT_GET_PATHS = (
    "/shop",
    "/blog/post-4",
    "/blog/post-9",
    "/blog/post-22",
    "/shop/item/5",
    "/shop/item/17",
    "/shop/item/19",
    "/shop/item/26?color=blue",
    "/news",
    "/blog/post-5",
    "/blog/post-17",
    "/blog/post-23",
    "/shop/item/3",
    "/shop/item/4",
    "/shop/item/9?ref=home",
    "/shop/item/21",
    "/faq",
    "/shop/cart",
    "/blog/post-1",
    "/blog/post-6",
    "/blog/post-13?lang=en",
    "/shop/item/2",
    "/shop/item/7",
    "/shop/item/8",
)

_DEFAULT_POST_PATHS = (
    "/shop/checkout",
    "/shop/cart/add",
    "/review/submit",
    "/account/register",
)

_DEFAULT_HOSTS = ("www.example.test", "shop.example.test", "blog.example.test")
_DEFAULT_AGENTS = ("loadgen/1.0", "Mozilla/5.0 (compatible; labbot/2.0)")


def default_catalog() -> PageCatalog:
    base = ip_to_int("10.0.0.0")
    return PageCatalog(
        get_paths=_DEFAULT_GET_PATHS,
        post_paths=_DEFAULT_POST_PATHS,
        client_ips=tuple(base + 1 + i for i in range(512)),
        header_templates=tuple(
            (("Host", host), ("User-Agent", agent))
            for host in _DEFAULT_HOSTS
            for agent in _DEFAULT_AGENTS
        ),
    )


DEFAULT_CATALOG = default_catalog()


def load_catalog(path: str) -> PageCatalog:
    """Read a catalog from a plain-text file: one `GET <path>[?query]` or `POST <path>` per line."""
    gets: list[str] = []
    posts: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2 or parts[0] not in (GET, POST):
                raise ValueError(f"{path}:{lineno}: expected 'GET <path>' or 'POST <path>'")
            if parts[0] == GET:
                gets.append(parts[1])
            else:
                posts.append(parts[1])
    defaults = DEFAULT_CATALOG
    return PageCatalog(
        get_paths=tuple(gets),
        post_paths=tuple(posts),
        client_ips=defaults.client_ips,
        header_templates=defaults.header_templates,
    )


@dataclass
class Scenario:
    """One workload cell: how many requests over what period, and their mix."""

    total_requests: int
    period_s: float = 60.0
    get_fraction: float = 0.5
    arrival: str = "uniform_rate"
    seed: int = 0
    catalog: PageCatalog = field(default_factory=lambda: DEFAULT_CATALOG)
    deadline_s: float = DEFAULT_DEADLINE_S

    def __post_init__(self):
        if self.total_requests < 1:
            raise ValueError("total_requests must be >= 1")
        if self.period_s <= 0:
            raise ValueError("period_s must be > 0")
        if not 0.0 <= self.get_fraction <= 1.0:
            raise ValueError("get_fraction must be in [0, 1]")
        if self.arrival not in ARRIVALS:
            raise ValueError(f"arrival must be one of {ARRIVALS}")
        if self.deadline_s <= 0:
            raise ValueError("deadline_s must be > 0")

    @property
    def rate(self) -> float:
        """Offered request rate in requests/second."""
        return self.total_requests / self.period_s


def _split_path(entry: str) -> tuple[str, Optional[str]]:
    path, sep, query = entry.partition("?")
    return path, (query if sep else None)


def generate(scenario: Scenario) -> list[Request]:
    """Produce the scenario's time-ordered request stream.

    Deterministic in the seed: arrival times first (evenly spaced, or sorted
    uniforms for poisson — the arrival-time law of a Poisson process given its
    count), then per-request draws in a fixed order. The GET/POST split is an
    exact deterministic interleave, not a sample.
    """
    total = scenario.total_requests
    catalog = scenario.catalog
    rng = Rng(scenario.seed)
    if scenario.arrival == "uniform_rate":
        gap = scenario.period_s / total
        arrivals = [i * gap for i in range(total)]
    else:
        arrivals = sorted(rng.uniform() * scenario.period_s for _ in range(total))
    gets_needed = scenario.get_fraction > 0.0
    posts_needed = scenario.get_fraction < 1.0
    if gets_needed and not catalog.get_paths:
        raise EmptyCatalog("scenario needs GET pages but the catalog has none")
    if posts_needed and not catalog.post_paths:
        raise EmptyCatalog("scenario needs POST endpoints but the catalog has none")
    if not catalog.client_ips:
        raise EmptyCatalog("catalog has no client IPs")
    header_pool = [Headers(t) for t in catalog.header_templates] or [Headers()]
    requests: list[Request] = []
    fraction = scenario.get_fraction
    cum_prev = 0
    for i in range(total):
        cum = math.floor((i + 1) * fraction)
        is_get = cum > cum_prev
        cum_prev = cum
        entry = rng.choice(catalog.get_paths if is_get else catalog.post_paths)
        path, query = _split_path(entry)
        client_ip = rng.choice(catalog.client_ips)
        headers = rng.choice(header_pool)
        requests.append(
            Request(
                request_id=i,
                arrival_time=arrivals[i],
                method=GET if is_get else POST,
                path=path,
                query=query,
                headers=headers,
                client_ip=client_ip,
                deadline=scenario.deadline_s,
            )
        )
    return requests


def scenario_suite(
    max_total: int = 40000,
    step: int = 5000,
    *,
    period_s: float = 60.0,
    get_fraction: float = 0.5,
    arrival: str = "uniform_rate",
    seed: int = 0,
    catalog: Optional[PageCatalog] = None,
    deadline_s: float = DEFAULT_DEADLINE_S,
) -> list[Scenario]:
    """The 1000-request baseline plus every multiple of step up to max_total."""
    if step <= 0:
        raise InvalidStep(f"step must be positive, got {step}")
    totals = [1000] + [t for t in range(step, max_total + 1, step) if t != 1000]
    return [
        Scenario(
            total_requests=total,
            period_s=period_s,
            get_fraction=get_fraction,
            arrival=arrival,
            seed=seed,
            catalog=catalog if catalog is not None else DEFAULT_CATALOG,
            deadline_s=deadline_s,
        )
        for total in totals
    ]
