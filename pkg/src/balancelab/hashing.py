"""Stable byte hashing and the weight-bucket mapping used by the hash-style balancers."""

from __future__ import annotations

from functools import lru_cache
from typing import TYPE_CHECKING

from .core import EmptyPool

if TYPE_CHECKING:
    from .core import BackendPool

MASK64 = (1 << 64) - 1

FNV64_OFFSET = 14695981039346656037
FNV64_PRIME = 1099511628211


def stable_hash(key: bytes) -> int:
    """FNV-1a over the key bytes, reduced to 64 bits.

    Chosen for trivial portability: the same value on every platform, process,
    and run. An empty key hashes to the offset basis.
    """
    value = FNV64_OFFSET
    for byte in key:
        value = ((value ^ byte) * FNV64_PRIME) & MASK64
    return value


@lru_cache(maxsize=8192)
def hash_text(key: str) -> int:
    """stable_hash of the UTF-8 bytes, memoized for the repetitive keys of workloads."""
    return stable_hash(key.encode("utf-8"))


def map_hash_to_server(value: int, pool: "BackendPool") -> int:
    """Map a hash onto one up server through weight prefix-sums.

    slot = value mod sum_weight; server s owns the slots
    [prefix(s), prefix(s) + weight(s)) over up servers in id order. Changing
    membership or weights remaps most keys by design.
    """
    ups = pool.up_pairs()
    if not ups:
        raise EmptyPool("no up server to map the hash onto")
    slot = value % pool.sum_weight
    acc = 0
    for spec, _ in ups:
        acc += spec.weight
        if slot < acc:
            return spec.server_id
    raise AssertionError("slot outside prefix sums")
