import pytest
from hypothesis import given, strategies as st

from balancelab.core import EmptyPool
from balancelab.hashing import FNV64_OFFSET, hash_text, map_hash_to_server, stable_hash

from conftest import make_pool
from reference import fnv1a_64_ref


def test_empty_key_is_offset_basis():
    assert stable_hash(b"") == FNV64_OFFSET == 14695981039346656037


def test_single_zero_byte():
    # one algebraic step: (basis XOR 0) * prime mod 2^64
    assert stable_hash(b"\x00") == (FNV64_OFFSET * 1099511628211) % (1 << 64)
    assert stable_hash(b"\x00") == 12638153115695167455


def test_ascii_a_matches_reference():
    assert fnv1a_64_ref(b"a") == 12638187200555641996
    assert stable_hash(b"a") == 12638187200555641996


@given(st.binary(max_size=256))
def test_matches_reference_implementation(data):
    assert stable_hash(data) == fnv1a_64_ref(data)


@given(st.text(max_size=64))
def test_hash_text_is_cached_stable_hash(text):
    assert hash_text(text) == stable_hash(text.encode("utf-8"))


def test_map_equal_weights_modulo():
    pool = make_pool(3)
    assert map_hash_to_server(4, pool) == 2  # 4 mod 3 = slot 1 -> second id


def test_map_prefix_sum_buckets():
    pool = make_pool(2, weights=[2, 1])
    assert map_hash_to_server(1, pool) == 1  # server 1 owns slots 0-1
    assert map_hash_to_server(2, pool) == 2


def test_map_weighted_split_is_binomial():
    """1000 seeded random hashes over weights (3,1) land within 3 sigma of 750/250."""
    from balancelab.algorithms import Rng

    pool = make_pool(2, weights=[3, 1])
    rng = Rng(2024)
    hits = {1: 0, 2: 0}
    for _ in range(1000):
        hits[map_hash_to_server(rng.next_u64(), pool)] += 1
    sigma = (1000 * 0.75 * 0.25) ** 0.5
    assert abs(hits[1] - 750) <= 3 * sigma
    assert abs(hits[2] - 250) <= 3 * sigma


def test_uniformity_within_two_percent():
    """Per-server hit share tracks weight share over 1e5 random keys."""
    from balancelab.algorithms import Rng

    pool = make_pool(3, weights=[3, 2, 1])
    rng = Rng(7)
    hits = {1: 0, 2: 0, 3: 0}
    n = 100_000
    for _ in range(n):
        hits[map_hash_to_server(rng.next_u64(), pool)] += 1
    for server_id, weight in ((1, 3), (2, 2), (3, 1)):
        assert abs(hits[server_id] / n - weight / 6) < 0.02


def test_membership_change_remaps_majority():
    """Dropping one of five servers moves most keys, by design of modulo mapping."""
    keys = [str(i).encode() for i in range(1000)]
    before_pool = make_pool(5)
    before = {k: map_hash_to_server(stable_hash(k), before_pool) for k in keys}
    after_pool = make_pool(5)
    after_pool.set_up(3, False)
    moved = 0
    for k in keys:
        new = map_hash_to_server(stable_hash(k), after_pool)
        if new != before[k]:
            moved += 1
    assert moved > len(keys) // 2


def test_determinism_same_key_same_server(pool5):
    for key in (b"10.1.2.3", b"/some/path", b"cookie"):
        first = map_hash_to_server(stable_hash(key), pool5)
        assert all(
            map_hash_to_server(stable_hash(key), pool5) == first for _ in range(5)
        )


def test_map_empty_pool_raises():
    pool = make_pool(2)
    pool.set_up(1, False)
    pool.set_up(2, False)
    with pytest.raises(EmptyPool):
        map_hash_to_server(123, pool)
