"""Acceptance suite: one test (or sub-test) per shipping criterion.

Each criterion prints a PASS line once its assertions hold, so a `pytest -s`
run shows the checklist. The heavy simulation fixtures are shared across
criteria and timed, because several criteria carry wall-clock budgets.
"""

import math
import time

import pytest

from balancelab.algorithms import AlgorithmConfig
from balancelab.core import GET, POST, dispatch, release
from balancelab.harness import (
    LoopbackBackend,
    default_matrix,
    drive_proxy,
    emit,
    run_matrix,
    summarize_records,
    worker_sweep,
)
from balancelab.simcluster import ENVIRONMENTS, build_pool, run_simulation
from balancelab.workload import Scenario, generate

from conftest import make_pool, make_request
from reference import batch_wrr_ref, SplitMix64Ref

TOTALS = [1000] + list(range(5000, 80001, 5000))
BAND = ("random", "leastconn", "static_rr", "roundrobin")


def _pass(number, message):
    print(f"[criterion {number:>3}] PASS  {message}")


def _sweep(env_name, kinds, seeds, arrival):
    """mean response per (kind, total, task_type), averaged over seeds."""
    env = ENVIRONMENTS[env_name]
    acc = {}
    for seed in seeds:
        for total in TOTALS:
            scenario = Scenario(total_requests=total, seed=seed, arrival=arrival)
            stream = generate(scenario)
            for kind in kinds:
                pool = build_pool(env)
                records = run_simulation(
                    scenario, pool, AlgorithmConfig(kind=kind, rng_seed=seed),
                    requests=stream,
                )
                for ttype, stats in summarize_records(records, 5).items():
                    acc.setdefault((kind, total, ttype), []).append(stats.mean)
    return {key: sum(vals) / len(vals) for key, vals in acc.items()}


@pytest.fixture(scope="module")
def homog_sweep():
    started = time.monotonic()
    means = _sweep("homogeneous", BAND + ("uri",), seeds=(1,), arrival="poisson")
    return means, time.monotonic() - started


@pytest.fixture(scope="module")
def hetero_sweep():
    started = time.monotonic()
    means = _sweep("heterogeneous", BAND, seeds=(0, 1, 2), arrival="uniform_rate")
    return means, time.monotonic() - started


# -- 1: weighted-cycle exactness ------------------------------------------------------


def test_criterion_01_weighted_cycle_exactness():
    started = time.monotonic()
    pool = make_pool(3, weights=[2, 3, 1])
    cfg = AlgorithmConfig(kind="roundrobin")
    counts = {1: 0, 2: 0, 3: 0}
    for i in range(600):
        counts[dispatch(make_request(rid=i), pool, cfg).chosen] += 1
    assert (counts[1], counts[2], counts[3]) == (200, 300, 100)

    rng = SplitMix64Ref(2024)
    for _ in range(25):
        size = 1 + rng.next() % 6
        weights = [1 + rng.next() % (64 // size) for _ in range(size)]
        assert sum(weights) <= 64
        wpool = make_pool(size, weights=weights)
        cycle = sum(weights)
        for _ in range(2):
            window = [
                dispatch(make_request(), wpool, cfg).chosen for _ in range(cycle)
            ]
            for sid, weight in enumerate(weights, start=1):
                assert window.count(sid) == weight, (weights, window)
    elapsed = time.monotonic() - started
    assert elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s"
    _pass(1, f"(2,3,1)x600 -> (200,300,100); 25 random weight vectors exact ({elapsed:.2f}s)")


# -- 2: batch-WRR oracle equivalence ---------------------------------------------------


def test_criterion_02_batch_wrr_oracle_equivalence():
    rng = SplitMix64Ref(7)
    vectors = [(w,) for w in range(1, 5)]
    vectors += [(a, b) for a in range(1, 5) for b in range(1, 5)]
    for size in (3, 4, 5):
        for _ in range(8):
            vectors.append(tuple(1 + rng.next() % 4 for _ in range(size)))
    steps = 10_000
    for weights in vectors:
        pool = make_pool(len(weights), weights=list(weights))
        oracle = batch_wrr_ref(weights)
        from balancelab.algorithms import select_roundrobin

        for step in range(steps):
            assert select_roundrobin(pool) == next(oracle), (weights, step)
    _pass(2, f"{len(vectors)} weight vectors match the brute-force reference over 10k steps")


# -- 3: hash determinism and remap ------------------------------------------------------


def test_criterion_03_hash_determinism_and_remap():
    from balancelab.algorithms import select_source

    started = time.monotonic()
    ips = [(10 << 24) | i for i in range(10_000)]
    pool = make_pool(5)
    first = [select_source(pool, make_request(client_ip=ip)) for ip in ips]
    second = [select_source(pool, make_request(client_ip=ip)) for ip in ips]
    assert first == second
    shrunk = make_pool(5)
    shrunk.set_up(3, False)
    moved = sum(
        1
        for ip, old in zip(ips, first)
        if select_source(shrunk, make_request(client_ip=ip)) != old
    )
    assert moved > 5000, f"only {moved}/10000 keys remapped"
    elapsed = time.monotonic() - started
    assert elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s"
    _pass(3, f"assignments reproducible; {moved}/10000 remapped after removal ({elapsed:.2f}s)")


# -- 4: homogeneous comparison stack -----------------------------------------------------


def test_criterion_04_homogeneous_stack(homog_sweep):
    """Band algorithms within 10% per scenario/type; uri splits the task types.

    Poisson arrivals are used because evenly spaced arrivals produce zero
    queueing below saturation, collapsing every mean to the exact base cost
    and making 'strictly below' unachievable by construction.
    """
    means, elapsed = homog_sweep
    for total in TOTALS:
        for ttype in (GET, POST):
            band = [means[(kind, total, ttype)] for kind in BAND]
            low, high = min(band), max(band)
            assert high <= low * 1.10, (
                f"band spread {high / low - 1:.1%} at {total}/{ttype}"
            )
    for total in (t for t in TOTALS if t >= 40000):
        band_get = min(means[(kind, total, GET)] for kind in BAND)
        band_post = max(means[(kind, total, POST)] for kind in BAND)
        uri_get = means[("uri", total, GET)]
        uri_post = means[("uri", total, POST)]
        assert uri_get < band_get, f"uri GET {uri_get} !< band {band_get} at {total}"
        assert uri_post > band_post, f"uri POST {uri_post} !> band {band_post} at {total}"
    assert elapsed < 120, f"sweep took {elapsed:.0f}s, budget 120s"
    _pass(4, f"band <=10% spread; uri splits GET/POST at >=40k ({elapsed:.0f}s)")


# -- 5: heterogeneous pairing ------------------------------------------------------------


def test_criterion_05a_static_rr_pairs_with_roundrobin(hetero_sweep):
    means, elapsed = hetero_sweep
    for total in TOTALS:
        for ttype in (GET, POST):
            a = means[("static_rr", total, ttype)]
            b = means[("roundrobin", total, ttype)]
            assert abs(a - b) <= 0.05 * min(a, b), f"{total}/{ttype}: {a} vs {b}"
    assert elapsed < 120, f"sweep took {elapsed:.0f}s, budget 120s"
    _pass("5a", f"static_rr and roundrobin means within 5% everywhere ({elapsed:.0f}s)")


def test_criterion_05b_random_pairs_with_leastconn(hetero_sweep):
    """Known to fail in the 50k-70k window; deliberately not loosened.

    Offered load crosses cluster capacity (108 core-s/s, i.e. ~64.8k requests
    per 60 s at the default costs) inside the asserted range. Near that knee,
    two-choice random lets the smallest server's queue run away while global
    least-connections contains it, so their means genuinely diverge by far
    more than 5% under the pinned service model. Verified across seeds,
    arrival processes, and server orderings; away from the knee the pair
    tracks within a few percent, and criterion 5c's ordering always holds.
    """
    means, _ = hetero_sweep
    worst = (0.0, None)
    for total in TOTALS:
        for ttype in (GET, POST):
            a = means[("random", total, ttype)]
            b = means[("leastconn", total, ttype)]
            gap = abs(a - b) / min(a, b)
            if gap > worst[0]:
                worst = (gap, (total, ttype, a, b))
    assert worst[0] <= 0.05, (
        f"random vs leastconn diverge {worst[0]:.1%} at {worst[1][0]}/{worst[1][1]} "
        f"(random={worst[1][2]:.4f}, leastconn={worst[1][3]:.4f}): two-choice random "
        "cannot hold the weakest server near the load/capacity knee; see this "
        "test's docstring"
    )
    _pass("5b", "random and leastconn means within 5% everywhere")


def test_criterion_05c_rr_pair_exceeds_random_pair(hetero_sweep):
    means, _ = hetero_sweep
    for total in (t for t in TOTALS if t >= 40000):
        for ttype in (GET, POST):
            rr_pair = (means[("static_rr", total, ttype)] + means[("roundrobin", total, ttype)]) / 2
            rand_pair = (means[("random", total, ttype)] + means[("leastconn", total, ttype)]) / 2
            assert rr_pair > rand_pair, f"{total}/{ttype}: {rr_pair} !> {rand_pair}"
    _pass("5c", "(static_rr, roundrobin) mean strictly above (random, leastconn) at >=40k")


# -- 6: heterogeneity direction ------------------------------------------------------------


def test_criterion_06_heterogeneous_slower_for_random_at_20k():
    scenario = Scenario(total_requests=20000, seed=1)
    stream = generate(scenario)
    means = {}
    for env_name in ("homogeneous", "heterogeneous"):
        pool = build_pool(ENVIRONMENTS[env_name])
        records = run_simulation(
            scenario, pool, AlgorithmConfig(kind="random", rng_seed=1), requests=stream
        )
        means[env_name] = sum(r.response_time for r in records) / len(records)
    assert means["heterogeneous"] > means["homogeneous"], means
    _pass(6, f"random@20k: heterogeneous {means['heterogeneous']:.4f}s > "
             f"homogeneous {means['homogeneous']:.4f}s")


# -- 7: power-of-N convergence ----------------------------------------------------------------


def test_criterion_07_power_of_n_converges_to_leastconn():
    """TV distance to leastconn's dispatch distribution shrinks as N grows.

    Backgrounds of (0,1,2,3,4) connections are pinned and each dispatch is
    released, so leastconn always picks server 1 and random(N) approaches that
    as the draw widens.
    """
    draws = 50_000

    def distribution(kind, power_n, seed):
        pool = make_pool(5)
        for sid, background in zip(range(1, 6), (0, 1, 2, 3, 4)):
            pool.state_of(sid).active_connections = background
        cfg = AlgorithmConfig(kind=kind, power_n=power_n, rng_seed=seed)
        counts = {sid: 0 for sid in range(1, 6)}
        for i in range(draws):
            decision = dispatch(make_request(rid=i), pool, cfg)
            counts[decision.chosen] += 1
            release(decision.chosen, pool)
        return [counts[sid] / draws for sid in range(1, 6)]

    target = distribution("leastconn", 2, 0)
    assert target == [1.0, 0.0, 0.0, 0.0, 0.0]
    tv_by_n = []
    for power_n in (1, 2, 3, 4, 5):
        dist = distribution("random", power_n, 1000 + power_n)
        tv = sum(abs(p - q) for p, q in zip(dist, target)) / 2
        tv_by_n.append(tv)
    assert all(a > b for a, b in zip(tv_by_n, tv_by_n[1:])), tv_by_n
    _pass(7, "TV to leastconn decreases monotonically: "
             + ", ".join(f"N={n}:{tv:.4f}" for n, tv in zip((1, 2, 3, 4, 5), tv_by_n)))


# -- 8: first-fit prefix ------------------------------------------------------------------------


def test_criterion_08_first_fit_prefix():
    cfg = AlgorithmConfig(kind="first")
    pool = make_pool(3, maxconn=2)
    chosen = [dispatch(make_request(rid=i), pool, cfg).chosen for i in range(6)]
    assert chosen == [1, 1, 2, 2, 3, 3]
    assert dispatch(make_request(rid=6), pool, cfg).rejected
    _pass(8, "maxconn (2,2,2): sequence (1,1,2,2,3,3) then rejection")


# -- 9: cpu_random exclusion ----------------------------------------------------------------------


def test_criterion_09_cpu_random_exclusion():
    cfg = AlgorithmConfig(kind="cpu_random", cpu_threshold=0.5, rng_seed=9)
    pool = make_pool(3)
    for sid, util in zip(range(1, 4), (0.2, 0.99, 0.3)):
        pool.state_of(sid).cpu_utilization = util
    hot_hits = 0
    for i in range(10_000):
        decision = dispatch(make_request(rid=i), pool, cfg)
        if decision.chosen == 2:
            hot_hits += 1
        release(decision.chosen, pool)
    assert hot_hits == 0
    _pass(9, "server pinned at 0.99 utilization received 0 of 10000 dispatches")


# -- 10: worker sweep ---------------------------------------------------------------------------


def test_criterion_10_worker_sweep():
    started = time.monotonic()
    scenario = Scenario(total_requests=2000, seed=3)
    rows = worker_sweep([1, 2, 4, 8, 16, 32, 64], scenario, ENVIRONMENTS["homogeneous"])
    normalized = {}
    for row in rows:
        normalized.setdefault(row.workers, []).append(row._replace(workers=0))
    baseline = normalized[1]
    assert all(normalized[count] == baseline for count in (2, 4, 8, 16, 32, 64))

    proxy_scenario = Scenario(
        total_requests=6000, period_s=30.0, get_fraction=1.0, seed=3
    )
    sweep_rows = worker_sweep(
        [1, 64], proxy_scenario, ENVIRONMENTS["homogeneous"], mode="proxy"
    )
    mean_by_workers = {
        row.workers: row.mean_response_s for row in sweep_rows if row.task_type == GET
    }
    low, high = sorted((mean_by_workers[1], mean_by_workers[64]))
    assert high <= 1.20 * low, (
        f"means diverge: 1 worker {mean_by_workers[1] * 1000:.2f}ms vs "
        f"64 workers {mean_by_workers[64] * 1000:.2f}ms"
    )
    elapsed = time.monotonic() - started
    assert elapsed < 120, f"took {elapsed:.0f}s, budget 120s"
    _pass(10, f"sim metrics worker-independent; proxy means "
              f"{mean_by_workers[1] * 1000:.2f}ms vs {mean_by_workers[64] * 1000:.2f}ms "
              f"({elapsed:.0f}s)")


# -- 11: proxy integration ------------------------------------------------------------------------


def test_criterion_11_proxy_integration():
    from http.client import HTTPConnection

    from balancelab.proxy import BackendAddress, ProxyConfig, ReverseProxy

    interval = 0.2
    backends = [LoopbackBackend().start() for _ in range(3)]
    config = ProxyConfig(
        listen_host="127.0.0.1",
        listen_port=0,
        maxconn=64,
        workers=4,
        balance=AlgorithmConfig(kind="roundrobin"),
        servers=[
            BackendAddress(name=f"b{i + 1}", host="127.0.0.1", port=b.port)
            for i, b in enumerate(backends)
        ],
        health_interval_s=interval,
    )
    proxy = ReverseProxy(config, log_stream=None)
    proxy.start()
    try:
        counts = {"b1": 0, "b2": 0, "b3": 0}
        for i in range(1000):
            conn = HTTPConnection(proxy.host, proxy.port, timeout=5)
            conn.request("GET", f"/r{i}")
            response = conn.getresponse()
            assert response.status == 200, f"request {i} got {response.status}"
            counts[response.getheader("X-Balancelab-Server")] += 1
            response.read()
            conn.close()
        assert max(counts.values()) - min(counts.values()) <= 1, counts

        killed_at = time.monotonic()
        backends[1].stop()
        while proxy.pool.state_of(2).up:
            assert time.monotonic() - killed_at < 3 * interval + 2.0, (
                "backend not evicted within three health intervals (plus slack)"
            )
            time.sleep(0.02)
        after = set()
        for i in range(6):
            conn = HTTPConnection(proxy.host, proxy.port, timeout=5)
            conn.request("GET", f"/post-kill{i}")
            response = conn.getresponse()
            assert response.status == 200
            after.add(response.getheader("X-Balancelab-Server"))
            response.read()
            conn.close()
        assert after == {"b1", "b3"}
    finally:
        proxy.shutdown()
        for backend in (backends[0], backends[2]):
            backend.stop()
    _pass(11, f"1000 requests all 200, spread {counts}; dead backend evicted and bypassed")


# -- 12: end-to-end determinism ---------------------------------------------------------------------


def test_criterion_12_full_matrix_byte_identical(tmp_path):
    """The complete default matrix, run twice from scratch, emits identical CSV."""
    outputs = []
    for run in ("a", "b"):
        matrix = default_matrix()
        rows = run_matrix(matrix)
        files = emit(rows, tmp_path / run, formats=("csv",))
        outputs.append(files[0].read_bytes())
    assert outputs[0] == outputs[1]
    n_rows = len(outputs[0].strip().split(b"\r\n")) - 1
    assert n_rows == 7 * 17 * 2 * 2, f"expected 476 rows, got {n_rows}"
    _pass(12, f"two full default-matrix runs emitted byte-identical CSV ({n_rows} rows)")
