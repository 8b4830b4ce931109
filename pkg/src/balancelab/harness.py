"""Benchmark harness: sweep algorithm x scenario x environment and emit results.

The harness is deterministic end to end: repetition r of any cell derives every
seed from base_seed + r, rows are sorted before emission, and the writers use
fixed formatting, so re-running a matrix reproduces its output files byte for
byte.
"""

from __future__ import annotations

import http.server
import math
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from http.client import HTTPConnection
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

from .algorithms import AlgorithmConfig
from .core import GET, BalanceError, MetricsRecord
from .simcluster import (
    ENVIRONMENTS,
    EnvironmentProfile,
    ServiceModel,
    build_pool,
    run_simulation,
)
from .workload import Scenario, generate, scenario_suite


class InvalidWorkerCount(BalanceError):
    """Worker counts must be positive integers."""


class SummaryRow(NamedTuple):
    """One aggregated result line: a (algorithm, environment, scenario, task type) cell."""

    algorithm: str
    environment: str
    total_requests: int
    task_type: str
    mean_response_s: float
    p95_response_s: float
    deadline_miss_fraction: float
    rejected_count: float
    per_server_dispatch_counts: tuple[float, ...]
    workers: Optional[int] = None


#: The default comparison set; the cookie/header/query methods need request
#: attributes the stock workload does not carry, so they are opt-in.
DEFAULT_ALGORITHM_KINDS = (
    "first",
    "source",
    "random",
    "leastconn",
    "static_rr",
    "roundrobin",
    "uri",
)

DEFAULT_WORKER_COUNTS = (1, 2, 4, 8, 16, 32, 64)

#: `first` needs a finite per-server maxconn; simulated pools running it get
#: this many connection slots per core.
FIRST_MAXCONN_PER_CORE = 4


def default_algorithms() -> list[AlgorithmConfig]:
    return [AlgorithmConfig(kind=kind) for kind in DEFAULT_ALGORITHM_KINDS]


@dataclass
class RunMatrix:
    """Everything one benchmark run sweeps over."""

    algorithms: list[AlgorithmConfig]
    scenarios: list[Scenario]
    environments: list[EnvironmentProfile]
    repetitions: int = 3
    base_seed: int = 0

    def __post_init__(self):
        if not self.algorithms or not self.scenarios or not self.environments:
            raise ValueError("matrix dimensions must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def labels(self) -> list[str]:
        """Stable column labels; duplicate kinds get a positional suffix."""
        seen: dict[str, int] = {}
        labels = []
        for config in self.algorithms:
            count = seen.get(config.kind, 0)
            seen[config.kind] = count + 1
            labels.append(config.kind if count == 0 else f"{config.kind}#{count + 1}")
        return labels


def default_matrix(
    max_total: int = 80000,
    repetitions: int = 3,
    base_seed: int = 0,
    environments: Optional[list[EnvironmentProfile]] = None,
) -> RunMatrix:
    return RunMatrix(
        algorithms=default_algorithms(),
        scenarios=scenario_suite(max_total=max_total),
        environments=environments
        if environments is not None
        else [ENVIRONMENTS["homogeneous"], ENVIRONMENTS["heterogeneous"]],
        repetitions=repetitions,
        base_seed=base_seed,
    )


class _TypeStats(NamedTuple):
    mean: float
    p95: float
    miss_fraction: float
    rejected: int
    counts: tuple[int, ...]
    total: int


def _percentile95(sorted_values: list[float]) -> float:
    # nearest-rank definition: smallest value covering 95% of the sample
    rank = math.ceil(0.95 * len(sorted_values))
    return sorted_values[max(rank - 1, 0)]


def summarize_records(records: Sequence[MetricsRecord], n_servers: int) -> dict[str, _TypeStats]:
    """Collapse per-request records into per-task-type statistics.

    Rejected requests are excluded from the response-time mean but count as
    deadline misses and appear in the rejected tally.
    """
    by_type: dict[str, dict] = {}
    for rec in records:
        acc = by_type.get(rec.method)
        if acc is None:
            acc = by_type[rec.method] = {
                "rts": [],
                "rejected": 0,
                "misses": 0,
                "counts": [0] * n_servers,
                "total": 0,
            }
        acc["total"] += 1
        if rec.rejected:
            acc["rejected"] += 1
            acc["misses"] += 1
            continue
        acc["rts"].append(rec.response_time)
        if not rec.deadline_met:
            acc["misses"] += 1
        acc["counts"][rec.server_id - 1] += 1
    stats: dict[str, _TypeStats] = {}
    for method, acc in by_type.items():
        rts = sorted(acc["rts"])
        if rts:
            mean = sum(rts) / len(rts)
            p95 = _percentile95(rts)
        else:
            mean = float("nan")
            p95 = float("nan")
        stats[method] = _TypeStats(
            mean=mean,
            p95=p95,
            miss_fraction=acc["misses"] / acc["total"],
            rejected=acc["rejected"],
            counts=tuple(acc["counts"]),
            total=acc["total"],
        )
    return stats


def _average_stats(per_rep: list[dict[str, _TypeStats]], n_servers: int) -> dict[str, _TypeStats]:
    merged: dict[str, _TypeStats] = {}
    types = sorted({t for stats in per_rep for t in stats})
    for task_type in types:
        entries = [stats[task_type] for stats in per_rep if task_type in stats]
        k = len(entries)
        counts = tuple(sum(e.counts[i] for e in entries) / k for i in range(n_servers))
        merged[task_type] = _TypeStats(
            mean=sum(e.mean for e in entries) / k,
            p95=sum(e.p95 for e in entries) / k,
            miss_fraction=sum(e.miss_fraction for e in entries) / k,
            rejected=sum(e.rejected for e in entries) / k,
            counts=counts,
            total=entries[0].total,
        )
    return merged


def _run_stream_cells(
    matrix: RunMatrix,
    service_model: Optional[ServiceModel],
    scenario_index: int,
    rep: int,
) -> list[tuple[tuple[str, str, int], dict[str, _TypeStats]]]:
    """Run every (environment, algorithm) cell against one generated stream."""
    scenario = matrix.scenarios[scenario_index]
    seed = matrix.base_seed + rep
    stream_scenario = replace(scenario, seed=seed)
    try:
        stream = generate(stream_scenario)
    except BalanceError as err:
        print(
            f"scenario {scenario.total_requests} rep {rep}: {err}",
            file=sys.stderr,
        )
        return []
    labels = matrix.labels()
    out = []
    for env in matrix.environments:
        for label, config in zip(labels, matrix.algorithms):
            maxconn = None
            if config.kind == "first":
                maxconn = [p.cores * FIRST_MAXCONN_PER_CORE for p in env.servers]
            pool = build_pool(env, maxconn=maxconn)
            run_config = replace(config, rng_seed=seed)
            try:
                records = run_simulation(
                    stream_scenario, pool, run_config, service_model, requests=stream
                )
            except BalanceError as err:
                print(
                    f"cell {env.name}/{label}/{scenario.total_requests} rep {rep}: {err}",
                    file=sys.stderr,
                )
                continue
            key = (env.name, label, scenario.total_requests)
            out.append((key, summarize_records(records, len(env.servers))))
    return out


def run_matrix(
    matrix: RunMatrix,
    service_model: Optional[ServiceModel] = None,
    jobs: int = 1,
) -> list[SummaryRow]:
    """Run the whole matrix and return averaged, sorted summary rows.

    Cells whose configuration cannot run are reported on stderr and skipped;
    the rest of the matrix completes. With jobs > 1 the (scenario, repetition)
    tasks run in worker processes; results are identical to a serial run.
    """
    tasks = [
        (scenario_index, rep)
        for scenario_index in range(len(matrix.scenarios))
        for rep in range(matrix.repetitions)
    ]
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=jobs) as pool:
            chunks = pool.starmap(
                _run_stream_cells,
                [(matrix, service_model, s, r) for s, r in tasks],
            )
    else:
        chunks = [_run_stream_cells(matrix, service_model, s, r) for s, r in tasks]
    per_cell: dict[tuple[str, str, int], list[dict[str, _TypeStats]]] = {}
    for chunk in chunks:
        for key, stats in chunk:
            per_cell.setdefault(key, []).append(stats)
    n_servers_by_env = {env.name: len(env.servers) for env in matrix.environments}
    rows: list[SummaryRow] = []
    for (env_name, label, total), per_rep in per_cell.items():
        averaged = _average_stats(per_rep, n_servers_by_env[env_name])
        for task_type, stats in averaged.items():
            rows.append(
                SummaryRow(
                    algorithm=label,
                    environment=env_name,
                    total_requests=total,
                    task_type=task_type,
                    mean_response_s=stats.mean,
                    p95_response_s=stats.p95,
                    deadline_miss_fraction=stats.miss_fraction,
                    rejected_count=stats.rejected,
                    per_server_dispatch_counts=stats.counts,
                )
            )
    rows.sort(key=_row_key)
    return rows


def _row_key(row: SummaryRow):
    return (
        row.environment,
        row.algorithm,
        row.total_requests,
        row.task_type,
        row.workers if row.workers is not None else -1,
    )


# -- worker sweep ---------------------------------------------------------------


def worker_sweep(
    worker_counts: Sequence[int],
    scenario: Scenario,
    environment: EnvironmentProfile,
    mode: str = "simulator",
    algorithm: Optional[AlgorithmConfig] = None,
    service_model: Optional[ServiceModel] = None,
) -> list[SummaryRow]:
    """Measure one scenario at several dispatch worker counts.

    Simulator mode is worker-independent by construction, so its rows differ
    only in the workers label — a property the acceptance suite pins. Proxy
    mode starts loopback backends plus a live proxy per count and measures
    real wall-clock response times.
    """
    counts = list(worker_counts)
    if not counts:
        raise InvalidWorkerCount("no worker counts given")
    for count in counts:
        if not isinstance(count, int) or count < 1:
            raise InvalidWorkerCount(f"worker count must be >= 1, got {count!r}")
    config = algorithm if algorithm is not None else AlgorithmConfig(kind="roundrobin")
    if mode == "simulator":
        rows: list[SummaryRow] = []
        for count in counts:
            pool = build_pool(environment)
            records = run_simulation(scenario, pool, config, service_model)
            stats = summarize_records(records, len(environment.servers))
            for task_type in sorted(stats):
                s = stats[task_type]
                rows.append(
                    SummaryRow(
                        algorithm=config.kind,
                        environment=environment.name,
                        total_requests=scenario.total_requests,
                        task_type=task_type,
                        mean_response_s=s.mean,
                        p95_response_s=s.p95,
                        deadline_miss_fraction=s.miss_fraction,
                        rejected_count=s.rejected,
                        per_server_dispatch_counts=s.counts,
                        workers=count,
                    )
                )
        rows.sort(key=_row_key)
        return rows
    if mode == "proxy":
        return _proxy_sweep(counts, scenario, environment, config)
    raise ValueError(f"unknown sweep mode {mode!r}")


class ProxyProbeResult(NamedTuple):
    """One proxied request as measured from the client side."""

    request_id: int
    method: str
    status: int
    server_name: str
    response_s: float


class _SilentHandler(http.server.BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def _respond(self, body: bytes, status: int = 200):
        backend = self.server.backend  # type: ignore[attr-defined]
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        backend.hits += 1

    def do_GET(self):
        backend = self.server.backend  # type: ignore[attr-defined]
        if backend.delay_s:
            time.sleep(backend.delay_s)
        if self.path == "/utilization":
            self._respond(f"{backend.utilization:.3f}".encode())
        else:
            self._respond(f"ok {self.path}".encode())

    def do_POST(self):
        backend = self.server.backend  # type: ignore[attr-defined]
        if backend.delay_s:
            time.sleep(backend.delay_s)
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length) if length else b""
        backend.last_body = body
        self._respond(f"ok {len(body)}".encode())


class LoopbackBackend:
    """A tiny local HTTP backend for proxy tests and sweeps.

    Serves GET/POST echoes plus a /utilization endpoint reporting the
    settable `utilization` attribute.
    """

    def __init__(self, delay_s: float = 0.0, port: int = 0):
        self._httpd = http.server.ThreadingHTTPServer(("127.0.0.1", port), _SilentHandler)
        self._httpd.backend = self  # type: ignore[attr-defined]
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None
        self.delay_s = delay_s
        self.utilization = 0.0
        self.hits = 0
        self.last_body = b""

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def address(self) -> str:
        return f"127.0.0.1:{self.port}"

    def start(self) -> "LoopbackBackend":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def drive_proxy(
    host: str,
    port: int,
    requests,
    timeout_s: float = 10.0,
    max_client_threads: int = 32,
) -> list[ProxyProbeResult]:
    """Replay a generated request stream against a live proxy at its arrival times."""
    results: list[ProxyProbeResult] = []
    results_lock = threading.Lock()

    def send(request) -> None:
        target = request.path if request.query is None else f"{request.path}?{request.query}"
        body = b"payload=1" if request.method != GET else None
        started = time.monotonic()
        try:
            conn = HTTPConnection(host, port, timeout=timeout_s)
            headers = {name: value for name, value in request.headers}
            headers.setdefault("Host", "loopback.test")
            if body is not None:
                headers["Content-Length"] = str(len(body))
            conn.request(request.method, target, body=body, headers=headers)
            response = conn.getresponse()
            response.read()
            status = response.status
            server_name = response.getheader("X-Balancelab-Server", "")
            conn.close()
        except OSError:
            status = 599
            server_name = ""
        elapsed = time.monotonic() - started
        with results_lock:
            results.append(
                ProxyProbeResult(request.request_id, request.method, status, server_name, elapsed)
            )

    start = time.monotonic()
    with ThreadPoolExecutor(max_workers=max_client_threads) as executor:
        for request in requests:
            lag = request.arrival_time - (time.monotonic() - start)
            if lag > 0:
                time.sleep(lag)
            executor.submit(send, request)
    results.sort(key=lambda r: r.request_id)
    return results


def _proxy_sweep(
    counts: list[int],
    scenario: Scenario,
    environment: EnvironmentProfile,
    config: AlgorithmConfig,
) -> list[SummaryRow]:
    from .proxy import BackendAddress, ProxyConfig, ReverseProxy

    rows: list[SummaryRow] = []
    stream = generate(scenario)
    for count in counts:
        backends = [LoopbackBackend().start() for _ in environment.servers]
        name_to_index = {f"lo{i + 1}": i for i in range(len(backends))}
        proxy_config = ProxyConfig(
            listen_host="127.0.0.1",
            listen_port=0,
            maxconn=max(256, count * 4),
            workers=count,
            balance=config,
            servers=[
                BackendAddress(name=f"lo{i + 1}", host="127.0.0.1", port=b.port)
                for i, b in enumerate(backends)
            ],
            health_interval_s=1.0,
        )
        proxy = ReverseProxy(proxy_config, log_stream=None)
        proxy.start()
        try:
            # a small client pool keeps driver-side thread churn out of the
            # measurement; at benchmark rates requests barely overlap
            probes = drive_proxy(proxy.host, proxy.port, stream, max_client_threads=8)
        finally:
            proxy.shutdown()
            for backend in backends:
                backend.stop()
        records = [
            MetricsRecord(
                request_id=p.request_id,
                method=p.method,
                server_id=name_to_index.get(p.server_name, 0) + 1,
                arrival_time=0.0,
                response_time=p.response_s,
                deadline_met=p.response_s <= scenario.deadline_s,
                rejected=p.status != 200,
            )
            if p.status == 200
            else MetricsRecord(p.request_id, p.method, None, 0.0, None, False, True)
            for p in probes
        ]
        stats = summarize_records(records, len(backends))
        for task_type in sorted(stats):
            s = stats[task_type]
            rows.append(
                SummaryRow(
                    algorithm=config.kind,
                    environment=f"loopback:{environment.name}",
                    total_requests=scenario.total_requests,
                    task_type=task_type,
                    mean_response_s=s.mean,
                    p95_response_s=s.p95,
                    deadline_miss_fraction=s.miss_fraction,
                    rejected_count=s.rejected,
                    per_server_dispatch_counts=s.counts,
                    workers=count,
                )
            )
    rows.sort(key=_row_key)
    return rows


# -- emission --------------------------------------------------------------------

CSV_HEADER = (
    "algorithm,environment,total_requests,task_type,mean_response_s,p95_response_s,"
    "deadline_miss_fraction,rejected_count,per_server_dispatch_counts,workers"
)


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return "%.10g" % value


def _csv_field(text: str) -> str:
    if any(ch in text for ch in (",", '"', "\n", "\r")):
        return '"' + text.replace('"', '""') + '"'
    return text


def _csv_line(row: SummaryRow) -> str:
    fields = [
        row.algorithm,
        row.environment,
        str(row.total_requests),
        row.task_type,
        _fmt(row.mean_response_s),
        _fmt(row.p95_response_s),
        _fmt(row.deadline_miss_fraction),
        _fmt(row.rejected_count),
        ";".join(_fmt(c) for c in row.per_server_dispatch_counts),
        "" if row.workers is None else str(row.workers),
    ]
    return ",".join(_csv_field(f) for f in fields)


def _series_label(row: SummaryRow) -> str:
    if row.workers is None:
        return row.algorithm
    return f"{row.algorithm}[w={row.workers}]"


_SVG_PALETTE = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
)


def _render_svg(
    title: str,
    series: dict[str, list[tuple[int, float]]],
    deadline_s: float,
) -> str:
    width, height = 720, 440
    left, right, top, bottom = 70, 180, 40, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    xs = [x for points in series.values() for x, _ in points]
    ys = [y for points in series.values() for _, y in points if y == y]  # drop NaN
    x_max = max(xs) if xs else 1
    y_max = max(ys + [deadline_s]) * 1.1 if ys else deadline_s * 1.1
    if y_max <= 0:
        y_max = 1.0

    def px(x: float) -> float:
        return left + (x / x_max) * plot_w

    def py(y: float) -> float:
        return top + plot_h - (y / y_max) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="20" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x_val = x_max * frac
        y_val = y_max * frac
        parts.append(
            f'<text x="{px(x_val):.1f}" y="{top + plot_h + 18}" font-family="sans-serif" '
            f'font-size="10" text-anchor="middle">{x_val:.0f}</text>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{py(y_val):.1f}" font-family="sans-serif" '
            f'font-size="10" text-anchor="end">{y_val:.3g}</text>'
        )
    parts.append(
        f'<line x1="{left}" y1="{py(deadline_s):.1f}" x2="{left + plot_w}" y2="{py(deadline_s):.1f}" '
        f'stroke="red" stroke-dasharray="6,4"/>'
    )
    parts.append(
        f'<text x="{left + plot_w + 6}" y="{py(deadline_s):.1f}" font-family="sans-serif" '
        f'font-size="10" fill="red">deadline {deadline_s:g}s</text>'
    )
    for i, label in enumerate(sorted(series)):
        color = _SVG_PALETTE[i % len(_SVG_PALETTE)]
        points = sorted(p for p in series[label] if p[1] == p[1])
        if points:
            coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in points)
            parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        legend_y = top + 14 * i
        parts.append(
            f'<line x1="{left + plot_w + 6}" y1="{legend_y + 20}" x2="{left + plot_w + 26}" '
            f'y2="{legend_y + 20}" stroke="{color}"/>'
        )
        parts.append(
            f'<text x="{left + plot_w + 30}" y="{legend_y + 24}" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(
    rows: Sequence[SummaryRow],
    out_dir: str | Path,
    deadline_s: float = 3.0,
    formats: Sequence[str] = ("csv", "gnuplot", "svg"),
) -> list[Path]:
    """Write results under out_dir; returns the files written.

    Outputs: results.csv (RFC-4180 quoting), one gnuplot data file per
    (environment, task_type) with a column per algorithm, and an SVG line
    chart per data file with the deadline drawn as a dashed horizontal line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=_row_key)
    written: list[Path] = []
    if "csv" in formats:
        csv_path = out / "results.csv"
        lines = [CSV_HEADER] + [_csv_line(row) for row in ordered]
        csv_path.write_bytes(("\r\n".join(lines) + "\r\n").encode("utf-8"))
        written.append(csv_path)
    if "gnuplot" in formats or "svg" in formats:
        groups: dict[tuple[str, str], dict[str, dict[int, float]]] = {}
        for row in ordered:
            group = groups.setdefault((row.environment, row.task_type), {})
            group.setdefault(_series_label(row), {})[row.total_requests] = row.mean_response_s
        for (environment, task_type), series in sorted(groups.items()):
            labels = sorted(series)
            totals = sorted({t for data in series.values() for t in data})
            safe_env = environment.replace(":", "_").replace("/", "_")
            if "gnuplot" in formats:
                dat_path = out / f"plot_{safe_env}_{task_type}.dat"
                lines = ["# total_requests " + " ".join(labels)]
                for total in totals:
                    cells = [
                        _fmt(series[label].get(total, float("nan"))) for label in labels
                    ]
                    lines.append(f"{total} " + " ".join(cells))
                dat_path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
                written.append(dat_path)
            if "svg" in formats:
                svg_path = out / f"fig_{safe_env}_{task_type}.svg"
                svg_series = {
                    label: sorted(series[label].items()) for label in labels
                }
                svg_path.write_bytes(
                    _render_svg(
                        f"{environment} / {task_type} mean response time (s)",
                        svg_series,
                        deadline_s,
                    ).encode("utf-8")
                )
                written.append(svg_path)
    return written
