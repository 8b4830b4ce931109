"""Flat `key = value` config files with [section] headers.

Shared by the harness and the proxy CLI. Unlike configparser, duplicate keys
are kept in order (backend server lists need them) and nothing is interpolated.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from .algorithms import KINDS, AlgorithmConfig
from .core import BalanceError, HardwareProfile, InvalidConfig
from .harness import DEFAULT_ALGORITHM_KINDS, RunMatrix
from .proxy import BackendAddress, ProxyConfig
from .simcluster import ENVIRONMENTS, EnvironmentProfile, ServiceModel
from .workload import DEFAULT_CATALOG, load_catalog, scenario_suite


class ConfigError(BalanceError):
    """The config file (or CLI override) cannot be turned into a runnable setup."""


Sections = dict[str, list[tuple[str, str]]]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str, origin: str = "<config>") -> Sections:
    sections: Sections = {"": []}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, [])
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        sections[current].append((key.strip(), value.strip()))
    return sections


def load_config(path: str | Path) -> Sections:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config_text(text, origin=str(path))


def section_get(sections: Sections, section: str, key: str) -> Optional[str]:
    for name, value in sections.get(section, []):
        if name == key:
            return value
    return None


def section_get_all(sections: Sections, section: str, key: str) -> list[str]:
    return [value for name, value in sections.get(section, []) if name == key]


def _convert(section: str, key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return kind(value)
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None


def get_typed(sections: Sections, section: str, key: str, kind, default):
    value = section_get(sections, section, key)
    if value is None:
        return default
    return _convert(section, key, value, kind)


# -- builders ---------------------------------------------------------------


def algorithm_from_config(kind: str, sections: Sections, seed: int = 0) -> AlgorithmConfig:
    """Build one algorithm, honoring an optional [algorithm.<kind>] override section."""
    kind = kind.strip()
    if kind not in KINDS:
        raise ConfigError(f"unknown algorithm {kind!r} (choose from {', '.join(KINDS)})")
    section = f"algorithm.{kind}"
    try:
        return AlgorithmConfig(
            kind=kind,
            power_n=get_typed(sections, section, "power_n", int, 2),
            uri_use_path=get_typed(sections, section, "uri_use_path", bool, True),
            uri_use_query=get_typed(sections, section, "uri_use_query", bool, False),
            uri_depth=get_typed(sections, section, "uri_depth", int, 0),
            header_name=get_typed(sections, section, "header_name", str, "Host" if kind == "header" else ""),
            param_name=section_get(sections, section, "param_name"),
            cpu_threshold=get_typed(sections, section, "cpu_threshold", float, 0.8),
            rng_seed=get_typed(sections, section, "rng_seed", int, seed),
        )
    except InvalidConfig as err:
        raise ConfigError(str(err)) from None


def environment_from_config(name: str, sections: Sections) -> EnvironmentProfile:
    """A built-in profile name, or a custom [environment.<name>] section of server lines."""
    name = name.strip()
    if name in ENVIRONMENTS:
        return ENVIRONMENTS[name]
    section = f"environment.{name}"
    lines = section_get_all(sections, section, "server")
    if not lines:
        raise ConfigError(
            f"unknown environment {name!r}: not built-in and no [{section}] section"
        )
    profiles = []
    for i, line in enumerate(lines):
        fields = dict(
            part.split("=", 1) for part in line.split() if "=" in part
        )
        try:
            profiles.append(
                HardwareProfile(
                    cores=int(fields.get("cores", "1")),
                    core_speed_ghz=float(fields.get("speed_ghz", "1.80")),
                    ram_gb=float(fields.get("ram_gb", "16")),
                    label=fields.get("label", f"{name}-{i + 1}"),
                )
            )
        except ValueError as err:
            raise ConfigError(f"[{section}] server: {err}") from None
    return EnvironmentProfile(name=name, servers=tuple(profiles))


def service_model_from_config(sections: Sections) -> ServiceModel:
    try:
        return ServiceModel(
            base_cost_get=get_typed(sections, "service_model", "base_cost_get", float, 0.05),
            base_cost_post=get_typed(sections, "service_model", "base_cost_post", float, 0.15),
            reference_speed_ghz=get_typed(
                sections, "service_model", "reference_speed_ghz", float, 1.80
            ),
            network_latency_s=get_typed(
                sections, "service_model", "network_latency_s", float, 0.0
            ),
        )
    except ValueError as err:
        raise ConfigError(f"[service_model]: {err}") from None


def matrix_from_config(
    sections: Sections,
    algos_override: Optional[str] = None,
    env_override: Optional[str] = None,
    max_total_override: Optional[int] = None,
    seed_override: Optional[int] = None,
    reps_override: Optional[int] = None,
) -> tuple[RunMatrix, ServiceModel, float]:
    """Assemble (matrix, service model, deadline) from config plus CLI overrides."""
    base_seed = seed_override if seed_override is not None else get_typed(
        sections, "matrix", "base_seed", int, 0
    )
    algo_csv = algos_override or section_get(sections, "matrix", "algorithms") or ",".join(
        DEFAULT_ALGORITHM_KINDS
    )
    algorithms = [
        algorithm_from_config(kind, sections, seed=base_seed)
        for kind in algo_csv.split(",")
        if kind.strip()
    ]
    env_csv = env_override or section_get(sections, "matrix", "environments") or "homogeneous,heterogeneous"
    environments = [
        environment_from_config(name, sections) for name in env_csv.split(",") if name.strip()
    ]
    max_total = max_total_override if max_total_override is not None else get_typed(
        sections, "matrix", "max_total", int, 80000
    )
    step = get_typed(sections, "matrix", "step", int, 5000)
    repetitions = reps_override if reps_override is not None else get_typed(
        sections, "matrix", "repetitions", int, 3
    )
    deadline_s = get_typed(sections, "workload", "deadline_s", float, 3.0)
    catalog_file = section_get(sections, "workload", "catalog_file")
    if catalog_file:
        try:
            catalog = load_catalog(catalog_file)
        except (OSError, ValueError) as err:
            raise ConfigError(f"[workload] catalog_file: {err}") from None
    else:
        catalog = DEFAULT_CATALOG
    try:
        scenarios = scenario_suite(
            max_total=max_total,
            step=step,
            period_s=get_typed(sections, "workload", "period_s", float, 60.0),
            get_fraction=get_typed(sections, "workload", "get_fraction", float, 0.5),
            arrival=get_typed(sections, "workload", "arrival", str, "uniform_rate"),
            seed=base_seed,
            catalog=catalog,
            deadline_s=deadline_s,
        )
        matrix = RunMatrix(
            algorithms=algorithms,
            scenarios=scenarios,
            environments=environments,
            repetitions=repetitions,
            base_seed=base_seed,
        )
    except (BalanceError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return matrix, service_model_from_config(sections), deadline_s


def proxy_from_config(sections: Sections) -> ProxyConfig:
    """Build the proxy runtime config from the [proxy] section."""
    listen = section_get(sections, "proxy", "listen") or "127.0.0.1:8080"
    host, _, port_text = listen.rpartition(":")
    if not host or not port_text.isdigit():
        raise ConfigError(f"[proxy] listen: expected host:port, got {listen!r}")
    balance_kind = section_get(sections, "proxy", "balance") or "roundrobin"
    balance = algorithm_from_config(balance_kind, sections)
    servers = []
    for line in section_get_all(sections, "proxy", "server"):
        parts = line.split()
        if len(parts) < 2 or ":" not in parts[1]:
            raise ConfigError(
                f"[proxy] server: expected 'name host:port [weight=N] [maxconn=N]', got {line!r}"
            )
        name = parts[0]
        backend_host, _, backend_port = parts[1].rpartition(":")
        options = dict(p.split("=", 1) for p in parts[2:] if "=" in p)
        try:
            servers.append(
                BackendAddress(
                    name=name,
                    host=backend_host,
                    port=int(backend_port),
                    weight=int(options.get("weight", "1")),
                    maxconn=int(options["maxconn"]) if "maxconn" in options else None,
                )
            )
        except ValueError as err:
            raise ConfigError(f"[proxy] server {name}: {err}") from None
    try:
        return ProxyConfig(
            listen_host=host,
            listen_port=int(port_text),
            maxconn=get_typed(sections, "proxy", "maxconn", int, 256),
            workers=get_typed(sections, "proxy", "workers", int, os.cpu_count() or 1),
            balance=balance,
            servers=servers,
            health_interval_s=get_typed(sections, "proxy", "health_interval_s", float, 2.0),
            spread_checks_pct=get_typed(sections, "proxy", "spread_checks_pct", float, 0.0),
            fall_threshold=get_typed(sections, "proxy", "fall", int, 3),
            rise_threshold=get_typed(sections, "proxy", "rise", int, 2),
            rdp_cookie_name=get_typed(sections, "proxy", "rdp_cookie_name", str, "msts"),
            access_log=section_get(sections, "proxy", "access_log"),
            backend_timeout_s=get_typed(sections, "proxy", "backend_timeout_s", float, 10.0),
            probe_timeout_s=get_typed(sections, "proxy", "probe_timeout_s", float, 1.0),
        )
    except ValueError as err:
        raise ConfigError(f"[proxy]: {err}") from None
