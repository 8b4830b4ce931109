import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from balancelab.core import BackendPool, HardwareProfile, Request, ServerSpec


def make_pool(n=5, weights=None, maxconn=None, cores=16, speed_ghz=1.80):
    """A plain pool of n servers with ids 1..n."""
    specs = []
    for i in range(n):
        specs.append(
            ServerSpec(
                server_id=i + 1,
                name=f"srv{i + 1}",
                weight=weights[i] if weights else 1,
                maxconn=maxconn[i] if isinstance(maxconn, (list, tuple)) else maxconn,
                profile=HardwareProfile(cores=cores, core_speed_ghz=speed_ghz, ram_gb=32.0),
            )
        )
    return BackendPool(specs)


def make_request(rid=0, method="GET", path="/x", query=None, headers=(),
                 client_ip=0x0A000001, rdp_cookie=None, arrival=0.0, deadline=3.0):
    return Request(
        request_id=rid,
        arrival_time=arrival,
        method=method,
        path=path,
        query=query,
        headers=headers,
        client_ip=client_ip,
        rdp_cookie=rdp_cookie,
        deadline=deadline,
    )


@pytest.fixture
def pool5():
    return make_pool(5)
