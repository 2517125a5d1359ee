"""Shared test fixtures: replay servers with cleanup, fast crawl configs,
and random series generation used by the property-style tests."""

import math
import random

import pytest

from nftfolio.ingest import CrawlConfig
from nftfolio.model import PriceSeries, TokenRef
from nftfolio.replay import Fixture, ReplayServer


@pytest.fixture
def server_factory():
    """Start replay servers that are always stopped at test end."""
    servers: list[ReplayServer] = []

    def make(fixture: Fixture, **kwargs) -> ReplayServer:
        server = ReplayServer(fixture, **kwargs)
        server.start()
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.stop()


def fast_config(base_url: str, **overrides) -> CrawlConfig:
    """Crawl config tuned for test speed; rate-limit tests override it."""
    defaults = dict(
        endpoint_base=base_url,
        qps_limit=500.0,
        download_delay_seconds=0.002,
        request_timeout_seconds=5.0,
        collection_limit=50,
    )
    defaults.update(overrides)
    return CrawlConfig(**defaults)


def random_series(
    rng: random.Random,
    length: int | None = None,
    name: str = "TestSeries",
    token: str = "Tok1",
    max_step_seconds: int = 1_000_000,
) -> PriceSeries:
    """Strictly increasing timestamps, positive geometric-walk prices,
    interval lengths from 1 s up to max_step_seconds."""
    n = length if length is not None else rng.randint(2, 200)
    t = rng.randint(1, 2_000_000_000)
    price = rng.uniform(1e-6, 1e6)
    ts, ps = [], []
    for _ in range(n):
        ts.append(t)
        ps.append(price)
        t += rng.randint(1, max_step_seconds)
        price *= math.exp(rng.uniform(-0.5, 0.5))
    return PriceSeries(TokenRef(token, name), tuple(ts), tuple(ps))
