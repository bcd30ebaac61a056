import numpy as np
import pytest

from amen.data import DatasetMeta
from amen.simulator import SimConfig, simulate


def small_meta(**caps) -> DatasetMeta:
    vocab = {"user_id": 10, "item_id": 30, "category_id": 6, "shop_id": 5, "price_bucket": 4,
             "scenario_id": 3, "kind": 6, "entity_id": 8, "recency_bucket": 7,
             "age_bucket": 3, "activity_bucket": 3}
    full_caps = {"moveline": 30, "aiseq": 20, "short_seq": 10, "long_seq": 50}
    full_caps.update(caps)
    return DatasetMeta(vocab=vocab, caps=full_caps)


@pytest.fixture
def meta():
    return small_meta()


@pytest.fixture(scope="session")
def small_sim():
    return simulate(SimConfig(n_users=40, n_items=200, n_categories=8, n_shops=24,
                              n_entities=60, rng_seed=7))


@pytest.fixture(scope="session")
def tiny_sim():
    """A handful of users and tiny caps, for exact-oracle model tests."""
    cfg = SimConfig(n_users=6, n_items=20, n_categories=4, n_scenarios=2, n_shops=4,
                    n_price_buckets=3, n_entities=6, n_age_buckets=2,
                    scenario_offsets=(0.0, 0.0), scenario_weights=(0.5, 0.5),
                    caps={"moveline": 3, "aiseq": 3, "short_seq": 3, "long_seq": 3},
                    rng_seed=3)
    return simulate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line, print it, and fail the test when the check fails."""
    def record(ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
