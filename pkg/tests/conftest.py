import numpy as np
import pytest

from micro_pref.core_model import MixtureModel, PreferenceBatch, RouterParams


def random_model(k, pair_dim, ctx_dim, seed, hidden=8, head_std=1.0, router_scale=1.0):
    """Model with O(1) parameters everywhere so every gradient path is exercised."""
    rng = np.random.default_rng(seed)
    router = RouterParams(
        rng.normal(0.0, router_scale, size=(hidden, ctx_dim)),
        rng.normal(0.0, router_scale, size=hidden),
        rng.normal(0.0, router_scale, size=(k, hidden)),
        rng.normal(0.0, router_scale, size=k),
    )
    return MixtureModel(rng.normal(0.0, head_std, size=(k, pair_dim)), rng.normal(size=k), router)


def random_batch(n, pair_dim, ctx_dim, seed):
    rng = np.random.default_rng(seed + 10_000)
    return PreferenceBatch(
        rng.standard_normal((n, ctx_dim)),
        rng.standard_normal((n, pair_dim)),
        rng.standard_normal((n, pair_dim)),
    )


def swap(batch):
    return PreferenceBatch(batch.prompt_ctx, batch.loser, batch.winner)


@pytest.fixture
def make_model():
    return random_model


@pytest.fixture
def make_batch():
    return random_batch


# acceptance criteria record (number, title, passed, detail); printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
