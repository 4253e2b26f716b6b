import sys

import pytest

from aoii_aloha.chain import ChainParams, build_state_space
from aoii_aloha.pipeline import optimize_policy
from aoii_aloha.simulator import SimConfig, TablePolicy, run

FULL_F, FULL_G, FULL_HORIZON = 100, 50, 100_000


@pytest.fixture(scope="session")
def full_cell():
    """Optimized policy on an (N, p_t) cell with F=100, G=50, plus a 1e5-slot run of it; cached per session."""
    cache = {}

    def get(N, p_t):
        if (N, p_t) not in cache:
            params = ChainParams(p_t, FULL_F, FULL_G, N)
            space = build_state_space(params)
            res = optimize_policy(params, record_every=100)
            rep = run(SimConfig(params, TablePolicy.from_vector(res.policy, space), FULL_HORIZON, 0))
            cache[N, p_t] = params, space, res, rep
        return cache[N, p_t]

    return get


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
