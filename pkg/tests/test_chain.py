from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aoii_aloha.chain import (
    ChainParams,
    ConvergenceError,
    build_kernel,
    build_state_space,
    collision_term,
    stationary_dist,
    state_space_size,
    success_prob,
    truncated_aoii,
)

SETTINGS = settings(max_examples=60, deadline=None, derandomize=True)


def uniform_policy(space, value):
    pi = np.full(len(space), float(value))
    pi[0] = 0.0
    return pi


@st.composite
def instances(draw, max_F=10):
    F = draw(st.integers(1, max_F))
    G = draw(st.integers(1, F))
    p_t = draw(st.floats(0.01, 0.49))
    N = draw(st.integers(1, 60))
    params = ChainParams(p_t, F, G, N)
    n = state_space_size(F, G)
    pi = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)))
    pi[0] = 0.0
    return params, pi


# --- parameters and state space ---------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(p_t=0.0, F=3, G=2, N=1),
        dict(p_t=0.5, F=3, G=2, N=1),
        dict(p_t=0.2, F=2, G=3, N=1),
        dict(p_t=0.2, F=3, G=0, N=1),
        dict(p_t=0.2, F=3, G=2, N=0),
    ],
)
def test_invalid_params_rejected(kwargs):
    with pytest.raises(ValueError):
        ChainParams(**kwargs)


def test_p_r_complements_moves():
    assert ChainParams(0.3, 2, 2, 1).p_r == pytest.approx(0.4, abs=1e-15)


def test_state_space_small():
    space = build_state_space(ChainParams(0.25, 2, 2, 1))
    assert list(space.states) == [(0, 0), (1, 1), (2, 1), (2, 2)]
    assert [space.index[s] for s in space.states] == [0, 1, 2, 3]


@pytest.mark.parametrize("F,G,size", [(2, 2, 4), (3, 2, 6), (100, 100, 5051), (100, 50, 3776)])
def test_state_space_size(F, G, size):
    assert len(build_state_space(ChainParams(0.1, F, G, 1))) == size
    assert state_space_size(F, G) == size


def test_state_space_ordering_row_major():
    space = build_state_space(ChainParams(0.1, 7, 3, 1))
    assert list(space.states) == sorted(space.states)
    assert all(1 <= g <= min(f, 3) for f, g in space.states[1:])


def test_grid_round_trip():
    space = build_state_space(ChainParams(0.1, 6, 4, 1))
    v = np.arange(len(space), dtype=float)
    grid = space.to_grid(v)
    assert np.isnan(grid[1, 2])  # g > f is not a state
    np.testing.assert_array_equal(space.from_grid(grid), v)


# --- collision term and success probability -----------------------------------


def test_collision_silent_policy():
    space = build_state_space(ChainParams(0.25, 2, 2, 5))
    phi = np.array([0.1, 0.2, 0.3, 0.4])
    assert collision_term(np.zeros(4), phi) == pytest.approx(1.0)


def test_collision_always_transmit():
    space = build_state_space(ChainParams(0.25, 2, 2, 5))
    phi = np.array([0.1, 0.2, 0.3, 0.4])
    assert collision_term(uniform_policy(space, 1.0), phi) == pytest.approx(0.1)


def test_collision_half_uniform():
    space = build_state_space(ChainParams(0.25, 2, 2, 5))
    pi = uniform_policy(space, 0.5)
    phi = np.full(4, 0.25)
    # scalar product written out state by state
    oracle = 0.25 * 1.0 + sum(0.25 * (1 - 0.5) for _ in range(3))
    assert oracle == pytest.approx(0.625)
    assert collision_term(pi, phi) == pytest.approx(oracle, abs=1e-15)


def test_collision_literal_form_omits_sync_state():
    pi = np.array([0.0, 0.5, 0.5, 0.5])
    phi = np.full(4, 0.25)
    assert collision_term(pi, phi, include_sync_state=False) == pytest.approx(0.375)


def test_collision_index_mismatch():
    with pytest.raises(ValueError):
        collision_term(np.zeros(4), np.zeros(5))


def test_success_single_sensor_equals_policy():
    pi = np.array([0.0, 0.3, 0.7, 1.0])
    np.testing.assert_array_equal(success_prob(pi, 0.2, ChainParams(0.1, 2, 2, 1)), pi)


def test_success_formula():
    q = success_prob(np.array([0.0, 0.5]), 0.8, ChainParams(0.1, 1, 1, 2))
    assert q[1] == pytest.approx(0.4)


def test_success_certain_collision():
    q = success_prob(np.array([0.0, 0.5]), 0.0, ChainParams(0.1, 1, 1, 3))
    assert q[1] == 0.0


@SETTINGS
@given(instances(), st.floats(0.0, 1.0))
def test_success_never_exceeds_policy(inst, ell):
    params, pi = inst
    q = success_prob(pi, ell, params)
    assert np.all(q <= pi + 1e-15)


# --- kernel -------------------------------------------------------------------


def kernel_row(params, pi, q, state):
    return build_kernel(pi, q, params).row(state)


def assert_row(row, expected):
    assert set(row) == set(expected)
    for s, p in expected.items():
        assert row[s] == pytest.approx(p, abs=1e-15), s
    assert sum(row.values()) == pytest.approx(1.0, abs=1e-12)


def test_kernel_sync_row():
    params = ChainParams(0.25, 3, 3, 1)
    space = build_state_space(params)
    pi = uniform_policy(space, 0.4)
    assert_row(kernel_row(params, pi, pi, (0, 0)), {(1, 1): 0.5, (0, 0): 0.5})


def test_kernel_error_one_row():
    params = ChainParams(0.3, 5, 3, 1)
    space = build_state_space(params)
    q = np.zeros(len(space))
    q[space.index[(3, 1)]] = 0.2
    assert_row(kernel_row(params, q, q, (3, 1)), {(4, 2): 0.24, (4, 1): 0.32, (0, 0): 0.3 + 0.7 * 0.2})


def test_kernel_generic_row():
    params = ChainParams(0.25, 5, 5, 1)
    space = build_state_space(params)
    q = np.zeros(len(space))
    q[space.index[(2, 2)]] = 0.1
    assert_row(kernel_row(params, q, q, (2, 2)), {(3, 3): 0.225, (3, 1): 0.225, (3, 2): 0.45, (0, 0): 0.1})


@pytest.mark.parametrize("F,G", [(5, 5), (7, 3)])
def test_kernel_corner_row_merges_truncated_targets(F, G):
    params = ChainParams(0.25, F, G, 1)
    space = build_state_space(params)
    q = np.zeros(len(space))
    q[space.index[(F, G)]] = 0.1
    # up move saturates onto (F, G) and merges with stay; down move leaves the corner
    expected = {(F, G): (0.25 + 0.5) * 0.9, (F, G - 1): 0.25 * 0.9, (0, 0): 0.1}
    assert_row(kernel_row(params, q, q, (F, G)), expected)


def test_kernel_corner_row_single_error_level():
    params = ChainParams(0.25, 4, 1, 1)
    space = build_state_space(params)
    q = np.zeros(len(space))
    q[space.index[(4, 1)]] = 0.1
    expected = {(4, 1): 0.75 * 0.9, (0, 0): 0.25 + 0.75 * 0.1}
    assert_row(kernel_row(params, q, q, (4, 1)), expected)


def test_kernel_rejects_transmitting_sync_state():
    params = ChainParams(0.25, 2, 2, 1)
    pi = np.array([0.1, 0.2, 0.2, 0.2])
    with pytest.raises(ValueError):
        build_kernel(pi, pi, params)


@settings(max_examples=200, deadline=None, derandomize=True)
@given(instances(), st.data())
def test_kernel_rows_stochastic(inst, data):
    params, pi = inst
    n = len(pi)
    q = np.array(data.draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)))
    q[0] = 0.0
    P = build_kernel(pi, q, params).matrix
    np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, rtol=0, atol=1e-12)
    assert np.diff(P.indptr).max() <= 4
    assert P.data.min() >= 0.0


def reachable(P, start, reverse=False):
    A = (P.T if reverse else P).tocsr()
    seen = {start}
    todo = deque([start])
    while todo:
        i = todo.popleft()
        for j in A.indices[A.indptr[i] : A.indptr[i + 1]]:
            if j not in seen:
                seen.add(int(j))
                todo.append(int(j))
    return seen


@SETTINGS
@given(instances())
def test_reachable_states_satisfy_error_below_age(inst):
    params, pi = inst
    space = build_state_space(params)
    P = build_kernel(pi, success_prob(pi, 0.7, params), params).matrix
    for i in reachable(P, 0):
        f, g = space.states[i]
        if f < params.F:
            assert g <= f


@SETTINGS
@given(instances())
def test_sync_state_reachable_from_everywhere(inst):
    params, pi = inst
    space = build_state_space(params)
    for policy in (pi, np.zeros_like(pi)):
        P = build_kernel(policy, success_prob(policy, 0.5, params), params).matrix
        assert reachable(P, 0, reverse=True) == set(range(len(space)))


# --- stationary distribution ----------------------------------------------------


def random_walk_kernel_2x2(p_t):
    """Hand-written kernel for F=G=2 with a silent policy; states (0,0),(1,1),(2,1),(2,2)."""
    p_r = 1 - 2 * p_t
    return np.array(
        [
            [p_r, 2 * p_t, 0.0, 0.0],
            [p_t, 0.0, p_r, p_t],
            [p_t, 0.0, p_r, p_t],
            [0.0, 0.0, p_t, p_r + p_t],
        ]
    )


def dense_stationary(P):
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def test_stationary_silent_policy_matches_dense_solve():
    params = ChainParams(0.25, 2, 2, 4)
    phi, ell = stationary_dist(np.zeros(4), params)
    expected = dense_stationary(random_walk_kernel_2x2(0.25))
    np.testing.assert_allclose(phi, expected, atol=1e-12)
    assert ell == pytest.approx(1.0)


def test_stationary_single_sensor_matches_eigenvector():
    params = ChainParams(0.2, 6, 4, 1)
    space = build_state_space(params)
    rng = np.random.default_rng(3)
    pi = rng.uniform(0, 1, len(space))
    pi[0] = 0.0
    phi, _ = stationary_dist(pi, params)
    P = build_kernel(pi, pi, params).matrix.toarray()
    w, v = np.linalg.eig(P.T)
    vec = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    np.testing.assert_allclose(phi, vec / vec.sum(), atol=1e-8)


def test_stationary_congested_matches_frozen_power_iteration():
    params = ChainParams(0.25, 4, 4, 40)
    space = build_state_space(params)
    pi = uniform_policy(space, 1.0)
    phi, ell = stationary_dist(pi, params)
    P = build_kernel(pi, success_prob(pi, ell, params), params).matrix.toarray()
    ref = np.full(len(space), 1.0 / len(space))
    for _ in range(20_000):
        ref = ref @ P
    np.testing.assert_allclose(phi, ref, atol=1e-9)
    assert ell < 0.2  # heavily congested


@SETTINGS
@given(instances(max_F=8))
def test_stationary_fixed_point_consistency(inst):
    params, pi = inst
    phi, ell = stationary_dist(pi, params)
    assert abs(ell - collision_term(pi, phi)) <= 1e-9
    P = build_kernel(pi, success_prob(pi, ell, params), params).matrix
    assert np.linalg.norm(P.T @ phi - phi) <= 1e-10
    assert phi.min() >= 0 and phi.sum() == pytest.approx(1.0, abs=1e-9)


def test_stationary_power_iteration_path_agrees_with_direct():
    params = ChainParams(0.2, 8, 5, 10)
    space = build_state_space(params)
    pi = uniform_policy(space, 0.15)
    direct, ell_d = stationary_dist(pi, params)
    power, ell_p = stationary_dist(pi, params, direct_max_states=0)
    np.testing.assert_allclose(power, direct, atol=1e-8)
    assert ell_p == pytest.approx(ell_d, abs=1e-9)


def test_stationary_reports_non_convergence():
    params = ChainParams(0.25, 4, 4, 40)
    pi = uniform_policy(build_state_space(params), 1.0)
    with pytest.raises(ConvergenceError) as err:
        stationary_dist(pi, params, max_outer=2)
    assert err.value.ell_gap > 0


def test_stationary_rejects_invalid_policy():
    params = ChainParams(0.25, 2, 2, 2)
    with pytest.raises(ValueError):
        stationary_dist(np.array([0.0, 1.5, 0.0, 0.0]), params)


# --- truncated AoII -------------------------------------------------------------


def test_truncated_aoii_point_mass():
    space = build_state_space(ChainParams(0.1, 2, 2, 1))
    assert truncated_aoii(np.array([1.0, 0, 0, 0]), space) == 0.0


def test_truncated_aoii_uniform():
    space = build_state_space(ChainParams(0.1, 2, 2, 1))
    assert truncated_aoii(np.full(4, 0.25), space) == pytest.approx(1.75)


@pytest.mark.parametrize("value", [0.05, 0.3, 0.8])
@pytest.mark.parametrize("p_t", [0.1, 0.3])
def test_truncated_aoii_grows_with_truncation(value, p_t):
    prev = -np.inf
    for F, G in [(2, 2), (4, 2), (4, 4), (8, 4), (8, 8), (12, 8)]:
        params = ChainParams(p_t, F, G, 5)
        space = build_state_space(params)
        phi, _ = stationary_dist(uniform_policy(space, value), params)
        cur = truncated_aoii(phi, space)
        assert cur >= prev - 1e-9
        prev = cur
