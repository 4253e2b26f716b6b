import numpy as np
import pytest

from aoii_aloha.chain import ChainParams, build_state_space, stationary_dist, truncated_aoii
from aoii_aloha.optimizer import threshold_policy
from aoii_aloha.simulator import (
    SimConfig,
    StateIndependentPolicy,
    TablePolicy,
    World,
    benchmark_pt1,
    benchmark_pte,
    compare,
    draw_uniforms,
    run,
    sensor_streams,
    step,
)


def reference_run(config):
    """Slot-by-slot replay through the pure-numpy ``step``."""
    p = config.params
    world = World.synced(p.N)
    u = draw_uniforms(sensor_streams(config.seed, p.N), config.horizon)
    occ = np.zeros((p.F + 1, p.G + 1), dtype=np.int64)
    tx = succ = coll = 0
    total_fg = 0
    for t in range(config.horizon):
        world, out = step(world, config.policy, p, u[t, :, 0], u[t, :, 1])
        assert np.array_equal(world.g, np.abs(world.x - world.x_hat))
        assert np.all(world.f[world.g == 0] == 0)
        if out.transmitters.size >= 2:
            assert out.delivered == -1
        tx += out.transmitters.size
        succ += out.delivered >= 0
        coll += out.transmitters.size >= 2
        total_fg += int(np.sum(world.f * world.g))
        np.add.at(occ, (np.minimum(world.f, p.F), np.minimum(world.g, p.G)), 1)
    return tx, succ, coll, total_fg, occ


def random_table(params, seed):
    space = build_state_space(params)
    pi = np.random.default_rng(seed).uniform(0, 1, len(space))
    pi[0] = 0
    return pi, TablePolicy.from_vector(pi, space)


@pytest.mark.parametrize("N,seed", [(1, 0), (3, 1), (6, 2)])
def test_compiled_run_matches_reference_step(N, seed):
    params = ChainParams(0.3, 5, 4, N)
    _, policy = random_table(params, seed)
    cfg = SimConfig(params, policy, horizon=5000, seed=seed)
    rep = run(cfg)
    tx, succ, coll, total_fg, occ = reference_run(cfg)
    assert rep.transmissions == tx
    assert rep.success_slots == succ
    assert rep.collision_slots == coll
    assert rep.avg_aoii == total_fg / (5000 * N)
    np.testing.assert_array_equal(rep.occupancy, occ)


def test_run_spans_chunk_boundaries():
    params = ChainParams(0.2, 6, 4, 2)
    _, policy = random_table(params, 3)
    cfg = SimConfig(params, policy, horizon=9000, seed=4)
    rep = run(cfg)
    assert rep.transmissions == reference_run(cfg)[0]


def test_single_transmitter_delivers():
    params = ChainParams(0.25, 5, 5, 3)
    world = World(np.array([3, 0, -2]), np.array([0, 0, 0]), np.array([4, 0, 2]), np.array([3, 0, 2]))
    policy = TablePolicy(np.where(np.arange(6)[None, :] >= 2, 1.0, 0.0) * np.ones((6, 1)))
    # sensor 0 transmits (g=3), sensor 2 too (g=2) unless its draw is above 1 -> collide
    new, out = step(world, policy, params, u_walk=[0.9, 0.9, 0.9], u_tx=[0.5, 0.5, 0.5])
    assert list(out.transmitters) == [0, 2] and out.delivered == -1
    assert list(new.x_hat) == [0, 0, 0]
    assert list(new.f) == [5, 0, 3]

    policy = TablePolicy(np.where(np.arange(6)[None, :] >= 3, 1.0, 0.0) * np.ones((6, 1)))
    new, out = step(world, policy, params, u_walk=[0.1, 0.9, 0.9], u_tx=[0.5, 0.5, 0.5])
    assert list(out.transmitters) == [0] and out.delivered == 0
    # the walk moves first; the delivered value is the post-move x
    assert new.x_hat[0] == 4 and new.f[0] == 0 and new.g[0] == 0
    assert new.f[2] == 3 and new.g[2] == 2


def test_walk_returning_resets_age():
    params = ChainParams(0.25, 5, 5, 1)
    world = World(np.array([1]), np.array([0]), np.array([3]), np.array([1]))
    never = TablePolicy(np.zeros((6, 6)))
    new, out = step(world, never, params, u_walk=[0.4], u_tx=[0.0])
    assert new.x[0] == 0 and new.f[0] == 0 and new.g[0] == 0
    assert out.delivered == -1


def test_pt1_probability_and_sync_state_silence():
    params = ChainParams(0.1, 10, 5, 50)
    pt1 = benchmark_pt1(params)
    assert pt1.prob == pytest.approx(0.02)
    world = World.synced(50)
    _, out = step(world, pt1, params, u_walk=np.full(50, 0.99), u_tx=np.zeros(50))
    assert out.transmitters.size == 0


def test_pte_validation_and_zero_budget():
    params = ChainParams(0.1, 10, 5, 4)
    assert benchmark_pte(params, 2.0).prob == 0.5
    with pytest.raises(ValueError):
        benchmark_pte(params, 5.0)
    with pytest.raises(ValueError):
        benchmark_pte(params, -1.0)
    # no deliveries: the error is a recurrent walk, but its expected AoII grows with time
    params = ChainParams(0.1, 10, 5, 40)
    avgs = []
    for T in (1000, 10_000, 100_000):
        rep = run(SimConfig(params, benchmark_pte(params, 0.0), horizon=T, seed=1))
        assert rep.transmissions == 0
        avgs.append(rep.avg_aoii)
    assert avgs[0] < avgs[1] < avgs[2]
    assert avgs[2] > 10 * avgs[0]


def test_no_transitions_means_no_error():
    params = ChainParams(1e-12, 5, 5, 4)
    rep = run(SimConfig(params, benchmark_pt1(params), horizon=5000, seed=0))
    assert rep.avg_aoii == 0.0
    assert rep.transmissions == 0


def test_reproducible_reports():
    params = ChainParams(0.2, 8, 5, 5)
    _, policy = random_table(params, 7)
    a = run(SimConfig(params, policy, 3000, seed=11, record_trace=True))
    b = run(SimConfig(params, policy, 3000, seed=11, record_trace=True))
    assert a.avg_aoii == b.avg_aoii and a.transmissions == b.transmissions
    np.testing.assert_array_equal(a.occupancy, b.occupancy)
    np.testing.assert_array_equal(a.trace, b.trace)
    c = run(SimConfig(params, policy, 3000, seed=12))
    assert c.avg_aoii != a.avg_aoii


def test_sensor_streams_do_not_depend_on_population():
    a = draw_uniforms(sensor_streams(5, 3), 10)
    b = draw_uniforms(sensor_streams(5, 7), 10)
    np.testing.assert_array_equal(a, b[:, :3])


def test_load_accounting():
    params = ChainParams(0.2, 8, 5, 6)
    _, policy = random_table(params, 2)
    rep = run(SimConfig(params, policy, 7000, seed=3))
    assert rep.avg_load == rep.transmissions / 7000
    assert rep.success_slots + rep.collision_slots + rep.idle_slots == 7000
    assert rep.occupancy.sum() == 7000 * 6
    assert rep.success_rate + rep.collision_rate + rep.idle_rate == pytest.approx(1.0)


def test_single_sensor_occupancy_matches_chain():
    params = ChainParams(0.25, 5, 5, 1)
    space = build_state_space(params)
    pi, policy = random_table(params, 42)
    phi, _ = stationary_dist(pi, params)
    rep = run(SimConfig(params, policy, 1_000_000, seed=2024))
    emp = rep.occupancy_dist(space)
    assert 0.5 * np.abs(emp - phi).sum() <= 0.02
    assert rep.avg_truncated_aoii == pytest.approx(truncated_aoii(phi, space), rel=0.03)


def test_truncated_average_below_untruncated():
    params = ChainParams(0.3, 4, 3, 10)
    rep = run(SimConfig(params, benchmark_pt1(params), 20000, seed=0))
    assert rep.avg_truncated_aoii <= rep.avg_aoii


def test_compare_identical_policies_is_zero():
    params = ChainParams(0.1, 20, 10, 10)
    pol = benchmark_pt1(params)
    red, a, b = compare(pol, pol, params, horizon=5000, seed=9)
    assert red == 0.0
    red2, _, _ = compare(pol, pol, params, horizon=5000, seed=9, common_random_numbers=False)
    assert red2 != 0.0


def test_compare_threshold_beats_pt1():
    params = ChainParams(0.05, 100, 50, 25)
    space = build_state_space(params)
    thr = TablePolicy.from_vector(threshold_policy(50, 0.2, space), space)
    red, _, _ = compare(thr, benchmark_pt1(params), params, horizon=50_000, seed=0)
    assert red > 50


def test_compare_zero_baseline_raises():
    params = ChainParams(1e-12, 5, 5, 2)
    never = StateIndependentPolicy(0.0, "never")
    with pytest.raises(ZeroDivisionError):
        compare(never, never, params, horizon=100, seed=0)


def test_table_policy_edges_cover_untruncated_states():
    params = ChainParams(0.25, 3, 2, 1)
    space = build_state_space(params)
    pi = np.zeros(len(space))
    pi[space.index[(3, 2)]] = 1.0
    policy = TablePolicy.from_vector(pi, space)
    world = World(np.array([5]), np.array([0]), np.array([9]), np.array([5]))
    _, out = step(world, policy, params, u_walk=[0.9], u_tx=[0.5])
    assert out.delivered == 0
