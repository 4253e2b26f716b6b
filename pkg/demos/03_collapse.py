"""Why the pipeline simulates its candidates before deploying one.

The chain model solves for the collision term from an optimistic start, so
it describes the light-traffic regime even when the real network would lock
into a congested one. Driving the bound down tends to raise the load until
that happens. Here we follow a plain descent run and check each checkpoint
in the N-sensor simulator.

Takes about 10 seconds. Run: python demos/03_collapse.py
"""

from dataclasses import replace

from aoii_aloha.chain import ChainParams, build_state_space, stationary_dist, truncated_aoii
from aoii_aloha.optimizer import OptimConfig, descend, threshold_policy
from aoii_aloha.simulator import SimConfig, TablePolicy, run

params = ChainParams(p_t=0.05, F=100, G=50, N=25)
space = build_state_space(params)
pi0 = threshold_policy(43.4, 0.2, space)
phi0, _ = stationary_dist(pi0, params)

snapshots = [(0, pi0)]
config = replace(OptimConfig(), max_steps=20_000)
descend(pi0, phi0, params, config, record_every=1000,
        callback=lambda k, pi, phi: snapshots.append((k, pi.clip(0, 1))), callback_every=5000)

print(f"{'step':>6}{'model E[fg]':>13}{'model load':>12}{'sim AoII':>10}{'sim load':>10}")
for step, pi in snapshots:
    pi[0] = 0.0
    phi, _ = stationary_dist(pi, params)
    rep = run(SimConfig(params, TablePolicy.from_vector(pi, space), 50_000, seed=1))
    print(f"{step:6d}{truncated_aoii(phi, space):13.2f}{params.N * phi @ pi:12.3f}{rep.avg_aoii:10.2f}{rep.avg_load:10.3f}")
