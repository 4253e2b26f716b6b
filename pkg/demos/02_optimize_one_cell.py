"""Optimize a policy for 25 sensors and compare it with the state-independent benchmarks.

Takes about 20 seconds. Run: python demos/02_optimize_one_cell.py
"""

import numpy as np

from aoii_aloha.chain import ChainParams, build_state_space
from aoii_aloha.pipeline import optimize_policy
from aoii_aloha.simulator import SimConfig, TablePolicy, benchmark_pt1, benchmark_pte, pte_budget_for_load, run

params = ChainParams(p_t=0.05, F=100, G=50, N=25)
space = build_state_space(params)

res = optimize_policy(params, record_every=1000)

print("threshold scan (tau, simulated AoII, load):")
for tau, aoii, load in res.tau_scan:
    print(f"  {tau:8.2f} {aoii:9.2f} {load:6.3f}")
print(f"start: tau={res.init.tau:.2f}, p={res.init.p}")

print("descent checkpoints (step, simulated AoII, load):")
for c in res.checkpoints:
    print(f"  {c.step:6d} {c.avg_aoii:9.2f} {c.avg_load:6.3f}")
print("deployed step", res.chosen_step)

horizon = 100_000
dual = run(SimConfig(params, TablePolicy.from_vector(res.policy, space), horizon, seed=0))
pt1 = run(SimConfig(params, benchmark_pt1(params), horizon, seed=0))
pte = run(SimConfig(params, benchmark_pte(params, dual.avg_load), horizon, seed=0))
E = pte_budget_for_load(params, dual.avg_load)
pte_m = run(SimConfig(params, benchmark_pte(params, E), horizon, seed=0))

print(f"\n{'policy':<16}{'AoII':>9}{'load':>8}")
for name, rep in [("optimized", dual), ("PT1", pt1), ("PTE, E=load", pte), (f"PTE, E={E:.2f}", pte_m)]:
    print(f"{name:<16}{rep.avg_aoii:9.2f}{rep.avg_load:8.3f}")
print(f"reduction vs PT1: {100 * (1 - dual.avg_aoii / pt1.avg_aoii):.1f}%")
print(f"reduction vs PTE: {100 * (1 - dual.avg_aoii / pte.avg_aoii):.1f}%")

# The deployed policy is a threshold on f*g: silent below it
grid = space.to_grid(res.policy, fill=0)
for g in (1, 2, 5, 10):
    f_on = int(np.argmax(grid[:, g] > 0))
    print(f"g={g:2d}: first transmits at f={f_on} (f*g={f_on * g})")
