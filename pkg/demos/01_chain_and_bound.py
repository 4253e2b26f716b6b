"""The truncated (f, g) chain of one sensor, and the bound the optimizer minimizes.

Run: python demos/01_chain_and_bound.py
"""

import numpy as np

from aoii_aloha.bound import bound
from aoii_aloha.chain import ChainParams, build_state_space, stationary_dist, truncated_aoii
from aoii_aloha.optimizer import threshold_policy

# A small network: 10 sensors, each tracking a lazy random walk that moves
# with probability 2 * 0.1 per slot. Ages are capped at F, errors at G.
params = ChainParams(p_t=0.1, F=20, G=10, N=10)
space = build_state_space(params)
print(f"{len(space)} states for F={params.F}, G={params.G}")

# Transmit with probability 0.3 once the AoII product f*g reaches tau.
# The bound charges boundary states (f = F or g = G) for the time it takes to
# leave them. A boundary state that never transmits blows the bound up: at
# tau = 60 the cells (F, 1) and (F, 2) are silent.
for tau in (1, 5, 20, 60):
    pi = threshold_policy(tau, 0.3, space)
    phi, ell = stationary_dist(pi, params)
    load = params.N * float(phi @ pi)
    est = truncated_aoii(phi, space)
    J = bound(pi, phi, params).total
    print(f"tau={tau:3d}  load={load:.3f}  no-other-transmitter prob={ell:.3f}  E[fg]={est:7.3f}  bound={J:7.3f}")

# Where does the mass sit? Marginal over the error g.
pi = threshold_policy(5, 0.3, space)
phi, _ = stationary_dist(pi, params)
marg = np.bincount(space.g, weights=phi)
print("P(g = k):", np.round(marg[:6], 4))
