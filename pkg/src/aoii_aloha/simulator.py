"""Monte Carlo simulation of N sensors sharing a slotted ALOHA channel.

Each sensor observes a lazy +-1 random walk and tracks the untruncated age
penalty ``f`` and error ``g = |x - x_hat|``. Slot semantics, per sensor:

1. the transmit decision is drawn from the policy at the truncated state
   held at the start of the slot;
2. the process moves (+1 or -1 with probability ``p_t`` each);
3. ``g`` is recomputed and ``f`` advances, or resets when ``x == x_hat``;
4. if exactly one sensor transmitted, the base station learns its current
   value and that sensor returns to ``(0, 0)``; two or more transmissions
   collide and nothing is delivered.

This ordering makes the single-sensor simulation follow the truncated chain
kernel exactly (apart from the error cap ``G``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from scipy.optimize import brentq

from .chain import ChainParams, StateSpace, build_state_space, stationary_dist

CHUNK = 4096


@dataclass(frozen=True, eq=False)
class TablePolicy:
    """Finite policy table over truncated ``(f, g)``; states beyond the table use its edge."""

    grid: np.ndarray  # (F+1, G+1), invalid cells 0
    name: str = "dual"

    @classmethod
    def from_vector(cls, pi, space: StateSpace, name: str = "dual") -> TablePolicy:
        grid = np.nan_to_num(space.to_grid(pi, fill=0.0))
        return cls(grid, name)

    @property
    def F(self) -> int:
        return self.grid.shape[0] - 1

    @property
    def G(self) -> int:
        return self.grid.shape[1] - 1


@dataclass(frozen=True)
class StateIndependentPolicy:
    """Transmit with a fixed probability whenever ``g > 0``."""

    prob: float
    name: str

    @property
    def grid(self) -> np.ndarray:
        return np.array([[0.0, 0.0], [0.0, self.prob]])


def benchmark_pt1(params: ChainParams) -> StateIndependentPolicy:
    return StateIndependentPolicy(1.0 / params.N, "PT1")


def benchmark_pte(params: ChainParams, E: float) -> StateIndependentPolicy:
    if E < 0:
        raise ValueError(f"E must be nonnegative, got {E}")
    if E / params.N > 1.0:
        raise ValueError(f"E/N = {E / params.N} exceeds 1")
    return StateIndependentPolicy(E / params.N, "PTE")


def pte_budget_for_load(params: ChainParams, load: float, include_sync_state: bool = True) -> float:
    """Budget ``E`` whose PTE policy has network load ``load`` under the chain model.

    PTE stays silent while ``g = 0``, so its load is ``E * P(g > 0)`` rather
    than ``E``. Raises ``ValueError`` when even ``E = N`` falls short.
    """
    if load < 0:
        raise ValueError(f"load must be nonnegative, got {load}")
    if load == 0:
        return 0.0
    space = build_state_space(params)
    active = space.g > 0

    def excess(E):
        pi = np.where(active, E / params.N, 0.0)
        phi, _ = stationary_dist(pi, params, include_sync_state=include_sync_state)
        return params.N * float(phi @ pi) - load

    if excess(float(params.N)) < 0:
        raise ValueError(f"no PTE budget reaches load {load} with N={params.N}")
    return float(brentq(excess, load, float(params.N), xtol=1e-10))


@dataclass(frozen=True)
class SimConfig:
    params: ChainParams
    policy: object
    horizon: int = 100_000
    seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class SimReport:
    avg_aoii: float
    avg_truncated_aoii: float
    avg_load: float
    transmissions: int
    success_slots: int
    collision_slots: int
    idle_slots: int
    horizon: int
    N: int
    seed: int
    occupancy: np.ndarray = field(repr=False)  # counts over truncated (f, g), shape (F+1, G+1)
    trace: np.ndarray | None = field(default=None, repr=False)  # network-mean f*g per slot

    @property
    def success_rate(self) -> float:
        return self.success_slots / self.horizon

    @property
    def collision_rate(self) -> float:
        return self.collision_slots / self.horizon

    @property
    def idle_rate(self) -> float:
        return self.idle_slots / self.horizon

    def occupancy_dist(self, space: StateSpace) -> np.ndarray:
        counts = self.occupancy[space.f, space.g].astype(float)
        return counts / counts.sum()


@dataclass
class World:
    x: np.ndarray
    x_hat: np.ndarray
    f: np.ndarray
    g: np.ndarray

    @classmethod
    def synced(cls, N: int) -> World:
        z = np.zeros(N, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    def copy(self) -> World:
        return World(self.x.copy(), self.x_hat.copy(), self.f.copy(), self.g.copy())


@dataclass(frozen=True)
class SlotOutcome:
    transmitters: np.ndarray
    delivered: int  # sensor index, -1 if idle or collision


def step(world: World, policy, params: ChainParams, u_walk, u_tx) -> tuple[World, SlotOutcome]:
    """Advance every sensor by one slot given the slot's uniform draws.

    Reference implementation of the slot semantics; :func:`run` executes the
    same logic in compiled form.
    """
    grid = policy.grid
    Fp, Gp = grid.shape[0] - 1, grid.shape[1] - 1
    u_walk = np.asarray(u_walk)
    u_tx = np.asarray(u_tx)
    new = world.copy()
    prob = grid[np.minimum(world.f, Fp), np.minimum(world.g, Gp)]
    tx = u_tx < prob
    new.x += np.where(u_walk < params.p_t, 1, np.where(u_walk < 2 * params.p_t, -1, 0))
    new.g = np.abs(new.x - new.x_hat)
    new.f = np.where(new.g == 0, 0, world.f + 1)
    transmitters = np.flatnonzero(tx)
    delivered = -1
    if transmitters.size == 1:
        delivered = int(transmitters[0])
        new.x_hat[delivered] = new.x[delivered]
        new.f[delivered] = 0
        new.g[delivered] = 0
    return new, SlotOutcome(transmitters, delivered)


@numba.njit(cache=True)
def _run_chunk(x, x_hat, f, g, u, p_t, grid, Fo, Go, occupancy, stats, trace, t0, record):
    n_slots, N = u.shape[0], u.shape[1]
    Fp = grid.shape[0] - 1
    Gp = grid.shape[1] - 1
    tx = np.zeros(N, dtype=np.bool_)
    for t in range(n_slots):
        n_tx = 0
        last = -1
        for i in range(N):
            fi = f[i] if f[i] < Fp else Fp
            gi = g[i] if g[i] < Gp else Gp
            tx[i] = u[t, i, 1] < grid[fi, gi]
            if tx[i]:
                n_tx += 1
                last = i
            w = u[t, i, 0]
            if w < p_t:
                x[i] += 1
            elif w < 2.0 * p_t:
                x[i] -= 1
            d = x[i] - x_hat[i]
            g[i] = d if d >= 0 else -d
            if g[i] == 0:
                f[i] = 0
            else:
                f[i] += 1
        if n_tx == 1:
            x_hat[last] = x[last]
            f[last] = 0
            g[last] = 0
            stats[1] += 1
        elif n_tx == 0:
            stats[3] += 1
        else:
            stats[2] += 1
        stats[0] += n_tx
        slot_fg = 0
        for i in range(N):
            fi = f[i] if f[i] < Fo else Fo
            gi = g[i] if g[i] < Go else Go
            occupancy[fi, gi] += 1
            slot_fg += f[i] * g[i]
            stats[5] += fi * gi
        stats[4] += slot_fg
        if record:
            trace[t0 + t] = slot_fg / N


def sensor_streams(seed: int, N: int) -> list[np.random.Generator]:
    """Independent per-sensor generators; sensor ``i``'s stream does not depend on ``N``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(N)]


def draw_uniforms(streams, n_slots: int) -> np.ndarray:
    """``(n_slots, N, 2)`` block: walk draw and transmit draw per sensor and slot."""
    return np.stack([rng.random((n_slots, 2)) for rng in streams], axis=1)


def run(config: SimConfig) -> SimReport:
    """Simulate ``config.horizon`` slots from the all-synced state."""
    params = config.params
    N = params.N
    world = World.synced(N)
    grid = np.ascontiguousarray(config.policy.grid, dtype=float)
    occupancy = np.zeros((params.F + 1, params.G + 1), dtype=np.int64)
    stats = np.zeros(6, dtype=np.int64)  # tx, success, collision, idle, sum fg, sum truncated fg
    trace = np.zeros(config.horizon if config.record_trace else 0)
    streams = sensor_streams(config.seed, N)
    done = 0
    while done < config.horizon:
        n = min(CHUNK, config.horizon - done)
        u = draw_uniforms(streams, n)
        _run_chunk(
            world.x, world.x_hat, world.f, world.g, u, params.p_t, grid,
            params.F, params.G, occupancy, stats, trace, done, config.record_trace,
        )
        done += n
    T = config.horizon
    return SimReport(
        avg_aoii=stats[4] / (T * N),
        avg_truncated_aoii=stats[5] / (T * N),
        avg_load=stats[0] / T,
        transmissions=int(stats[0]),
        success_slots=int(stats[1]),
        collision_slots=int(stats[2]),
        idle_slots=int(stats[3]),
        horizon=T,
        N=N,
        seed=config.seed,
        occupancy=occupancy,
        trace=trace if config.record_trace else None,
    )


def compare(policy_a, policy_b, params: ChainParams, horizon: int = 100_000, seed: int = 0, common_random_numbers: bool = True):
    """AoII reduction of ``policy_a`` relative to ``policy_b``, in percent.

    By default both runs use the same seed, so identical policies give
    exactly 0. With ``common_random_numbers=False`` the runs get independent
    child seeds.
    """
    if common_random_numbers:
        seed_a = seed_b = seed
    else:
        seed_a, seed_b = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    a = run(SimConfig(params, policy_a, horizon, seed_a))
    b = run(SimConfig(params, policy_b, horizon, seed_b))
    if b.avg_aoii == 0:
        raise ZeroDivisionError("baseline AoII is zero; reduction undefined")
    return 100.0 * (1.0 - a.avg_aoii / b.avg_aoii), a, b


