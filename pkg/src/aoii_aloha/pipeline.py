"""Two-phase optimization pipeline: pick a threshold start, descend, keep the best iterate.

The threshold ``tau`` for the starting policy is found in one of two ways:

``"search"`` (default)
    Threshold policies with ``p = min(1/2, 5/N)`` are simulated over a
    geometric grid of ``tau`` values centred on the stationary truncated AoII
    of :func:`~aoii_aloha.optimizer.seed_init`; the best one wins.
``"preliminary"``
    ``tau`` is the stationary truncated AoII of the policy returned by a
    preliminary descent run (:func:`~aoii_aloha.optimizer.calibrate_tau`).

The main descent run is checkpointed; every checkpoint policy (and the
threshold start itself) is simulated with dedicated seeds and the lowest
average AoII is deployed. Descent on the bound can raise the network load
into a regime where the optimistic fixed point of the chain no longer
describes the real N-sensor system; the selection step guards against that.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .chain import ChainParams, build_state_space, stationary_dist, truncated_aoii
from .optimizer import (
    OptimConfig,
    OptimTrace,
    ThresholdInit,
    calibrate_tau,
    default_plateau,
    deployable,
    descend,
    seed_init,
    threshold_policy,
)
from .simulator import SimConfig, TablePolicy, run

logger = logging.getLogger(__name__)

TAU_METHODS = ("search", "preliminary")


@dataclass(frozen=True)
class PipelineConfig:
    tau_method: str = "search"
    tau_factors: tuple = tuple(2.0 ** (k / 2) for k in range(-4, 7))
    phase1_steps: int = 1000  # preliminary run length, "preliminary" method only
    eval_horizon: int = 50_000
    eval_seeds: tuple = (1_000_003, 1_000_033)
    checkpoints: int = 10
    select: bool = True

    def __post_init__(self):
        if self.tau_method not in TAU_METHODS:
            raise ValueError(f"tau_method must be one of {TAU_METHODS}")
        if not self.tau_factors or min(self.tau_factors) <= 0:
            raise ValueError("tau_factors must be a non-empty list of positive numbers")
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        if not self.eval_seeds:
            raise ValueError("eval_seeds must not be empty")
        if self.phase1_steps < 1 or self.eval_horizon < 1 or self.checkpoints < 1:
            raise ValueError("phase1_steps, eval_horizon and checkpoints must be >= 1")


@dataclass(frozen=True)
class Checkpoint:
    step: int
    avg_aoii: float
    avg_load: float


@dataclass
class PipelineResult:
    init: ThresholdInit
    tau_scan: list  # [(tau, avg_aoii, avg_load)], empty for the preliminary method
    calibration: OptimTrace | None
    trace: OptimTrace
    checkpoints: list
    chosen_step: int
    policy: np.ndarray
    phi: np.ndarray  # stationary distribution of the deployed policy
    ell: float


def evaluate(pi, params: ChainParams, horizon: int, seeds) -> Checkpoint:
    """Simulated average AoII and load of a policy vector, averaged over ``seeds``.

    A candidate that collapses under any one seed gets a huge mean, so
    metastable policies lose.
    """
    space = build_state_space(params)
    policy = TablePolicy.from_vector(pi, space)
    reps = [run(SimConfig(params, policy, horizon, s)) for s in seeds]
    return Checkpoint(0, float(np.mean([r.avg_aoii for r in reps])), float(np.mean([r.avg_load for r in reps])))


def search_tau(params: ChainParams, pipeline: PipelineConfig = PipelineConfig(), include_sync_state: bool = True):
    """Simulate threshold policies over a grid of ``tau``; returns ``(ThresholdInit, scan)``."""
    space = build_state_space(params)
    pi0, _ = seed_init(space, params)
    phi0, _ = stationary_dist(pi0, params, include_sync_state=include_sync_state)
    centre = truncated_aoii(phi0, space)
    p = default_plateau(params.N)
    cap = float(params.F * params.G)
    taus = sorted({min(centre * a, cap) for a in pipeline.tau_factors})
    scan = []
    for tau in taus:
        ev = evaluate(threshold_policy(tau, p, space), params, pipeline.eval_horizon, pipeline.eval_seeds)
        scan.append((tau, ev.avg_aoii, ev.avg_load))
    best = min(scan, key=lambda r: (r[1], -r[0]))
    logger.info("tau search for %s: centre %.2f, best tau %.2f (aoii %.2f)", params, centre, best[0], best[1])
    return ThresholdInit(best[0], p), scan


def optimize_policy(
    params: ChainParams,
    config: OptimConfig = OptimConfig(),
    pipeline: PipelineConfig = PipelineConfig(),
    record_every: int = 1,
) -> PipelineResult:
    """Threshold start, main descent run, then simulated selection among checkpoints."""
    space = build_state_space(params)
    sync = config.include_sync_state
    calibration = None
    scan = []
    if pipeline.tau_method == "search":
        init, scan = search_tau(params, pipeline, sync)
    else:
        init, calibration = calibrate_tau(params, replace(config, max_steps=pipeline.phase1_steps), record_every)

    pi0 = threshold_policy(init.tau, init.p, space)
    phi0, _ = stationary_dist(pi0, params, include_sync_state=sync)

    candidates = [(0, pi0)]
    every = max(1, math.ceil(config.max_steps / pipeline.checkpoints))

    def keep(step, pi, phi):
        candidates.append((step, deployable(pi)))

    trace = descend(pi0, phi0, params, config, record_every=record_every, callback=keep, callback_every=every)
    if candidates[-1][0] != trace.step[-1] + 1:
        candidates.append((int(trace.step[-1]) + 1, trace.policy))

    checkpoints = []
    if pipeline.select:
        for step, pi in candidates:
            ev = evaluate(pi, params, pipeline.eval_horizon, pipeline.eval_seeds)
            checkpoints.append(Checkpoint(step, ev.avg_aoii, ev.avg_load))
        best = min(range(len(candidates)), key=lambda i: (checkpoints[i].avg_aoii, -checkpoints[i].step))
    else:
        best = len(candidates) - 1
    chosen_step, policy = candidates[best]
    phi, ell = stationary_dist(policy, params, include_sync_state=sync)
    return PipelineResult(init, scan, calibration, trace, checkpoints, chosen_step, policy, phi, ell)
