"""Penalized normalized gradient descent over (policy, distribution) pairs.

The bound ``J(pi, phi)`` is minimized jointly in ``pi`` and ``phi``. The
constraints tying ``phi`` to ``pi`` (stationarity, normalization, box
constraints) are replaced by large constant penalties passed through a
leaky ReLU with per-constraint tolerances.

``pi(0,0)`` is not a free variable: it is fixed at 0 throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bound import BoundLayout, geometric_tail_fg
from .chain import SYNC, ChainParams, StateSpace, build_state_space, stationary_dist, truncated_aoii

logger = logging.getLogger(__name__)

GRAD_MODES = ("analytic", "finite_difference")


class OptimizationError(RuntimeError):
    """Non-finite objective or gradient during descent; carries the partial trace."""

    def __init__(self, message, trace=None, states=()):
        super().__init__(message)
        self.trace = trace
        self.states = tuple(states)


@dataclass(frozen=True)
class EnergyPenalty:
    K_e: float = 1e8
    load_cap: float = 0.5


@dataclass(frozen=True)
class OptimConfig:
    K: tuple = (1e8, 1e11, 1e10, 1e11)
    eps: tuple = (1e-3, 1e-6, 1e-5, 1e-6)
    rho_a: float = 1e-6
    alpha_pi: float = 1e-3
    alpha_phi: float = 1e-4
    max_steps: int = 50_000
    energy_penalty: EnergyPenalty | None = None
    grad_mode: str = "analytic"
    seed: int = 0
    include_sync_state: bool = True
    q_floor: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(float(k) for k in self.K))
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        if len(self.K) != 4 or len(self.eps) != 4:
            raise ValueError("K and eps need exactly four entries")
        if min(self.K) < 0 or min(self.eps) < 0:
            raise ValueError("penalty weights and tolerances must be nonnegative")
        if not 0.0 < self.rho_a < 1.0:
            raise ValueError(f"rho_a must lie in (0, 1), got {self.rho_a}")
        if self.alpha_pi < 0 or self.alpha_phi < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")


@dataclass(frozen=True)
class ThresholdInit:
    tau: float
    p: float

    def __post_init__(self):
        if self.tau < 0 or not 0.0 <= self.p <= 1.0:
            raise ValueError(f"invalid threshold init tau={self.tau}, p={self.p}")


@dataclass
class OptimTrace:
    """Per-step objective history and the final iterate of one descent run."""

    step: np.ndarray
    U: np.ndarray
    J: np.ndarray
    c: np.ndarray  # (n_steps, 4)
    ell: np.ndarray
    raw_pi: np.ndarray
    raw_phi: np.ndarray
    policy: np.ndarray  # deployable: clipped to [0, 1], pi(0,0) = 0
    converged: bool = False
    reason: str = "max_steps"

    def __len__(self):
        return len(self.step)

    @property
    def final_c(self) -> np.ndarray:
        return self.c[-1]


@dataclass(frozen=True)
class Objective:
    """Value of ``U`` and its parts at one ``(pi, phi)``."""

    U: float
    J: float
    c: tuple
    penalty_terms: tuple
    energy_term: float
    ell: float
    load: float
    clamped: bool


def leaky_relu(x, rho_a: float):
    return np.maximum(rho_a * np.asarray(x), x) if np.ndim(x) else max(rho_a * x, x)


def _leaky_slope(x: float, rho_a: float) -> float:
    # subgradient at the kink is the leaky branch
    return 1.0 if x > 0 else rho_a


@dataclass(frozen=True, eq=False)
class _Context:
    params: ChainParams
    space: StateSpace
    M: object
    layout: BoundLayout
    f2_sg: np.ndarray
    fg_interior: np.ndarray


@lru_cache(maxsize=32)
def _context(params: ChainParams) -> _Context:
    space = build_state_space(params)
    layout = BoundLayout.for_params(params)
    return _Context(
        params,
        space,
        space.base_matrix(params),
        layout,
        space.f[layout.sg].astype(float) ** 2,
        space.fg[layout.interior],
    )


def _evaluate(pi, phi, params: ChainParams, config: OptimConfig, want_grad: bool):
    ctx = _context(params)
    lay = ctx.layout
    F, G, N = params.F, params.G, params.N
    pi = np.asarray(pi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    sync_w = 1.0 if config.include_sync_state else 0.0

    ell_raw = float(np.dot(phi[1:], 1.0 - pi[1:])) + sync_w * phi[SYNC]
    ell = min(max(ell_raw, 0.0), 1.0)
    lam = ell ** (N - 1)
    q = pi * lam
    q[SYNC] = 0.0

    # stationarity residual r = phi P - phi with P = diag(1-q) M + q e0^T
    r = ctx.M.T @ (phi * (1.0 - q))
    r[SYNC] += np.dot(phi, q)
    r -= phi
    c1 = float(np.dot(r, r))

    pf = pi[1:]
    over_pi, under_pi = pf > 1.0, pf < 0.0
    c2 = float(np.sum((pf[over_pi] - 1.0) ** 2) + np.sum(pf[under_pi] ** 2))
    total = float(phi.sum())
    c3 = float(np.square(total - 1.0))  # overflows to inf, not OverflowError
    over_phi, under_phi = phi > 1.0, phi < 0.0
    c4 = float(np.sum((phi[over_phi] - 1.0) ** 2) + np.sum(phi[under_phi] ** 2))
    c = (c1, c2, c3, c4)

    # bound J, on the nonnegative part of phi: the bound is linear in phi with
    # coefficients up to 1/q_floor**2, so negative mass would make U unbounded below
    clamped = False
    phi_j = np.maximum(phi, 0.0)
    J = float(np.dot(ctx.fg_interior, phi_j[lay.interior])) + float(np.dot(ctx.f2_sg, phi_j[lay.sg]))
    sf_mass = float(phi_j[lay.sf].sum()) if lay.sf.size else 0.0
    if lay.sf.size:
        k_min = int(np.argmin(q[lay.sf]))
        q_min = float(q[lay.sf][k_min])
        q_min_clamped = q_min < config.q_floor
        if q_min_clamped:
            q_min, clamped = config.q_floor, True
        J += G * sf_mass * (F + (1.0 - q_min) / q_min)
    q_fg = float(q[lay.corner])
    q_fg_clamped = q_fg < config.q_floor
    if q_fg_clamped:
        q_fg, clamped = config.q_floor, True
    J += float(phi_j[lay.corner]) * geometric_tail_fg(F, G, q_fg)

    slopes = [_leaky_slope(ci - ei, config.rho_a) for ci, ei in zip(c, config.eps)]
    penalty_terms = tuple(K * leaky_relu(ci - ei, config.rho_a) for K, ci, ei in zip(config.K, c, config.eps))
    load = N * float(np.dot(pi, phi))
    energy = 0.0
    energy_active = False
    if config.energy_penalty is not None and load > config.energy_penalty.load_cap:
        energy_active = True
        energy = config.energy_penalty.K_e * (load - config.energy_penalty.load_cap) ** 2
    U = J + sum(penalty_terms) + energy
    obj = Objective(U, J, c, penalty_terms, energy, ell, load, clamped)
    if not want_grad:
        return obj, None, None

    w1, w2, w3, w4 = (K * s for K, s in zip(config.K, slopes))
    Mr = ctx.M @ r

    g_phi = np.zeros_like(phi)
    g_phi[lay.interior] += ctx.fg_interior
    g_phi[lay.sg] += ctx.f2_sg
    g_q = np.zeros_like(phi)
    if lay.sf.size:
        g_phi[lay.sf] += G * (F + (1.0 - q_min) / q_min)
        if not q_min_clamped:
            g_q[lay.sf[k_min]] += -G * sf_mass / q_min**2
    x = (1.0 - q_fg) / q_fg
    g_phi[lay.corner] += geometric_tail_fg(F, G, q_fg)
    if not q_fg_clamped:
        g_q[lay.corner] += -phi_j[lay.corner] * (F + G + 1.0 + 4.0 * x) / q_fg**2
    g_phi[phi < 0.0] = 0.0

    g_phi += w1 * 2.0 * ((1.0 - q) * Mr + q * r[SYNC] - r)
    g_q += w1 * 2.0 * phi * (r[SYNC] - Mr)
    g_phi += w3 * 2.0 * (total - 1.0)
    g_phi[over_phi] += w4 * 2.0 * (phi[over_phi] - 1.0)
    g_phi[under_phi] += w4 * 2.0 * phi[under_phi]

    g_pi = g_q * lam
    g_pi_free = g_pi[1:]
    g_pi_free[over_pi] += w2 * 2.0 * (pf[over_pi] - 1.0)
    g_pi_free[under_pi] += w2 * 2.0 * pf[under_pi]

    if energy_active:
        coef = config.energy_penalty.K_e * 2.0 * (load - config.energy_penalty.load_cap) * N
        g_pi += coef * phi
        g_phi += coef * pi

    # chain rule through ell (blocked when the clamp is active)
    if N > 1 and 0.0 <= ell_raw <= 1.0:
        g_ell = float(np.dot(g_q, pi)) * (N - 1) * ell ** (N - 2)
        g_pi[1:] -= g_ell * phi[1:]
        g_phi[1:] += g_ell * (1.0 - pi[1:])
        g_phi[SYNC] += g_ell * sync_w

    g_pi[SYNC] = 0.0
    return obj, g_pi, g_phi


def penalties(pi, phi, params: ChainParams, include_sync_state: bool = True) -> tuple:
    """Constraint violations ``(c1, c2, c3, c4)``.

    ``c1`` is the squared stationarity residual under the kernel implied by
    ``(pi, phi)``; ``c2``/``c4`` are elementwise box violations of ``pi``
    (free entries) and ``phi``; ``c3`` is the squared normalization error.
    """
    config = OptimConfig(include_sync_state=include_sync_state)
    obj, _, _ = _evaluate(pi, phi, params, config, want_grad=False)
    return obj.c


def objective(pi, phi, params: ChainParams, config: OptimConfig = OptimConfig()) -> Objective:
    """Penalized objective ``U = J + sum K_i rho(c_i - eps_i)`` (+ optional energy term)."""
    obj, _, _ = _evaluate(pi, phi, params, config, want_grad=False)
    return obj


def _fd_gradient(pi, phi, params, config, rel_step=1e-6):
    pi = np.array(pi, dtype=float)
    phi = np.array(phi, dtype=float)

    def U(a, b):
        return _evaluate(a, b, params, config, want_grad=False)[0].U

    g_pi = np.zeros_like(pi)
    g_phi = np.zeros_like(phi)
    for vec, out, skip in ((pi, g_pi, SYNC), (phi, g_phi, None)):
        for i in range(len(vec)):
            if i == skip:
                continue
            h = rel_step * max(abs(vec[i]), 1.0)
            old = vec[i]
            vec[i] = old + h
            up = U(pi, phi)
            vec[i] = old - h
            down = U(pi, phi)
            vec[i] = old
            out[i] = (up - down) / (2.0 * h)
    return g_pi, g_phi


def gradient(pi, phi, params: ChainParams, config: OptimConfig = OptimConfig()):
    """Gradient of ``U`` w.r.t. the free policy entries and every ``phi`` entry.

    The policy gradient is returned full length with a zero at ``(0, 0)``.
    Raises :class:`OptimizationError` naming the offending states if any
    entry is not finite.
    """
    if config.grad_mode == "finite_difference":
        g_pi, g_phi = _fd_gradient(pi, phi, params, config)
    else:
        _, g_pi, g_phi = _evaluate(pi, phi, params, config, want_grad=True)
    bad = np.flatnonzero(~np.isfinite(g_pi) | ~np.isfinite(g_phi))
    if bad.size:
        space = build_state_space(params)
        states = [space.states[i] for i in bad]
        raise OptimizationError(f"non-finite gradient at states {states[:10]}", states=states)
    return g_pi, g_phi


def deployable(pi) -> np.ndarray:
    out = np.clip(np.asarray(pi, dtype=float), 0.0, 1.0)
    out[SYNC] = 0.0
    return out


def descend(
    init_pi,
    init_phi,
    params: ChainParams,
    config: OptimConfig = OptimConfig(),
    record_every: int = 1,
    callback=None,
    callback_every: int = 0,
) -> OptimTrace:
    """Normalized gradient descent on ``U`` (separate unit-norm steps for ``pi`` and ``phi``).

    Stops after ``config.max_steps`` steps, or early when both gradients
    vanish. The reported policy is clipped to ``[0, 1]`` with ``pi(0,0) = 0``;
    the unclipped iterate is kept in ``raw_pi``.

    If given, ``callback(steps_done, pi, phi)`` is called every
    ``callback_every`` steps with copies of the current iterate.
    """
    pi = np.array(init_pi, dtype=float)
    phi = np.array(init_phi, dtype=float)
    space = build_state_space(params)
    if pi.shape != (len(space),) or phi.shape != (len(space),):
        raise ValueError("initial policy / distribution do not match the state space")
    if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(phi))):
        raise ValueError("initial iterate must be finite")
    pi[SYNC] = 0.0

    rows = []
    converged, reason = False, "max_steps"

    def trace(final_pi, final_phi):
        arr = np.array(rows, dtype=float).reshape(-1, 8)
        return OptimTrace(
            step=arr[:, 0].astype(np.int64),
            U=arr[:, 1],
            J=arr[:, 2],
            c=arr[:, 3:7],
            ell=arr[:, 7],
            raw_pi=final_pi.copy(),
            raw_phi=final_phi.copy(),
            policy=deployable(final_pi),
            converged=converged,
            reason=reason,
        )

    for k in range(config.max_steps):
        if config.grad_mode == "analytic":
            obj, g_pi, g_phi = _evaluate(pi, phi, params, config, want_grad=True)
        else:
            obj = _evaluate(pi, phi, params, config, want_grad=False)[0]
            g_pi, g_phi = _fd_gradient(pi, phi, params, config)
        if k % record_every == 0 or k == config.max_steps - 1:
            rows.append((k, obj.U, obj.J, *obj.c, obj.ell))
        if not math.isfinite(obj.U):
            reason = "non-finite objective"
            raise OptimizationError(f"objective became non-finite at step {k}", trace(pi, phi))
        bad = np.flatnonzero(~np.isfinite(g_pi) | ~np.isfinite(g_phi))
        if bad.size:
            reason = "non-finite gradient"
            states = [space.states[i] for i in bad]
            raise OptimizationError(f"non-finite gradient at step {k}, states {states[:10]}", trace(pi, phi), states)

        n_pi = float(np.linalg.norm(g_pi[1:]))
        n_phi = float(np.linalg.norm(g_phi))
        if n_pi == 0.0 and n_phi == 0.0:
            converged, reason = True, "zero gradient"
            break
        if n_pi > 0.0:
            pi[1:] -= config.alpha_pi * g_pi[1:] / n_pi
        if n_phi > 0.0:
            phi -= config.alpha_phi * g_phi / n_phi
        if callback is not None and callback_every > 0 and (k + 1) % callback_every == 0:
            callback(k + 1, pi.copy(), phi.copy())

    return trace(pi, phi)


def threshold_policy(tau: float, p: float, space: StateSpace) -> np.ndarray:
    """Transmit with probability ``p`` once ``f * g >= tau``, never below."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    pi = np.where(space.fg >= tau, p, 0.0)
    pi[SYNC] = 0.0
    return pi


def seed_init(space: StateSpace, params: ChainParams, target_load: float = 0.9):
    """Starting point ``phi ~ 1/(f g)``, ``pi ~ f g`` scaled to a network load of ``target_load``."""
    fg = space.fg
    weights = np.ones(len(space))
    weights[1:] = 1.0 / fg[1:]
    phi = weights / weights.sum()
    scale = target_load / (params.N * float(np.dot(fg, phi)))
    pi = np.clip(scale * fg, 0.0, 1.0)
    pi[SYNC] = 0.0
    return pi, phi


def default_plateau(N: int) -> float:
    """``5/N``, capped at 1/2: with ``p = 1`` two sensors above threshold collide forever."""
    return min(0.5, 5.0 / N)


def calibrate_tau(params: ChainParams, config: OptimConfig = OptimConfig(), record_every: int = 1):
    """Preliminary descent from :func:`seed_init`; its mean truncated AoII becomes ``tau``.

    Returns ``(ThresholdInit, OptimTrace)``.
    """
    space = build_state_space(params)
    pi0, phi0 = seed_init(space, params)
    trace = descend(pi0, phi0, params, config, record_every=record_every)
    phi, _ = stationary_dist(trace.policy, params, include_sync_state=config.include_sync_state)
    tau = truncated_aoii(phi, space)
    logger.info("calibrated tau=%.3f for %s", tau, params)
    return ThresholdInit(tau, default_plateau(params.N)), trace


def scale_tau(tau_ref: float, p_t_ref: float, p_t_new: float) -> float:
    """Carry a threshold over to another transition probability (``tau ~ sqrt(p_t)``)."""
    for p in (p_t_ref, p_t_new):
        if not 0.0 < p < 0.5:
            raise ValueError(f"p_t must lie in (0, 0.5), got {p}")
    return tau_ref * math.sqrt(p_t_new / p_t_ref)
