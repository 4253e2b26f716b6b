"""Truncated (age, error) Markov chain of a single sensor under slotted ALOHA.

A state is a pair ``(f, g)``: ``f`` counts slots since the observed process
last matched the value known at the base station, ``g`` is the absolute
error. Both are capped at ``F`` and ``G``. Every state with ``g = 0`` is
collapsed into ``(0, 0)``.

Policies and distributions are plain float arrays indexed by a
:class:`StateSpace`; index 0 is always ``(0, 0)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

SYNC = 0  # index of (0, 0)


class ConvergenceError(RuntimeError):
    """Raised when the self-consistent stationary solve does not converge."""

    def __init__(self, message, residual, ell_gap):
        super().__init__(f"{message} (residual={residual:.3e}, ell gap={ell_gap:.3e})")
        self.residual = residual
        self.ell_gap = ell_gap


@dataclass(frozen=True)
class ChainParams:
    """Random-walk and truncation parameters shared by all sensors."""

    p_t: float
    F: int
    G: int
    N: int

    def __post_init__(self):
        if not 0.0 < self.p_t < 0.5:
            raise ValueError(f"p_t must lie in (0, 0.5), got {self.p_t}")
        for name in ("F", "G", "N"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if self.G > self.F:
            raise ValueError(f"need F >= G, got F={self.F}, G={self.G}")

    @property
    def p_r(self) -> float:
        return 1.0 - 2.0 * self.p_t


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Ordered truncated state space, row-major in f then g.

    Besides the ``(f, g) -> index`` map, the space stores for each state the
    three random-walk successors used by the kernel: ``up`` (error grows),
    ``down`` (error shrinks, which is ``(0, 0)`` from ``g = 1``) and ``stay``.
    For ``(0, 0)`` both ``up`` and ``down`` point to ``(1, 1)``.
    """

    F: int
    G: int
    states: tuple = field(repr=False)
    index: dict = field(repr=False)

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    @cached_property
    def f(self) -> np.ndarray:
        return np.array([s[0] for s in self.states], dtype=np.int64)

    @cached_property
    def g(self) -> np.ndarray:
        return np.array([s[1] for s in self.states], dtype=np.int64)

    @cached_property
    def fg(self) -> np.ndarray:
        return (self.f * self.g).astype(float)

    @cached_property
    def successors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        up = np.empty(len(self), dtype=np.int64)
        down = np.empty(len(self), dtype=np.int64)
        stay = np.empty(len(self), dtype=np.int64)
        up[SYNC] = down[SYNC] = self.index[(1, 1)]
        stay[SYNC] = SYNC
        F, G = self.F, self.G
        for i, (f, g) in enumerate(self.states[1:], start=1):
            nf = min(f + 1, F)
            up[i] = self.index[(nf, min(g + 1, G))]
            down[i] = self.index[(nf, g - 1)] if g > 1 else SYNC
            stay[i] = self.index[(nf, g)]
        return up, down, stay

    @cached_property
    def table_index(self) -> np.ndarray:
        """``(F+1, G+1)`` lookup from truncated coordinates to state index (-1 if invalid)."""
        table = np.full((self.F + 1, self.G + 1), -1, dtype=np.int64)
        for i, (f, g) in enumerate(self.states):
            table[f, g] = i
        return table

    def base_matrix(self, params: ChainParams) -> sp.csr_matrix:
        """Random-walk part of the kernel (no transmissions), duplicates merged."""
        up, down, stay = self.successors
        n = len(self)
        rows = np.concatenate([np.arange(n)] * 3)
        cols = np.concatenate([up, down, stay])
        vals = np.concatenate([np.full(n, params.p_t), np.full(n, params.p_t), np.full(n, params.p_r)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def to_grid(self, values, fill=np.nan) -> np.ndarray:
        """Scatter a state-indexed vector into an ``(F+1, G+1)`` grid."""
        grid = np.full((self.F + 1, self.G + 1), fill, dtype=float)
        grid[self.f, self.g] = values
        return grid

    def from_grid(self, grid) -> np.ndarray:
        return np.asarray(grid, dtype=float)[self.f, self.g]


_SPACE_CACHE: dict[tuple[int, int], StateSpace] = {}


def build_state_space(params: ChainParams) -> StateSpace:
    """Enumerate ``{(0,0)} U {(f,g): 1 <= f <= F, 1 <= g <= min(f, G)}``."""
    key = (params.F, params.G)
    if key not in _SPACE_CACHE:
        states = [(0, 0)]
        for f in range(1, params.F + 1):
            states.extend((f, g) for g in range(1, min(f, params.G) + 1))
        states = tuple(states)
        _SPACE_CACHE[key] = StateSpace(params.F, params.G, states, {s: i for i, s in enumerate(states)})
    return _SPACE_CACHE[key]


def state_space_size(F: int, G: int) -> int:
    return 1 + sum(min(f, G) for f in range(1, F + 1))


def validate_policy(pi, space: StateSpace) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (len(space),):
        raise ValueError(f"policy has shape {pi.shape}, state space has {len(space)} states")
    if not np.all(np.isfinite(pi)) or pi.min() < 0.0 or pi.max() > 1.0:
        raise ValueError("policy entries must be finite and lie in [0, 1]")
    if pi[SYNC] != 0.0:
        raise ValueError("pi(0,0) must be 0")
    return pi


def collision_term(pi, phi, include_sync_state: bool = True) -> float:
    """Probability that a sensor in steady state stays silent.

    With ``include_sync_state=False`` the synced state ``(0, 0)`` is left out
    of the sum, which undercounts silent sensors.
    """
    pi = np.asarray(pi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if pi.shape != phi.shape:
        raise ValueError(f"policy and distribution index mismatch: {pi.shape} vs {phi.shape}")
    ell = float(np.dot(phi[1:], 1.0 - pi[1:]))
    if include_sync_state:
        ell += float(phi[SYNC])
    return min(max(ell, 0.0), 1.0)


def success_prob(pi, ell: float, params: ChainParams) -> np.ndarray:
    """Per-state delivery probability ``pi * ell**(N-1)``."""
    if not 0.0 <= ell <= 1.0:
        raise ValueError(f"ell must lie in [0, 1], got {ell}")
    return np.asarray(pi, dtype=float) * ell ** (params.N - 1)


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Sparse row-stochastic kernel over a :class:`StateSpace`."""

    space: StateSpace
    matrix: sp.csr_matrix
    q: np.ndarray
    ell: float | None = None

    def row(self, state) -> dict:
        i = self.space.index[tuple(state)]
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        cols = self.matrix.indices[lo:hi]
        vals = self.matrix.data[lo:hi]
        return {self.space.states[c]: float(v) for c, v in zip(cols, vals)}

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def _kernel_matrix(base: sp.csr_matrix, q: np.ndarray) -> sp.csr_matrix:
    n = base.shape[0]
    moves = sp.diags(1.0 - q) @ base
    resets = sp.csr_matrix((q, (np.arange(n), np.zeros(n, dtype=np.int64))), shape=(n, n))
    P = (moves + resets).tocsr()
    P.sum_duplicates()
    P.eliminate_zeros()
    return P


def build_kernel(pi, q, params: ChainParams, ell: float | None = None) -> TransitionKernel:
    """Transition kernel of the truncated chain for per-state success ``q``.

    From ``(f, g)`` the error moves up, down or stays with probabilities
    ``p_t, p_t, p_r`` scaled by ``1 - q``, and the chain resets to ``(0, 0)``
    with probability ``q``. A down move from ``g = 1`` is itself a reset.
    Targets that coincide after truncation are merged.
    """
    space = build_state_space(params)
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    if pi.shape != (len(space),) or q.shape != (len(space),):
        raise ValueError("policy / success vector do not match the state space")
    if pi[SYNC] != 0.0 or q[SYNC] != 0.0:
        raise ValueError("pi(0,0) must be 0: a synced sensor has nothing to send")
    P = _kernel_matrix(space.base_matrix(params), q)
    return TransitionKernel(space, P, q, ell)


def _solve_direct(P: sp.csr_matrix) -> np.ndarray:
    # Pin phi(0,0) = 1 and solve the remaining balance equations, then normalize.
    A = (P.T - sp.identity(P.shape[0], format="csr")).tocsc()[1:, 1:]
    b = -np.asarray(P[SYNC, 1:].todense()).ravel()
    phi = np.empty(P.shape[0])
    phi[SYNC] = 1.0
    phi[1:] = spla.spsolve(A, b)
    phi = np.clip(phi, 0.0, None)
    return phi / phi.sum()


def _solve_power(P: sp.csr_matrix, phi0: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    PT = P.T.tocsr()
    phi = phi0.copy()
    for _ in range(max_iter):
        nxt = PT @ phi
        nxt /= nxt.sum()
        if np.linalg.norm(nxt - phi) <= tol:
            return nxt
        phi = nxt
    return phi


def stationary_residual(phi, P: sp.csr_matrix) -> float:
    return float(np.linalg.norm(P.T @ phi - phi))


def stationary_dist(
    pi,
    params: ChainParams,
    tol: float = 1e-10,
    max_outer: int = 500,
    include_sync_state: bool = True,
    damping: float = 0.5,
    ell_tol: float = 1e-10,
    direct_max_states: int = 5000,
    max_power_iter: int = 200_000,
):
    """Self-consistent stationary distribution and collision term.

    Runs a damped fixed-point iteration on ``ell``; for each iterate the
    stationary distribution of the kernel with ``q = pi * ell**(N-1)`` is
    computed exactly (sparse direct solve) or by power iteration on large
    spaces.

    Returns
    -------
    phi : ndarray
        Stationary distribution, sums to one.
    ell : float
        Collision term evaluated at ``phi``.

    Raises
    ------
    ConvergenceError
        If the outer iteration does not settle within ``max_outer`` steps.
    """
    space = build_state_space(params)
    pi = validate_policy(pi, space)
    base = space.base_matrix(params)
    direct = len(space) <= direct_max_states

    phi = np.full(len(space), 1.0 / len(space))
    ell = 1.0
    residual = np.inf
    gap = np.inf
    for it in range(max_outer):
        P = _kernel_matrix(base, success_prob(pi, ell, params))
        phi = _solve_direct(P) if direct else _solve_power(P, phi, tol * 0.1, max_power_iter)
        ell_new = collision_term(pi, phi, include_sync_state)
        gap = abs(ell_new - ell)
        if gap <= ell_tol:
            P_new = _kernel_matrix(base, success_prob(pi, ell_new, params))
            residual = stationary_residual(phi, P_new)
            if residual <= tol:
                logger.debug("stationary_dist converged after %d outer steps", it + 1)
                return phi, ell_new
        ell = (1.0 - damping) * ell + damping * ell_new
    raise ConvergenceError(f"no self-consistent stationary point after {max_outer} outer steps", residual, gap)


def truncated_aoii(phi, space: StateSpace) -> float:
    """Stationary expectation of ``f * g`` on the truncated chain."""
    return float(np.dot(space.fg, phi))
