"""Closed-form upper bound on the untruncated average AoII.

The truncated chain underestimates the AoII in the boundary states. The bound
replaces the boundary contributions with worst cases:

* states ``(f, G)`` with ``f < F`` pay ``f**2`` (the error can never exceed
  the age off the age boundary);
* states ``(F, g)`` with ``g < G`` pay ``G * (F + mean extra age)`` with the
  sojourn bounded by a geometric law at the smallest success probability;
* the corner ``(F, G)`` pays the geometric mean of ``(F + i)(G + i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import ChainParams, build_state_space, collision_term, success_prob


@dataclass(frozen=True)
class BoundBreakdown:
    interior: float
    sg_term: float
    sf_term: float
    corner_term: float
    total: float
    clamped: bool = False


def geometric_tail_fg(F: int, G: int, q: float) -> float:
    """``sum_{i>=0} q (1-q)**i (F+i)(G+i)`` in closed form.

    With ``x = (1-q)/q`` the geometric count ``i`` has ``E[i] = x`` and
    ``E[i**2] = x + 2 x**2``, hence ``FG + x (F + G + 1 + 2x)``.
    """
    if not q > 0.0:
        raise ValueError(f"q must be positive, got {q}")
    x = (1.0 - q) / q
    return F * G + x * (F + G + 1.0 + 2.0 * x)


@dataclass(frozen=True, eq=False)
class BoundLayout:
    """Index sets of the bound's state classes for one ``(F, G)``."""

    interior: np.ndarray  # f < F, g < G
    sg: np.ndarray  # (f, G), f < F
    sf: np.ndarray  # (F, g), g < G, ordered by g
    corner: int  # (F, G)

    @classmethod
    def for_params(cls, params: ChainParams) -> BoundLayout:
        space = build_state_space(params)
        f, g = space.f, space.g
        F, G = params.F, params.G
        interior = np.flatnonzero((f >= 1) & (f < F) & (g >= 1) & (g < G))
        sg = np.flatnonzero((f < F) & (g == G))
        sf = np.flatnonzero((f == F) & (g < G))
        return cls(interior, sg, sf, space.index[(F, G)])


def bound_terms(phi, q, params: ChainParams, q_floor: float = 1e-12) -> BoundBreakdown:
    """Evaluate the bound for a given ``phi`` and per-state success vector ``q``."""
    space = build_state_space(params)
    lay = BoundLayout.for_params(params)
    phi = np.asarray(phi, dtype=float)
    q = np.asarray(q, dtype=float)
    F, G = params.F, params.G
    clamped = False

    interior = float(np.dot(space.fg[lay.interior], phi[lay.interior]))
    sg_term = float(np.dot(space.f[lay.sg].astype(float) ** 2, phi[lay.sg]))

    sf_term = 0.0
    if lay.sf.size:
        q_min = float(q[lay.sf].min())
        if q_min < q_floor:
            q_min, clamped = q_floor, True
        sf_term = G * float(phi[lay.sf].sum()) * (F + (1.0 - q_min) / q_min)

    q_fg = float(q[lay.corner])
    if q_fg < q_floor:
        q_fg, clamped = q_floor, True
    corner_term = float(phi[lay.corner]) * geometric_tail_fg(F, G, q_fg)

    total = interior + sg_term + sf_term + corner_term
    return BoundBreakdown(interior, sg_term, sf_term, corner_term, total, clamped)


def bound(pi, phi, params: ChainParams, q_floor: float = 1e-12, include_sync_state: bool = True) -> BoundBreakdown:
    """Upper bound ``J(pi, phi)`` on the average AoII.

    ``phi`` is used as given, so the bound can be evaluated at optimizer
    iterates that are not exactly stationary. Success probabilities are
    derived from ``(pi, phi)`` through the collision term.
    """
    ell = collision_term(pi, phi, include_sync_state)
    q = success_prob(pi, ell, params)
    return bound_terms(phi, q, params, q_floor)
