"""Invariant suites run by ``aoii-aloha check``.

Each check draws its own seeded instances and returns a :class:`CheckResult`;
none of them raise on failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import breadth_first_order

from .bound import bound, geometric_tail_fg
from .chain import ChainParams, build_kernel, build_state_space, stationary_dist, success_prob, truncated_aoii
from .optimizer import OptimConfig, gradient, penalties
from .simulator import SimConfig, TablePolicy, run


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _random_instance(rng, F_max=10, square=False):
    F = int(rng.integers(1, F_max + 1))
    G = F if square else int(rng.integers(1, F + 1))
    params = ChainParams(float(rng.uniform(0.01, 0.49)), F, G, int(rng.integers(1, 50)))
    space = build_state_space(params)
    pi = rng.uniform(0, 1, len(space))
    pi[0] = 0.0
    return params, space, pi


def kernel_rows(n=200, seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, widest = 0.0, 0
    for _ in range(n):
        params, space, pi = _random_instance(rng)
        P = build_kernel(pi, success_prob(pi, float(rng.uniform(0, 1)), params), params).matrix
        worst = max(worst, float(np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1.0))))
        widest = max(widest, int(np.max(np.diff(P.indptr))))
    return CheckResult("kernel rows", worst <= 1e-12 and widest <= 4,
                       f"{n} kernels, max |row sum - 1| = {worst:.1e}, max entries per row = {widest}")


def error_below_age(n=50, seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        params, space, pi = _random_instance(rng)
        P = build_kernel(pi, success_prob(pi, float(rng.uniform(0.1, 1)), params), params).matrix
        reach = breadth_first_order(P, 0, directed=True, return_predecessors=False)
        f, g = space.f[reach], space.g[reach]
        bad += int(np.any((f < params.F) & (g > f)))
    return CheckResult("reachable states have g <= f", bad == 0, f"{n} instances, {bad} violations")


def bound_dominance(n=100, seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        F = int(rng.integers(3, 9))
        params = ChainParams(float(rng.uniform(0.02, 0.45)), F, F, int(rng.integers(1, 40)))
        space = build_state_space(params)
        pi = rng.uniform(0, 1, len(space))
        pi[0] = 0.0
        phi, _ = stationary_dist(pi, params)
        worst = min(worst, bound(pi, phi, params).total - truncated_aoii(phi, space))
    return CheckResult("bound dominates truncated AoII", worst >= -1e-9, f"{n} policies, min(J - E[fg]) = {worst:.3g}")


def tail_closed_form(seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        F, G = (int(v) for v in rng.integers(1, 51, 2))
        q = 0.05 * int(rng.integers(1, 21))
        i = np.arange(4000)
        terms = q * (1 - q) ** i * (F + i) * (G + i)
        series = float(np.sum(terms[::-1]))
        worst = max(worst, abs(geometric_tail_fg(F, G, q) - series) / series)
    return CheckResult("geometric tail closed form", worst <= 1e-10, f"200 cells, max rel err = {worst:.1e}")


def gradient_check(n=20, seed=4) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = ChainParams(0.25, 5, 5, 3)
    space = build_state_space(params)
    cfg = OptimConfig()
    fd = OptimConfig(grad_mode="finite_difference")
    worst, done = 0.0, 0
    while done < n:
        pi = rng.uniform(0.05, 0.95, len(space))
        pi[0] = 0.0
        phi = rng.uniform(0.2, 1.0, len(space))
        phi /= phi.sum() * rng.uniform(0.9, 1.1)
        c = penalties(pi, phi, params)
        if abs(c[0] - cfg.eps[0]) < 1e-6 or abs(c[2] - cfg.eps[2]) < 1e-8:
            continue  # too close to a kink
        a = np.concatenate(gradient(pi, phi, params, cfg))
        b = np.concatenate(gradient(pi, phi, params, fd))
        worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
        done += 1
    return CheckResult("analytic gradient", worst <= 1e-4, f"{n} points, max rel err vs finite differences = {worst:.1e}")


def single_sensor_oracle(horizon=1_000_000, seed=5) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = ChainParams(0.25, 5, 5, 1)
    space = build_state_space(params)
    pi = rng.uniform(0, 1, len(space))
    pi[0] = 0.0
    phi, _ = stationary_dist(pi, params)
    rep = run(SimConfig(params, TablePolicy.from_vector(pi, space), horizon, seed))
    tv = 0.5 * float(np.abs(rep.occupancy_dist(space) - phi).sum())
    rel = abs(rep.avg_truncated_aoii / truncated_aoii(phi, space) - 1.0)
    return CheckResult("N=1 simulator vs chain", tv <= 0.02 and rel <= 0.03,
                       f"{horizon} slots, TV = {tv:.4f}, truncated AoII rel err = {rel:.4f}")


def run_all(quick=False):
    scale = 4 if quick else 1
    return [
        kernel_rows(200 // scale),
        error_below_age(50 // scale),
        bound_dominance(100 // scale),
        tail_closed_form(),
        gradient_check(20 // scale),
        single_sensor_oracle(1_000_000 // scale),
    ]
