"""Exact finite-horizon scalar LQR for known dynamics (ground-truth oracle)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCostError, InvalidInputError
from .model import CostSchedule, Trajectory


@dataclass(frozen=True)
class RiccatiSolution:
    gains: tuple  # K_0..K_{T-1}, u_t = K_t x_t
    value_coeffs: tuple  # P_0..P_T, V_t(x) = P_t x^2
    optimal_cost: float


def solve(a: float, b: float, cost: CostSchedule, x0: float) -> RiccatiSolution:
    """Backward Riccati recursion

        K_t = -P_{t+1} a b / (r_t + P_{t+1} b^2)
        P_t = q_t + P_{t+1} a^2 - (P_{t+1} a b)^2 / (r_t + P_{t+1} b^2)
    """
    if b == 0:
        raise InvalidInputError("b must be nonzero")
    T = cost.horizon
    P = [0.0] * (T + 1)
    K = [0.0] * T
    P[T] = cost.q[T]
    for t in range(T - 1, -1, -1):
        denom = cost.r[t] + P[t + 1] * b * b
        if denom == 0:
            raise DegenerateCostError(f"r_t + P_(t+1) b^2 vanishes at stage {t}")
        K[t] = -(P[t + 1] * a * b) / denom
        P[t] = cost.q[t] + P[t + 1] * a * a - (P[t + 1] * a * b) ** 2 / denom
    return RiccatiSolution(tuple(K), tuple(P), P[0] * x0 * x0)


def optimal_policy_controls(sol: RiccatiSolution, a: float, b: float, x0: float) -> Trajectory:
    T = len(sol.gains)
    xs = np.empty(T + 1)
    us = np.empty(T)
    xs[0] = x0
    for t in range(T):
        us[t] = sol.gains[t] * xs[t]
        xs[t + 1] = a * xs[t] + b * us[t]
    return Trajectory(xs, us)


def best_constant_gain(a: float, b: float, cost: CostSchedule, x0: float) -> tuple[float, float]:
    """Best time-invariant gain and its cost (reference for the PG / RS baselines)."""
    from scipy.optimize import minimize_scalar

    from .model import eval_Jr

    def J(k):
        return eval_Jr(cost, _closed_loop(a, b, k, x0, cost.horizon))

    k0 = solve(a, b, cost, x0).gains[0]
    res = minimize_scalar(J, bracket=(k0 - 1.0, k0, k0 + 1.0))
    return float(res.x), float(res.fun)


def _closed_loop(a, b, k, x0, T):
    xs = np.empty(T + 1)
    us = np.empty(T)
    xs[0] = x0
    for t in range(T):
        us[t] = k * xs[t]
        xs[t + 1] = a * xs[t] + b * us[t]
    return Trajectory(xs, us)
