"""Scalar LTI system data, rollouts and the real / proxy cost functionals."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class SystemInstance:
    """True dynamics (a_true, b_true), model dynamics (a_model, b_model),
    shared initial state and horizon."""

    a_true: float
    b_true: float
    a_model: float
    b_model: float
    x0: float
    horizon: int

    def __post_init__(self):
        if self.b_true == 0 or self.b_model == 0:
            raise InvalidInputError("b_true and b_model must be nonzero")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidInputError(f"horizon must be a positive integer, got {self.horizon}")


@dataclass(frozen=True)
class CostSchedule:
    """Stage weights q = (Q_0..Q_T) and r = (R_0..R_{T-1})."""

    q: tuple
    r: tuple

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        r = tuple(float(v) for v in self.r)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        if len(r) < 1 or len(q) != len(r) + 1:
            raise InvalidInputError(f"need len(q) == len(r) + 1 >= 2, got {len(q)} and {len(r)}")
        if any(v < 0 for v in q) or any(v < 0 for v in r):
            raise InvalidInputError("cost weights must be nonnegative")
        if not q[-1] > 0:
            raise InvalidInputError("terminal weight Q_T must be strictly positive")

    @property
    def horizon(self) -> int:
        return len(self.r)

    @classmethod
    def constant(cls, horizon, q=1.0, r=1.0, q0=None):
        qs = [q] * (horizon + 1)
        if q0 is not None:
            qs[0] = q0
        return cls(tuple(qs), (r,) * horizon)


@dataclass
class Trajectory:
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.states.shape[-1] != self.controls.shape[-1] + 1:
            raise InvalidInputError("states must have exactly one more entry than controls")

    @property
    def horizon(self) -> int:
        return self.controls.shape[-1]


class EpisodeLedger:
    """Thread-safe count of real-system trajectories."""

    def __init__(self):
        self._episodes = 0
        self._lock = threading.Lock()

    @property
    def episodes(self) -> int:
        return self._episodes

    def add(self, n: int = 1) -> int:
        if n < 0:
            raise InvalidInputError("ledger increments must be nonnegative")
        with self._lock:
            self._episodes += int(n)
            return self._episodes

    def __repr__(self):
        return f"EpisodeLedger(episodes={self._episodes})"


class RealSystemOracle:
    """Black-box access to the real system.

    Only ``step`` evaluations are possible; the parameters of the real
    dynamics are never exposed. Each full-horizon rollout counts as one
    episode in ``ledger``.
    """

    def __init__(self, step: Callable, ledger: EpisodeLedger | None = None):
        self._step = step
        self.ledger = ledger if ledger is not None else EpisodeLedger()

    @classmethod
    def from_instance(cls, instance: SystemInstance, ledger: EpisodeLedger | None = None):
        a, b = float(instance.a_true), float(instance.b_true)

        def step(x, u):
            return a * x + b * u

        return cls(step, ledger)

    @property
    def episodes(self) -> int:
        return self.ledger.episodes

    def rollout(self, x0: float, controls) -> np.ndarray:
        """Open-loop rollout(s).

        ``controls`` of shape (T,) gives one episode and returns T+1 states;
        shape (n, T) runs n episodes and returns an (n, T+1) array.
        """
        u = np.asarray(controls, dtype=np.float64)
        if u.ndim not in (1, 2) or u.shape[-1] < 1:
            raise InvalidInputError("controls must have shape (T,) or (n, T) with T >= 1")
        states = np.empty(u.shape[:-1] + (u.shape[-1] + 1,))
        states[..., 0] = x0
        for t in range(u.shape[-1]):
            states[..., t + 1] = self._step(states[..., t], u[..., t])
        self.ledger.add(1 if u.ndim == 1 else u.shape[0])
        return states

    def run_episode(self, x0: float, policy: Callable[[int, float], float], horizon: int) -> Trajectory:
        """Closed-loop episode: ``policy(t, x)`` sees the real state."""
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        xs = np.empty(horizon + 1)
        us = np.empty(horizon)
        xs[0] = x0
        for t in range(horizon):
            us[t] = policy(t, float(xs[t]))
            xs[t + 1] = self._step(xs[t], us[t])
        self.ledger.add(1)
        return Trajectory(xs, us)


def rollout(dynamics_pair, x0: float, controls: Sequence[float]) -> Trajectory:
    a, b = dynamics_pair
    u = np.asarray(controls, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise InvalidInputError("controls must be a non-empty 1-D sequence")
    xs = np.empty(u.size + 1)
    xs[0] = x0
    for t in range(u.size):
        xs[t + 1] = a * xs[t] + b * u[t]
    return Trajectory(xs, u)


def _check(cost: CostSchedule, traj: Trajectory):
    if traj.horizon != cost.horizon:
        raise InvalidInputError(f"trajectory horizon {traj.horizon} != cost horizon {cost.horizon}")


def eval_Jr(cost: CostSchedule, traj: Trajectory) -> float:
    """sum_t (Q_t x_t^2 + R_t u_t^2) + Q_T x_T^2"""
    _check(cost, traj)
    q = np.asarray(cost.q)
    r = np.asarray(cost.r)
    return float(np.sum(q * traj.states**2) + np.sum(r * traj.controls**2))


def eval_Jc(cost: CostSchedule, beta, xhat, traj: Trajectory) -> float:
    """Real cost of ``traj`` plus the mismatch penalties beta_{t+1} (x_{t+1} - xhat_{t+1})^2."""
    _check(cost, traj)
    beta = np.asarray(getattr(beta, "values", beta), dtype=np.float64)
    xhat = np.asarray(getattr(xhat, "points", xhat), dtype=np.float64)
    T = cost.horizon
    if beta.shape != (T,) or xhat.shape != (T,):
        raise InvalidInputError(f"beta and xhat must both have length {T}")
    return eval_Jr(cost, traj) + float(np.sum(beta * (traj.states[1:] - xhat) ** 2))
