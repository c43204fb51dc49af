"""Learning the proxy-cost weights beta by finite-difference gradient descent
on J~(beta) = J_r(g^clc(beta)), plus the closed-form weight prescriptions."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .clc_dp import BetaVector
from .coupling import ModelSpec, execute_clc, execute_clc_exact
from .errors import DivergenceError, InvalidInputError, ProbeError
from .model import CostSchedule, RealSystemOracle

Evaluator = Callable[[BetaVector], "tuple[float, int]"]


def theorem2_beta(cost: CostSchedule, eps: float) -> BetaVector:
    """beta_t = -Q_t + eps for t = 1..T. Meant for R_t = 0, B = B_hat."""
    if not eps > 0:
        raise InvalidInputError(f"epsilon must be positive, got {eps}")
    return BetaVector(tuple(-q + eps for q in cost.q[1:]))


def terminal_beta(cost: CostSchedule) -> float:
    return -cost.q[-1]


def _probe(evaluator, beta, probe):
    try:
        j, n = evaluator(BetaVector(tuple(beta)))
    except Exception as exc:
        raise ProbeError(probe, tuple(beta), exc) from exc
    return float(j), int(n)


def _fd(beta, delta, evaluator, fix_terminal):
    b = np.asarray(list(beta), dtype=np.float64)
    j0, episodes = _probe(evaluator, b, "base")
    grad = np.zeros(b.size)
    n_free = b.size - 1 if fix_terminal else b.size
    for t in range(n_free):
        bp = b.copy()
        bp[t] += delta
        jt, n = _probe(evaluator, bp, t)
        episodes += n
        grad[t] = (jt - j0) / delta
    return grad, episodes, j0


def fd_gradient(beta, delta: float, evaluator: Evaluator, fix_terminal: bool = False):
    """Forward differences (J~(beta + delta e_t) - J~(beta)) / delta.

    Returns (gradient, episodes). With ``fix_terminal`` the last component
    is not probed and reported as 0.
    """
    if not delta > 0:
        raise InvalidInputError(f"delta must be positive, got {delta}")
    grad, episodes, _ = _fd(beta, delta, evaluator, fix_terminal)
    return grad, episodes


@dataclass
class BetaLearnConfig:
    beta_init: tuple
    step_size: float = 0.8
    schedule: str = "constant"  # or "diminishing": alpha / (1 + k / kappa)
    kappa: float = 10.0
    fd_delta: float = 0.2
    max_iters: int = 25
    convergence_tol: float = 1e-4
    fix_terminal: bool = True
    divergence_factor: float = 100.0

    def __post_init__(self):
        self.beta_init = tuple(float(v) for v in self.beta_init)
        if not self.beta_init:
            raise InvalidInputError("beta_init must be non-empty")
        if self.step_size < 0:
            raise InvalidInputError("step_size must be nonnegative")
        if self.schedule not in ("constant", "diminishing"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if not self.kappa > 0:
            raise InvalidInputError("kappa must be positive")
        if not self.fd_delta > 0:
            raise InvalidInputError("fd_delta must be positive")
        if self.max_iters < 0:
            raise InvalidInputError("max_iters must be nonnegative")
        if not self.convergence_tol > 0:
            raise InvalidInputError("convergence_tol must be positive")
        if not self.divergence_factor > 1:
            raise InvalidInputError("divergence_factor must exceed 1")

    def alpha(self, k: int) -> float:
        if self.schedule == "constant":
            return self.step_size
        return self.step_size / (1.0 + k / self.kappa)


@dataclass
class BetaTrace:
    iterates: list = field(default_factory=list)  # (k, beta tuple, J~, episodes_cumulative)
    status: str = "running"

    @property
    def best(self):
        """Iterate with the smallest observed J~ (earliest on ties)."""
        return min(self.iterates, key=lambda it: it[2])

    @property
    def episodes(self) -> int:
        return self.iterates[-1][3] if self.iterates else 0

    def betas(self) -> np.ndarray:
        return np.array([it[1] for it in self.iterates])

    def to_csv(self, path):
        T = len(self.iterates[0][1]) if self.iterates else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"beta_{t + 1}" for t in range(T)] + ["J_tilde", "episodes_cumulative"])
            for k, beta, j, n in self.iterates:
                w.writerow([k] + [f"{v:.17g}" for v in beta] + [f"{j:.17g}", n])


def learn_beta(config: BetaLearnConfig, evaluator: Evaluator, *, raise_on_divergence=False) -> BetaTrace:
    """beta <- beta - alpha_k * fd_gradient, recording J~(beta_k) each iteration.

    Stops after ``max_iters`` updates, when successive iterates differ by
    less than ``convergence_tol`` in max-norm, or when J~ exceeds
    ``divergence_factor`` times its initial value (status "diverged"; with
    ``raise_on_divergence`` a DivergenceError is raised instead). With
    ``fix_terminal`` the last component of ``beta_init`` is never changed,
    so it should be set to terminal_beta(cost).
    """
    beta = np.array(config.beta_init)
    trace = BetaTrace()
    episodes = 0
    j_init = None
    last_step = np.inf
    for k in range(config.max_iters + 1):
        if k == config.max_iters or last_step < config.convergence_tol:
            j, n = _probe(evaluator, beta, "base")
            episodes += n
            trace.iterates.append((k, tuple(float(v) for v in beta), j, episodes))
            trace.status = "converged" if last_step < config.convergence_tol else "max_iters"
            break
        grad, n, j = _fd(beta, config.fd_delta, evaluator, config.fix_terminal)
        episodes += n
        trace.iterates.append((k, tuple(float(v) for v in beta), j, episodes))
        if j_init is None:
            j_init = j
        elif j > config.divergence_factor * abs(j_init) or not np.isfinite(j):
            trace.status = "diverged"
            if raise_on_divergence:
                raise DivergenceError(
                    f"J~ = {j:.6g} exceeds {config.divergence_factor:g} x initial {j_init:.6g}",
                    trace.best[1],
                )
            break
        new = beta - config.alpha(k) * grad
        if not np.all(np.isfinite(new)):
            trace.status = "diverged"
            if raise_on_divergence:
                raise DivergenceError("non-finite beta iterate", trace.best[1])
            break
        last_step = float(np.max(np.abs(new - beta)))
        beta = new
    return trace


def clc_evaluator(model: ModelSpec, oracle: RealSystemOracle, **kw) -> Evaluator:
    """J~ through the grid CLC (execute_clc); extra keywords are passed on."""

    def evaluate(beta):
        res = execute_clc(beta, model, oracle, **kw)
        return res.Jr_value, res.episodes_used

    return evaluate


def exact_evaluator(model: ModelSpec, oracle: RealSystemOracle) -> Evaluator:
    """J~ through the grid-free CLC (execute_clc_exact)."""

    def evaluate(beta):
        res = execute_clc_exact(beta, model, oracle)
        return res.Jr_value, res.episodes_used

    return evaluate
