"""Model-free comparison methods: policy gradient and random search on a
constant feedback gain, and stage-indexed tabular Q-learning.

Every method talks to the real system only through a RealSystemOracle, and
greedy-policy evaluations are real episodes that show up in the ledger.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidInputError, OutOfRangeError
from .model import CostSchedule, RealSystemOracle, eval_Jr


@dataclass
class LearningCurve:
    method: str
    seed: int
    points: list = field(default_factory=list)  # (episodes, greedy J_r)
    final_gain: float | None = None
    tables: object = field(default=None, repr=False)

    def append(self, episodes: int, jr: float):
        if self.points and episodes <= self.points[-1][0]:
            raise InvalidInputError("learning-curve episodes must be strictly increasing")
        self.points.append((int(episodes), float(jr)))

    @property
    def episodes(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.int64)

    @property
    def costs(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def best_so_far(self) -> "LearningCurve":
        out = LearningCurve(self.method, self.seed)
        best = np.inf
        for n, j in self.points:
            best = min(best, j)
            out.points.append((n, best))
        return out

    def episodes_to_reach(self, target: float):
        """First episode count at which the greedy cost is <= target, else None."""
        for n, j in self.points:
            if j <= target:
                return n
        return None

    def rows(self):
        return [[self.method, self.seed, n, f"{j:.17g}"] for n, j in self.points]

    def to_csv(self, path):
        write_curves(path, [self])


def write_curves(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "episodes", "greedy_Jr"])
        for c in curves:
            w.writerows(c.rows())


def _gain_cost(oracle, cost, x0, k):
    traj = oracle.run_episode(x0, lambda t, x: k * x, cost.horizon)
    return eval_Jr(cost, traj)


# --------------------------------------------------------------------------
# policy gradient


@dataclass
class PGConfig:
    k_init: float = 0.0
    sigma: float = 0.1
    step_size: float = 0.01
    episodes_per_update: int = 10
    max_updates: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        if self.episodes_per_update < 1:
            raise InvalidInputError("episodes_per_update must be >= 1")
        if self.max_updates < 0:
            raise InvalidInputError("max_updates must be >= 0")


def run_pg(config: PGConfig, oracle: RealSystemOracle, cost: CostSchedule, x0: float) -> LearningCurve:
    """REINFORCE on U_t = K X_t + sigma eta_t with a running-mean baseline.

    g = mean over the batch of (J_r - b) * sum_t eta_t X_t / sigma, where b is
    the mean cost of all earlier episodes (the greedy start-up evaluation
    seeds it). One greedy episode follows each update.
    """
    rng = np.random.default_rng(config.seed)
    T = cost.horizon
    start = oracle.episodes
    curve = LearningCurve("pg", config.seed)
    k = float(config.k_init)
    j0 = _gain_cost(oracle, cost, x0, k)
    curve.append(oracle.episodes - start, j0)
    total, count = j0, 1
    sigma = config.sigma
    for _ in range(config.max_updates):
        baseline = total / count
        g = 0.0
        for _ in range(config.episodes_per_update):
            eta = rng.standard_normal(T)
            traj = oracle.run_episode(x0, lambda t, x: k * x + sigma * eta[t], T)
            j = eval_Jr(cost, traj)
            g += (j - baseline) * float(np.dot(eta, traj.states[:-1])) / sigma
            total += j
            count += 1
        k_new = k - config.step_size * g / config.episodes_per_update
        if not np.isfinite(k_new):
            raise DivergenceError("policy-gradient gain became non-finite", k)
        k = k_new
        jg = _gain_cost(oracle, cost, x0, k)
        if not np.isfinite(jg):
            raise DivergenceError("greedy cost became non-finite", k)
        curve.append(oracle.episodes - start, jg)
    curve.final_gain = k
    return curve


# --------------------------------------------------------------------------
# random search


@dataclass
class RSConfig:
    k_init: float = 0.0
    sigma: float = 0.1
    step_size: float = 0.02
    directions_per_update: int = 2
    max_updates: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        if self.directions_per_update < 1:
            raise InvalidInputError("directions_per_update must be >= 1")
        if self.max_updates < 0:
            raise InvalidInputError("max_updates must be >= 0")


def run_rs(config: RSConfig, oracle: RealSystemOracle, cost: CostSchedule, x0: float) -> LearningCurve:
    """Antithetic two-point random search on the gain:
    K <- K - step * mean[(J(K + sigma xi) - J(K - sigma xi)) / (2 sigma) * xi]."""
    rng = np.random.default_rng(config.seed)
    start = oracle.episodes
    curve = LearningCurve("rs", config.seed)
    k = float(config.k_init)
    j0 = _gain_cost(oracle, cost, x0, k)
    curve.append(oracle.episodes - start, j0)
    s = config.sigma
    for _ in range(config.max_updates):
        g = 0.0
        for _ in range(config.directions_per_update):
            xi = rng.standard_normal()
            while xi == 0.0:
                xi = rng.standard_normal()
            jp = _gain_cost(oracle, cost, x0, k + s * xi)
            jm = _gain_cost(oracle, cost, x0, k - s * xi)
            g += (jp - jm) / (2.0 * s) * xi
        k_new = k - config.step_size * g / config.directions_per_update
        if not np.isfinite(k_new):
            raise DivergenceError("random-search gain became non-finite", k)
        k = k_new
        jg = _gain_cost(oracle, cost, x0, k)
        if not np.isfinite(jg):
            raise DivergenceError("greedy cost became non-finite", k)
        curve.append(oracle.episodes - start, jg)
    curve.final_gain = k
    return curve


# --------------------------------------------------------------------------
# tabular Q-learning


@dataclass
class QLearnConfig:
    state_grid: tuple = (-7.0, 7.0, 57)  # (lo, hi, n)
    action_grid: tuple = (-1.5, 1.5, 13)
    a_step: float = 1.0
    b_step: float = 1.0
    explore_eps: float = 0.3
    max_episodes: int = 3000
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("state_grid", "action_grid"):
            lo, hi, n = getattr(self, name)
            if not (hi > lo and int(n) >= 2):
                raise InvalidInputError(f"{name} needs lo < hi and n >= 2")
            setattr(self, name, (float(lo), float(hi), int(n)))
        if not (self.a_step > 0 and self.b_step > 0):
            raise InvalidInputError("a_step and b_step must be positive")
        if not 0.0 <= self.explore_eps <= 1.0:
            raise InvalidInputError("explore_eps must lie in [0, 1]")
        if self.max_episodes < 0 or self.eval_every < 1:
            raise InvalidInputError("max_episodes must be >= 0 and eval_every >= 1")


class QTables:
    """Stage-indexed Q_t(x, u) on fixed grids with visit counts."""

    def __init__(self, config: QLearnConfig, cost: CostSchedule):
        self.x = np.linspace(*config.state_grid)
        self.u = np.linspace(*config.action_grid)
        self.cost = cost
        T = cost.horizon
        self.q = np.zeros((T, self.x.size, self.u.size))
        self.visits = np.zeros((T, self.x.size, self.u.size), dtype=np.int64)
        self.a_step = config.a_step
        self.b_step = config.b_step

    def snap(self, x: float) -> int:
        lo, hi = self.x[0], self.x[-1]
        dx = self.x[1] - self.x[0]
        if not (lo - dx <= x <= hi + dx):
            raise OutOfRangeError(f"real state {x:.6g} escaped the Q-learning grid [{lo}, {hi}]")
        return int(np.clip(np.rint((x - lo) / dx), 0, self.x.size - 1))

    def terminal(self, i: int) -> float:
        """Q_T(x) = Q_T x^2 at the grid state."""
        return self.cost.q[-1] * self.x[i] ** 2

    def target(self, t: int, x: float, j: int, i_next: int) -> float:
        c = self.cost.q[t] * x * x + self.cost.r[t] * self.u[j] ** 2
        if t == self.cost.horizon - 1:
            return c + self.terminal(i_next)
        return c + float(np.min(self.q[t + 1, i_next]))

    def update(self, t: int, i: int, j: int, target: float) -> float:
        m = self.visits[t, i, j]
        gamma = self.b_step / (self.a_step + m)
        self.q[t, i, j] = (1.0 - gamma) * self.q[t, i, j] + gamma * target
        self.visits[t, i, j] = m + 1
        return gamma

    def greedy(self, t: int, i: int) -> int:
        return int(np.argmin(self.q[t, i]))


def run_q(config: QLearnConfig, oracle: RealSystemOracle, cost: CostSchedule, x0: float,
          horizon: int | None = None, *, tables: QTables | None = None) -> LearningCurve:
    """Epsilon-greedy tabular Q-learning with gamma = b / (a + m).

    Real states are snapped to the nearest grid point; updates are applied
    in time order after each episode. The greedy policy is evaluated in an
    extra (counted) episode before learning and every ``eval_every``
    episodes.
    """
    T = cost.horizon if horizon is None else int(horizon)
    if T != cost.horizon:
        raise InvalidInputError(f"horizon {T} does not match the cost schedule ({cost.horizon})")
    rng = np.random.default_rng(config.seed)
    qt = tables if tables is not None else QTables(config, cost)
    start = oracle.episodes
    curve = LearningCurve("q", config.seed)

    def greedy_policy(t, x):
        return qt.u[qt.greedy(t, qt.snap(x))]

    def evaluate():
        traj = oracle.run_episode(x0, greedy_policy, T)
        curve.append(oracle.episodes - start, eval_Jr(cost, traj))

    evaluate()
    n_u = qt.u.size
    for ep in range(1, config.max_episodes + 1):
        picks = []

        def policy(t, x):
            i = qt.snap(x)
            if rng.random() < config.explore_eps:
                j = int(rng.integers(n_u))
            else:
                j = qt.greedy(t, i)
            picks.append((i, j))
            return qt.u[j]

        traj = oracle.run_episode(x0, policy, T)
        for t in range(T):
            i, j = picks[t]
            i_next = qt.snap(traj.states[t + 1])
            qt.update(t, i, j, qt.target(t, traj.states[t], j, i_next))
        if ep % config.eval_every == 0:
            evaluate()
    curve.tables = qt
    return curve
