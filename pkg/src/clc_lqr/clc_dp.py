"""Backward dynamic programming for the proxy (CLC) cost on discretized grids.

For every candidate real trajectory xhat_{1:T} on the candidate grid the
recursion

    V_T(x) = Q_T x^2
    V_t(x) = min_{u in U-grid} Q_t x^2 + R_t u^2 + beta_{t+1} (x' - xhat_{t+1})^2 + V_{t+1}(x'),
    x' = A x + B u

is solved on the model-state grid. Stage t only depends on the suffix
xhat_{t+1:T}, so value tables are shared between candidates with a common
suffix; stage t therefore has ``n_xhat ** (T - t)`` distinct tables.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit
from .errors import CapacityError, InvalidInputError, OutOfRangeError
from .model import CostSchedule

DEFAULT_CANDIDATE_BUDGET = 10**6
INTERPOLATIONS = ("linear", "quadratic")
OUTSIDE_RULES = ("exclude", "clamp")


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    u_min: float
    u_max: float
    xhat_min: float
    xhat_max: float
    n_x: int
    n_u: int
    n_xhat: int

    def __post_init__(self):
        for lo, hi, n, name in (
            (self.x_min, self.x_max, self.n_x, "x"),
            (self.u_min, self.u_max, self.n_u, "u"),
            (self.xhat_min, self.xhat_max, self.n_xhat, "xhat"),
        ):
            if not lo < hi:
                raise InvalidInputError(f"{name} grid needs min < max, got [{lo}, {hi}]")
            if int(n) != n or n < 2:
                raise InvalidInputError(f"{name} grid needs at least 2 points, got {n}")

    @classmethod
    def paper_default(cls):
        return cls(-2.0, 2.0, -3.0, 3.0, -2.0, 2.0, 81, 241, 81)

    @staticmethod
    def axis(lo, hi, n) -> np.ndarray:
        i = np.arange(n, dtype=np.float64)
        return lo + i * (hi - lo) / (n - 1)

    @property
    def x_grid(self):
        return self.axis(self.x_min, self.x_max, self.n_x)

    @property
    def u_grid(self):
        return self.axis(self.u_min, self.u_max, self.n_u)

    @property
    def xhat_grid(self):
        return self.axis(self.xhat_min, self.xhat_max, self.n_xhat)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def du(self):
        return (self.u_max - self.u_min) / (self.n_u - 1)

    @property
    def dxhat(self):
        return (self.xhat_max - self.xhat_min) / (self.n_xhat - 1)


@dataclass(frozen=True)
class BetaVector:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in np.ravel(self.values))
        if not vals:
            raise InvalidInputError("beta must have at least one entry")
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"beta entries must be finite, got {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def as_array(self):
        return np.array(self.values)


@dataclass(frozen=True)
class CandidateTrajectory:
    """Hypothesized real states xhat_1..xhat_T.

    ``index`` is the row-major position in the candidate grid, or None for
    an off-grid candidate produced by the coupling refinement.
    """

    points: tuple
    index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(float(v) for v in self.points))

    def __len__(self):
        return len(self.points)

    @property
    def on_grid(self):
        return self.index is not None


@dataclass
class PolicyTable:
    """Lookup table U_t(x; xhat_{1:T}) for a fixed model, cost, beta and grid.

    ``stage_index[t]`` has shape (n_xhat ** (T - t), n_x) and holds control-grid
    indices keyed by the suffix xhat_{t+1:T}; use :meth:`control_indices` for
    lookups by full candidate index.
    """

    a_model: float
    b_model: float
    cost: CostSchedule
    beta: BetaVector
    grids: GridSpec
    interpolation: str
    stage_index: list = field(repr=False)
    outside: str = "exclude"
    _prep: object = field(default=None, repr=False, compare=False)

    def stage_data(self):
        if self._prep is None:
            self._prep = _prepare(self.a_model, self.b_model, self.cost, self.grids, self.interpolation,
                                  self.outside)
        return self._prep

    @property
    def horizon(self):
        return len(self.stage_index)

    @property
    def n_candidates(self):
        return self.grids.n_xhat**self.horizon

    def candidate(self, index: int) -> CandidateTrajectory:
        digits = np.unravel_index(int(index), (self.grids.n_xhat,) * self.horizon)
        xh = self.grids.xhat_grid
        return CandidateTrajectory(tuple(xh[d] for d in digits), int(index))

    def candidate_index(self, points) -> int:
        """Index of the on-grid candidate whose entries match ``points``."""
        g = self.grids
        digits = []
        for p in points:
            d = int(round((p - g.xhat_min) / g.dxhat))
            if not 0 <= d < g.n_xhat or g.xhat_grid[d] != p:
                raise InvalidInputError(f"{p!r} is not a point of the candidate grid")
            digits.append(d)
        return int(np.ravel_multi_index(digits, (g.n_xhat,) * self.horizon))

    def control_indices(self, t, x_index, candidate_index):
        """Vectorized control-grid indices for stage t."""
        n_suffix = self.grids.n_xhat ** (self.horizon - t)
        return self.stage_index[t][np.asarray(candidate_index) % n_suffix, x_index]

    def dense(self) -> np.ndarray:
        """Controls as a (T, n_x, n_candidates) array."""
        T = self.horizon
        u = self.grids.u_grid
        cand = np.arange(self.n_candidates)
        out = np.empty((T, self.grids.n_x, self.n_candidates))
        for t in range(T):
            n_suffix = self.grids.n_xhat ** (T - t)
            out[t] = u[self.stage_index[t][cand % n_suffix].T]
        return out

    # serialization -------------------------------------------------------
    MAGIC = b"CLCPT1\n"

    def save(self, path):
        """Write the table: magic line, ``key = value`` header, blank line,
        then little-endian float64 controls in (t, x-index, candidate) order."""
        g = self.grids
        header = {
            "horizon": self.horizon,
            "a_model": repr(float(self.a_model)),
            "b_model": repr(float(self.b_model)),
            "q": ",".join(repr(v) for v in self.cost.q),
            "r": ",".join(repr(v) for v in self.cost.r),
            "beta": ",".join(repr(v) for v in self.beta.values),
            "interpolation": self.interpolation,
            "outside": self.outside,
        }
        for name in ("x_min", "x_max", "u_min", "u_max", "xhat_min", "xhat_max"):
            header[name] = repr(float(getattr(g, name)))
        for name in ("n_x", "n_u", "n_xhat"):
            header[name] = int(getattr(g, name))
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            for k, v in header.items():
                fh.write(f"{k} = {v}\n".encode())
            fh.write(b"\n")
            fh.write(self.dense().astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "PolicyTable":
        with open(path, "rb") as fh:
            if fh.readline() != cls.MAGIC:
                raise InvalidInputError(f"{path}: not a policy table file")
            header = {}
            for raw in iter(fh.readline, b""):
                line = raw.decode().strip()
                if not line:
                    break
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            payload = fh.read()
        floats = lambda s: tuple(float(v) for v in s.split(","))  # noqa: E731
        grids = GridSpec(
            *(float(header[k]) for k in ("x_min", "x_max", "u_min", "u_max", "xhat_min", "xhat_max")),
            *(int(header[k]) for k in ("n_x", "n_u", "n_xhat")),
        )
        T = int(header["horizon"])
        n_cand = grids.n_xhat**T
        dense = np.frombuffer(payload, dtype="<f8")
        if dense.size != T * grids.n_x * n_cand:
            raise InvalidInputError(f"{path}: payload size does not match header")
        dense = dense.reshape(T, grids.n_x, n_cand)
        u = grids.u_grid
        stage_index = []
        for t in range(T):
            n_suffix = grids.n_xhat ** (T - t)
            vals = dense[t, :, :n_suffix].T
            idx = np.rint((vals - grids.u_min) / grids.du).astype(np.int32)
            if not np.array_equal(u[idx], vals):
                raise InvalidInputError(f"{path}: stored controls are not on the control grid")
            stage_index.append(idx)
        return cls(
            float(header["a_model"]),
            float(header["b_model"]),
            CostSchedule(floats(header["q"]), floats(header["r"])),
            BetaVector(floats(header["beta"])),
            grids,
            header["interpolation"],
            stage_index,
            header.get("outside", "exclude"),
        )


# --------------------------------------------------------------------------
# interpolation weights (suffix independent, computed once per stage)


def interpolation_stencil(xp, x_min, dx, n_x, kind="linear"):
    """Indices and weights so that V(xp) ~= sum_m w[..., m] * V[idx[..., m]].

    Outside [x_min, x_max] the boundary value is used.
    """
    xp = np.asarray(xp, dtype=np.float64)
    x_max = x_min + (n_x - 1) * dx
    f = (xp - x_min) / dx
    if kind == "linear":
        j = np.clip(np.floor(f).astype(np.int64), 0, n_x - 2)
        s = f - j
        idx = np.stack([j, j + 1], axis=-1)
        w = np.stack([1.0 - s, s], axis=-1)
    elif kind == "quadratic":
        if n_x < 3:
            raise InvalidInputError("quadratic interpolation needs n_x >= 3")
        j = np.clip(np.rint(f).astype(np.int64), 1, n_x - 2)
        s = f - j
        idx = np.stack([j - 1, j, j + 1], axis=-1)
        w = np.stack([0.5 * s * (s - 1.0), (1.0 - s) * (1.0 + s), 0.5 * s * (s + 1.0)], axis=-1)
    else:
        raise InvalidInputError(f"unknown interpolation {kind!r}; expected one of {INTERPOLATIONS}")
    low = xp <= x_min
    high = xp >= x_max
    if low.any() or high.any():
        idx = idx.copy()
        w = w.copy()
        w[low] = 0.0
        w[high] = 0.0
        idx[low] = 0
        idx[high] = n_x - 1
        w[low, 0] = 1.0
        w[high, 0] = 1.0
    return idx.astype(np.int64), w


# --------------------------------------------------------------------------
# stage kernels
#
# Both kernels evaluate  base + beta * (d * d) + cont  in the same order and
# keep the first minimizing control index, so they agree bit for bit. A
# stencil that touches an inadmissible (infinite) node with nonzero weight
# makes the continuation infinite; a negative quadratic weight would
# otherwise turn it into -inf.


@njit(cache=True)
def _stage_nb(base, xp, beta, xhat, v_next, idx, w, cont_fixed, use_fixed):
    n_x, n_u = base.shape
    n_xh = xhat.shape[0]
    n_next = v_next.shape[0]
    n_w = w.shape[2]
    values = np.empty((n_xh * n_next, n_x))
    choice = np.empty((n_xh * n_next, n_x), dtype=np.int32)
    cont = np.empty((n_x, n_u))
    for sn in range(n_next):
        if use_fixed:
            cont[:, :] = cont_fixed
        else:
            for i in range(n_x):
                for k in range(n_u):
                    c = 0.0
                    for m in range(n_w):
                        wm = w[i, k, m]
                        if wm != 0.0:
                            v = v_next[sn, idx[i, k, m]]
                            if v == np.inf:
                                c = np.inf
                                break
                            c = c + wm * v
                    cont[i, k] = c
        for j in range(n_xh):
            s = j * n_next + sn
            xj = xhat[j]
            for i in range(n_x):
                best = np.inf
                best_k = 0
                for k in range(n_u):
                    d = xp[i, k] - xj
                    val = base[i, k] + beta * (d * d) + cont[i, k]
                    if val < best:
                        best = val
                        best_k = k
                values[s, i] = best
                choice[s, i] = best_k
    return values, choice


def _stage_np(base, xp, beta, xhat, v_next, idx, w, cont_fixed, use_fixed, chunk_elems=1 << 22):
    n_x, n_u = base.shape
    n_xh = xhat.shape[0]
    n_next = v_next.shape[0]
    values = np.empty((n_xh * n_next, n_x))
    choice = np.empty((n_xh * n_next, n_x), dtype=np.int32)
    # objective block is (chunk, n_xh, n_x, n_u)
    chunk = max(1, chunk_elems // (n_xh * n_x * n_u))
    d = xp[None, :, :] - xhat[:, None, None]
    pen = base[None] + beta * (d * d)  # (n_xh, n_x, n_u)
    for lo in range(0, n_next, chunk):
        hi = min(n_next, lo + chunk)
        if use_fixed:
            cont = np.broadcast_to(cont_fixed, (hi - lo, n_x, n_u))
        else:
            vb = v_next[lo:hi]
            cont = np.zeros((hi - lo, n_x, n_u))
            dead = np.zeros((hi - lo, n_x, n_u), dtype=bool)
            for m in range(w.shape[2]):
                wm = w[None, :, :, m]
                vm = vb[:, idx[:, :, m]]
                live = wm != 0.0
                dead |= live & (vm == np.inf)
                cont = cont + np.where(live & ~dead, wm * vm, 0.0)
            cont[dead] = np.inf
        obj = pen[None, :, :, :] + cont[:, None, :, :]
        k = np.argmin(obj, axis=-1)
        v = np.take_along_axis(obj, k[..., None], axis=-1)[..., 0]
        # rows are s = j * n_next + sn
        rows = (np.arange(n_xh)[None, :] * n_next + np.arange(lo, hi)[:, None]).ravel()
        values[rows] = v.reshape(-1, n_x)
        choice[rows] = k.reshape(-1, n_x)
    return values, choice


def _resolve_backend(backend):
    if backend is None:
        return _accel.backend()
    if backend not in ("numba", "numpy"):
        raise InvalidInputError(f"unknown backend {backend!r}")
    if backend == "numba" and not _accel.HAS_NUMBA:
        raise InvalidInputError("numba backend requested but numba is unavailable or disabled")
    return backend


@dataclass(frozen=True)
class _StageData:
    """Everything in the backward pass that does not depend on beta or xhat."""

    xp: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    bases: tuple
    cont_terminal: np.ndarray
    terminal_value: np.ndarray


def _prepare(a, b, cost, grids, interpolation, outside) -> _StageData:
    x = grids.x_grid
    u = grids.u_grid
    xp = a * x[:, None] + b * u[None, :]
    idx, w = interpolation_stencil(xp, grids.x_min, grids.dx, grids.n_x, interpolation)
    if outside == "exclude":
        tol = 1e-12 * max(1.0, abs(grids.x_min), abs(grids.x_max))
        admissible = (xp >= grids.x_min - tol) & (xp <= grids.x_max + tol)
    elif outside == "clamp":
        admissible = np.ones(xp.shape, dtype=bool)
    else:
        raise InvalidInputError(f"unknown outside rule {outside!r}; expected one of {OUTSIDE_RULES}")
    bases = []
    for t in range(cost.horizon):
        base = cost.q[t] * (x * x)[:, None] + cost.r[t] * (u * u)[None, :]
        base[~admissible] = np.inf
        bases.append(base)
    T = cost.horizon
    return _StageData(xp, idx, w, tuple(bases), cost.q[T] * (xp * xp), (cost.q[T] * x * x)[None, :])


def _backward(a, b, cost, beta, grids, xhat_axes, interpolation, outside, backend, keep_values=False,
              prep=None):
    """Run the suffix-shared backward pass.

    ``xhat_axes[t]`` holds the admissible values of xhat_{t+1}; on-grid builds
    pass the full candidate grid for every stage, single-candidate evaluation
    passes one value per stage.
    """
    backend = _resolve_backend(backend)
    kernel = _stage_nb if backend == "numba" else _stage_np
    T = cost.horizon
    if len(beta) != T:
        raise InvalidInputError(f"beta has length {len(beta)}, horizon is {T}")
    if prep is None:
        prep = _prepare(a, b, cost, grids, interpolation, outside)
    v_next = np.zeros((1, grids.n_x))
    stage_index = [None] * T
    values = [None] * (T + 1)
    for t in range(T - 1, -1, -1):
        v, k = kernel(
            prep.bases[t], prep.xp, float(beta[t]), np.ascontiguousarray(xhat_axes[t], dtype=np.float64),
            v_next, prep.idx, prep.w, prep.cont_terminal, t == T - 1,
        )
        stage_index[t] = k
        if keep_values:
            values[t] = v
        v_next = v
    if keep_values:
        values[T] = prep.terminal_value
        return stage_index, values
    return stage_index


def build_policy_table(
    a_model: float,
    b_model: float,
    cost: CostSchedule,
    beta,
    grids: GridSpec,
    *,
    interpolation: str = "quadratic",
    outside: str = "exclude",
    budget: int = DEFAULT_CANDIDATE_BUDGET,
    backend: str | None = None,
) -> PolicyTable:
    """Solve the proxy-cost DP for every candidate on the candidate grid.

    ``outside="exclude"`` treats controls whose successor leaves the model
    grid as inadmissible; ``"clamp"`` instead continues with the boundary
    value. ``interpolation`` selects how V_{t+1} is read between grid points
    (the terminal value Q_T x^2 is always evaluated exactly).
    """
    beta = beta if isinstance(beta, BetaVector) else BetaVector(beta)
    T = cost.horizon
    size = grids.n_xhat**T
    if size > budget:
        raise CapacityError(size, budget)
    xh = grids.xhat_grid
    prep = _prepare(a_model, b_model, cost, grids, interpolation, outside)
    stage_index = _backward(a_model, b_model, cost, beta, grids, [xh] * T, interpolation, outside, backend,
                            prep=prep)
    return PolicyTable(a_model, b_model, cost, beta, grids, interpolation, stage_index, outside, prep)


def value_tables(a_model, b_model, cost, beta, grids, *, interpolation="quadratic", outside="exclude",
                 backend=None):
    """Suffix-indexed value tables V_0..V_T (diagnostics and tests)."""
    beta = beta if isinstance(beta, BetaVector) else BetaVector(beta)
    xh = grids.xhat_grid
    return _backward(a_model, b_model, cost, beta, grids, [xh] * cost.horizon,
                     interpolation, outside, backend, keep_values=True)[1]


def candidate_policy(table: PolicyTable, points, backend=None) -> np.ndarray:
    """Control-grid indices of shape (T, n_x) for one (possibly off-grid) candidate.

    Uses the same arithmetic as :func:`build_policy_table`, so for an on-grid
    candidate the result equals the table's entries.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (table.horizon,):
        raise InvalidInputError(f"candidate must have {table.horizon} points")
    stage_index = _backward(
        table.a_model, table.b_model, table.cost, table.beta, table.grids,
        [pts[t : t + 1] for t in range(table.horizon)], table.interpolation, table.outside, backend,
        prep=table.stage_data(),
    )
    return np.stack([k[0] for k in stage_index])


def nearest_index(grids: GridSpec, x):
    """Nearest model-state grid index, ties to the lower index.

    Raises OutOfRangeError beyond one grid spacing outside [x_min, x_max].
    """
    x = np.asarray(x, dtype=np.float64)
    dx = grids.dx
    if np.any(x < grids.x_min - dx) or np.any(x > grids.x_max + dx) or np.any(~np.isfinite(x)):
        raise OutOfRangeError(f"state {x} outside model grid [{grids.x_min}, {grids.x_max}]")
    g = grids.x_grid
    lo = np.clip(np.floor((x - grids.x_min) / dx).astype(np.int64), 0, grids.n_x - 2)
    take_hi = (g[lo + 1] - x) < (x - g[lo])
    return np.where(take_hi, lo + 1, lo)


def query_policy(table: PolicyTable, t: int, x: float, candidate) -> float:
    if not 0 <= t < table.horizon:
        raise InvalidInputError(f"stage {t} outside 0..{table.horizon - 1}")
    if isinstance(candidate, CandidateTrajectory):
        cidx = candidate.index if candidate.on_grid else table.candidate_index(candidate.points)
    elif isinstance(candidate, (int, np.integer)):
        cidx = int(candidate)
    else:
        cidx = table.candidate_index(candidate)
    i = int(nearest_index(table.grids, x))
    return float(table.grids.u_grid[table.control_indices(t, i, cidx)])


def greedy_rollout(table: PolicyTable, x0: float, candidate):
    """Model trajectory obtained by following the table for a fixed candidate."""
    from .model import Trajectory

    T = table.horizon
    xs = np.empty(T + 1)
    us = np.empty(T)
    xs[0] = x0
    for t in range(T):
        us[t] = query_policy(table, t, xs[t], candidate)
        xs[t + 1] = table.a_model * xs[t] + table.b_model * us[t]
    return Trajectory(xs, us)
