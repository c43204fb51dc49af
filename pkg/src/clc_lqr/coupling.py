"""Enforcing the real dynamics: black-box search for the coupled fixed point

    xhat_{t+1} = (real system applied to U_t(X_t; xhat_{1:T}))_{t+1}

over the candidate grid, with an optional off-grid refinement, and the
complete CLC procedure built on top of it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .clc_dp import (
    BetaVector,
    CandidateTrajectory,
    GridSpec,
    PolicyTable,
    build_policy_table,
    candidate_policy,
)
from .errors import DegenerateCostError, InvalidInputError, NoFixedPointError, OutOfRangeError
from .model import CostSchedule, RealSystemOracle, Trajectory, eval_Jc, eval_Jr, rollout


@dataclass(frozen=True)
class ModelSpec:
    """Everything CLC is allowed to know: the model, the cost, x0 and the grids."""

    a: float
    b: float
    cost: CostSchedule
    x0: float
    grids: GridSpec


@dataclass
class CouplingSolution:
    candidate: CandidateTrajectory
    residual: float
    controls: np.ndarray
    episodes_used: int
    model_states: np.ndarray
    real_states: np.ndarray
    jc: float
    grid_residual: float = np.inf
    refined: bool = False

    @property
    def real_trajectory(self):
        return Trajectory(self.real_states, self.controls)


@dataclass
class _Eval:
    points: np.ndarray
    controls: np.ndarray
    model_states: np.ndarray
    real_states: np.ndarray
    residual: float
    jc: float
    index: int | None = None

    @property
    def signed(self):
        return self.real_states[1:] - self.points


def _snap(grids: GridSpec, x):
    """Vectorized nearest x-grid index (ties low) and an in-range mask."""
    dx = grids.dx
    ok = np.isfinite(x) & (x >= grids.x_min - dx) & (x <= grids.x_max + dx)
    xs = np.where(ok, x, grids.x_min)
    g = grids.x_grid
    lo = np.clip(np.floor((xs - grids.x_min) / dx).astype(np.int64), 0, grids.n_x - 2)
    take_hi = (g[lo + 1] - xs) < (xs - g[lo])
    return np.where(take_hi, lo + 1, lo), ok


def _proxy_costs(table: PolicyTable, points, model_states, controls):
    q = np.asarray(table.cost.q)
    r = np.asarray(table.cost.r)
    beta = table.beta.as_array()
    d = model_states[..., 1:] - points
    return (
        np.sum(q * model_states**2, axis=-1)
        + np.sum(r * controls**2, axis=-1)
        + np.sum(beta * d * d, axis=-1)
    )


def _model_rollout_grid(table: PolicyTable, x0: float):
    """Model rollouts of every grid candidate under its own table policy."""
    g = table.grids
    T = table.horizon
    n = table.n_candidates
    cand = np.arange(n)
    u = g.u_grid
    xs = np.empty((n, T + 1))
    us = np.empty((n, T))
    xs[:, 0] = x0
    ok = np.ones(n, dtype=bool)
    for t in range(T):
        xi, in_range = _snap(g, xs[:, t])
        ok &= in_range
        us[:, t] = u[table.control_indices(t, xi, cand)]
        xs[:, t + 1] = table.a_model * xs[:, t] + table.b_model * us[:, t]
    # the last state is not queried, but must still be a valid model state
    _, in_range = _snap(g, xs[:, T])
    ok &= in_range
    return xs, us, ok


def evaluate_candidate(table: PolicyTable, oracle: RealSystemOracle, x0: float, points,
                       backend=None) -> _Eval | None:
    """Model rollout + one real episode for a single (possibly off-grid) candidate.

    Returns None without touching the real system if the model trajectory
    leaves the grid.
    """
    pts = np.asarray(points, dtype=np.float64)
    k = candidate_policy(table, pts, backend=backend)
    g = table.grids
    u = g.u_grid
    T = table.horizon
    xs = np.empty(T + 1)
    us = np.empty(T)
    xs[0] = x0
    for t in range(T):
        xi, ok = _snap(g, np.array([xs[t]]))
        if not ok[0]:
            return None
        us[t] = u[k[t, xi[0]]]
        xs[t + 1] = table.a_model * xs[t] + table.b_model * us[t]
    if not _snap(g, np.array([xs[T]]))[1][0]:
        return None
    real = oracle.rollout(x0, us)
    res = float(np.max(np.abs(real[1:] - pts)))
    jc = float(_proxy_costs(table, pts, xs, us))
    return _Eval(pts, us, xs, real, res, jc)


def _newton(table, oracle, x0, start: _Eval, *, target=0.0, max_iter=12, backend=None, log=None):
    """Finite-difference Newton steps on F(xhat) = xhat.

    The real states are nearly affine in xhat away from control-grid jumps,
    so T + 1 evaluations per step usually get within a few control spacings
    of the fixed point. Steps that do not lower the residual shrink the
    difference width; the best evaluation seen is returned.
    """
    g = table.grids
    T = table.horizon
    lo, hi = g.xhat_min, g.xhat_max
    best = cur = start
    h = g.dxhat
    for _ in range(max_iter):
        if best.residual <= target or h < 1e-12:
            break
        jac = np.empty((T, T))
        ok = True
        for t in range(T):
            pts = cur.points.copy()
            step = h if pts[t] + h <= hi else -h
            pts[t] += step
            e = evaluate_candidate(table, oracle, x0, pts, backend=backend)
            if e is None:
                ok = False
                break
            if log is not None:
                log.append(e)
            if e.residual < best.residual:
                best = e
            jac[:, t] = (e.real_states[1:] - cur.real_states[1:]) / step
        if not ok:
            h *= 0.25
            continue
        try:
            dz = np.linalg.solve(np.eye(T) - jac, cur.signed)
        except np.linalg.LinAlgError:
            h *= 0.25
            continue
        e = evaluate_candidate(table, oracle, x0, np.clip(cur.points + dz, lo, hi), backend=backend)
        if e is not None and log is not None:
            log.append(e)
        if e is not None and e.residual < cur.residual:
            cur = e
            if e.residual < best.residual:
                best = e
            h = min(h, max(float(np.max(np.abs(dz))), 1e-12))
        else:
            h *= 0.25
    return best


def _refine(table, oracle, x0, start: _Eval, *, max_sweeps=8, max_bisect=64, ladder_depth=40,
            root_tol=0.0, target=0.0, order="forward", patience=True, backend=None, log=None):
    """Coordinate-wise (Gauss-Seidel) black-box root finding on the signed residual.

    For coordinate t the residual r_t is scanned along the whole candidate
    axis (other coordinates held), every sign change is bisected off-grid
    (until |r_t| <= ``root_tol``), and the root with the smallest overall
    residual becomes the new iterate. Stops early once the best residual is
    at most ``target``. The returned evaluation never has a larger max-norm
    residual than ``start``.
    """
    g = table.grids
    axis = g.xhat_grid
    best = start
    cur = start

    def ev(pts):
        nonlocal best
        e = evaluate_candidate(table, oracle, x0, pts, backend=backend)
        if e is not None:
            if log is not None:
                log.append(e)
            if e.residual < best.residual:
                best = e
        return e

    def bisect(a_e, b_e, t):
        for _ in range(max_bisect):
            za, zb = a_e.points[t], b_e.points[t]
            if abs(zb - za) <= 4 * np.finfo(float).eps * max(1.0, abs(za), abs(zb)):
                break
            pts = a_e.points.copy()
            pts[t] = 0.5 * (za + zb)
            e = ev(pts)
            if e is None:
                break
            if abs(e.signed[t]) <= root_tol:
                return e
            if np.sign(e.signed[t]) == np.sign(a_e.signed[t]):
                a_e = e
            else:
                b_e = e
        return a_e if abs(a_e.signed[t]) <= abs(b_e.signed[t]) else b_e

    prev_cur = np.inf
    for sweep in range(max_sweeps):
        before = best.residual
        coords = range(table.horizon)
        if order == "backward" or (order == "alternate" and sweep % 2):
            coords = reversed(coords)
        for t in coords:
            line = [cur]
            z0 = cur.points[t]
            ladder = z0 + np.outer([-1.0, 1.0], g.dxhat * 0.5 ** np.arange(1, ladder_depth + 1)).ravel()
            ladder = ladder[(ladder >= axis[0]) & (ladder <= axis[-1])]
            for z in np.unique(np.concatenate([axis, ladder])):
                if z == z0:
                    continue
                pts = cur.points.copy()
                pts[t] = z
                e = ev(pts)
                if e is not None:
                    line.append(e)
            line.sort(key=lambda e: e.points[t])
            roots = [e for e in line if e.signed[t] == 0.0]
            for a_e, b_e in zip(line[:-1], line[1:]):
                if a_e.signed[t] * b_e.signed[t] < 0.0:
                    roots.append(bisect(a_e, b_e, t))
            if roots:
                cur = min(roots, key=lambda e: (e.residual, abs(e.signed[t])))
            if best.residual <= target:
                return best
        if best.residual == 0.0 or (patience and best.residual >= before and cur.residual >= prev_cur):
            break
        prev_cur = cur.residual
    return best


def solve_coupled(
    table: PolicyTable,
    oracle: RealSystemOracle,
    x0: float,
    *,
    refine: bool = True,
    n_starts: int = 1,
    refine_tol: float | None = None,
    threshold: float | None = None,
    trace_path=None,
    backend=None,
) -> CouplingSolution:
    """Direct search over the candidate grid (one real episode per candidate
    whose model rollout stays on the grid), then optional refinement.

    Selection order is (residual, proxy cost, candidate index). Refinement
    starts from the ``n_starts`` best grid candidates and then the centre
    candidate, stopping once the residual is at most ``refine_tol`` (default
    one candidate spacing, so on-grid fixed points are never refined). Raises
    NoFixedPointError if the best residual exceeds ``threshold``
    (default: twice the candidate-grid spacing).
    """
    if threshold is None:
        threshold = 2.0 * table.grids.dxhat
    start_episodes = oracle.episodes
    xs, us, ok = _model_rollout_grid(table, x0)
    if not ok.any():
        raise OutOfRangeError("every candidate's model trajectory leaves the state grid")
    feasible = np.flatnonzero(ok)
    xh = table.grids.xhat_grid
    digits = np.stack(np.unravel_index(feasible, (table.grids.n_xhat,) * table.horizon), axis=-1)
    pts = xh[digits]
    real = oracle.rollout(x0, us[feasible])
    residual = np.max(np.abs(real[:, 1:] - pts), axis=1)
    jc = _proxy_costs(table, pts, xs[feasible], us[feasible])
    order = np.lexsort((feasible, jc, residual))
    i = order[0]
    best = _Eval(pts[i], us[feasible[i]], xs[feasible[i]], real[i], float(residual[i]), float(jc[i]),
                 int(feasible[i]))
    grid_residual = best.residual

    log = [] if trace_path is not None else None
    if refine_tol is None:
        refine_tol = table.grids.dxhat
    if refine and best.residual > refine_tol:
        starts = list(order[:n_starts])
        # the candidate nearest the middle of the xhat range is always tried
        # too: near-degenerate proxy costs only have an unsaturated basin there
        mid = int(np.argmin(np.abs(xh - 0.5 * (xh[0] + xh[-1]))))
        centre = np.ravel_multi_index((mid,) * table.horizon, (table.grids.n_xhat,) * table.horizon)
        hit = np.flatnonzero(feasible == centre)
        if hit.size and hit[0] not in starts:
            starts.append(hit[0])
        for i in starts:
            start = _Eval(pts[i], us[feasible[i]], xs[feasible[i]], real[i], float(residual[i]),
                          float(jc[i]), int(feasible[i]))
            found = _newton(table, oracle, x0, start, target=refine_tol, backend=backend, log=log)
            if found.residual > refine_tol:
                scan = _refine(table, oracle, x0, start, root_tol=0.1 * refine_tol, target=refine_tol,
                               backend=backend, log=log)
                if scan.residual < found.residual:
                    found = scan
            if found.residual < best.residual:
                best = found
            if best.residual <= refine_tol:
                break

    if trace_path is not None:
        _write_trace(trace_path, table, feasible, pts, residual, jc, real, us[feasible], log)

    sol = CouplingSolution(
        candidate=CandidateTrajectory(tuple(best.points), best.index),
        residual=best.residual,
        controls=best.controls.copy(),
        episodes_used=oracle.episodes - start_episodes,
        model_states=best.model_states.copy(),
        real_states=best.real_states.copy(),
        jc=best.jc,
        grid_residual=grid_residual,
        refined=best.index is None,
    )
    if sol.residual > threshold:
        raise NoFixedPointError(sol.residual, threshold, sol)
    return sol


def _write_trace(path, table, feasible, pts, residual, jc, real, controls, log):
    cost = table.cost
    T = table.horizon
    q = np.asarray(cost.q)
    r = np.asarray(cost.r)
    jr = np.sum(q * real**2, axis=1) + np.sum(r * controls**2, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate"] + [f"xhat_{t + 1}" for t in range(T)] + ["residual", "J_c", "J_r"])
        for n, idx in enumerate(feasible):
            w.writerow([int(idx)] + [f"{v:.17g}" for v in pts[n]]
                       + [f"{residual[n]:.17g}", f"{jc[n]:.17g}", f"{jr[n]:.17g}"])
        for e in log or ():
            jr_e = eval_Jr(cost, Trajectory(e.real_states, e.controls))
            w.writerow([""] + [f"{v:.17g}" for v in e.points]
                       + [f"{e.residual:.17g}", f"{e.jc:.17g}", f"{jr_e:.17g}"])


@dataclass
class CLCResult:
    controls: np.ndarray
    Jr_value: float
    episodes_used: int
    solution: CouplingSolution = field(repr=False)
    real_states: np.ndarray = field(default=None, repr=False)


def execute_clc(
    beta,
    model: ModelSpec,
    oracle: RealSystemOracle,
    *,
    interpolation: str = "quadratic",
    outside: str = "exclude",
    refine: bool = True,
    n_starts: int = 1,
    refine_tol: float | None = None,
    threshold: float | None = None,
    budget: int | None = None,
    trace_path=None,
    backend=None,
) -> CLCResult:
    """Build the policy table, solve the coupled equations, run g^clc once on
    the real system and report its real cost."""
    beta = beta if isinstance(beta, BetaVector) else BetaVector(beta)
    if len(beta) != model.cost.horizon:
        raise InvalidInputError(f"beta has length {len(beta)}, horizon is {model.cost.horizon}")
    kw = {} if budget is None else {"budget": budget}
    table = build_policy_table(model.a, model.b, model.cost, beta, model.grids,
                               interpolation=interpolation, outside=outside, backend=backend, **kw)
    start = oracle.episodes
    sol = solve_coupled(table, oracle, model.x0, refine=refine, n_starts=n_starts, refine_tol=refine_tol,
                        threshold=threshold, trace_path=trace_path, backend=backend)
    real = oracle.rollout(model.x0, sol.controls)
    jr = eval_Jr(model.cost, Trajectory(real, sol.controls))
    return CLCResult(sol.controls.copy(), jr, oracle.episodes - start, sol, real)


# --------------------------------------------------------------------------
# grid-free CLC
#
# Without grids or control bounds the proxy-cost DP is an LQ problem with a
# reference term, so its controls (and the real states they produce) are
# affine in xhat. T + 1 probe episodes identify that affine map and the
# coupled equations become a T x T linear solve.


def affine_clc_controls(a, b, cost: CostSchedule, beta, xhat, x0):
    """Open-loop controls of the unconstrained proxy-cost DP for one candidate,
    read off the model rollout (the same convention as the grid solver)."""
    beta = np.asarray(beta, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    T = cost.horizon
    q = cost.q
    r = cost.r
    k = np.empty(T)
    l = np.empty(T)
    p, s = q[T], 0.0  # V_T(x) = p x^2 + 2 s x + const
    for t in range(T - 1, -1, -1):
        pp = p + beta[t]
        ss = s - beta[t] * xhat[t]
        den = r[t] + pp * b * b
        if not den > 0.0:
            raise DegenerateCostError(f"proxy cost is not convex in U_{t} (r + P b^2 = {den:.6g})")
        k[t] = -pp * a * b / den
        l[t] = -ss * b / den
        acl = a + b * k[t]
        p = q[t] + r[t] * k[t] ** 2 + pp * acl**2
        s = r[t] * k[t] * l[t] + pp * acl * b * l[t] + ss * acl
    u = np.empty(T)
    x = float(x0)
    for t in range(T):
        u[t] = k[t] * x + l[t]
        x = a * x + b * u[t]
    return u


def execute_clc_exact(beta, model: ModelSpec, oracle: RealSystemOracle, *, threshold: float = 1e-8) -> CLCResult:
    """CLC without discretization: T + 1 probe episodes, one linear solve,
    one final episode. Raises NoFixedPointError if the coupled system is
    singular or the final residual exceeds ``threshold``."""
    beta = beta if isinstance(beta, BetaVector) else BetaVector(beta)
    T = model.cost.horizon
    if len(beta) != T:
        raise InvalidInputError(f"beta has length {len(beta)}, horizon is {T}")
    b_arr = beta.as_array()
    start = oracle.episodes

    def controls(pts):
        return affine_clc_controls(model.a, model.b, model.cost, b_arr, pts, model.x0)

    probes = np.vstack([np.zeros(T), np.eye(T)])
    us = np.array([controls(p) for p in probes])
    real = oracle.rollout(model.x0, us)[:, 1:]
    f0 = real[0]
    m = (real[1:] - f0).T  # column t is the response to xhat_t
    try:
        pts = np.linalg.solve(np.eye(T) - m, f0)
    except np.linalg.LinAlgError:
        raise NoFixedPointError(np.inf, threshold) from None
    u = controls(pts)
    final = oracle.rollout(model.x0, u)
    res = float(np.max(np.abs(final[1:] - pts)))
    xs = rollout((model.a, model.b), model.x0, u).states
    sol = CouplingSolution(
        candidate=CandidateTrajectory(tuple(pts), None),
        residual=res,
        controls=u,
        episodes_used=oracle.episodes - start,
        model_states=xs,
        real_states=final,
        jc=eval_Jc(model.cost, beta, CandidateTrajectory(tuple(pts)), Trajectory(xs, u)),
        refined=True,
    )
    if not res <= threshold * max(1.0, float(np.max(np.abs(pts)))):
        raise NoFixedPointError(res, threshold, sol)
    jr = eval_Jr(model.cost, Trajectory(final, u))
    return CLCResult(u.copy(), jr, oracle.episodes - start, sol, final)
