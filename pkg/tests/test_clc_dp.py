import itertools

import numpy as np
import pytest

from clc_lqr import _accel
from clc_lqr.clc_dp import (BetaVector, GridSpec, PolicyTable, build_policy_table, candidate_policy,
                            greedy_rollout, interpolation_stencil, nearest_index, query_policy, value_tables)
from clc_lqr.coupling import affine_clc_controls
from clc_lqr.errors import CapacityError, InvalidInputError, OutOfRangeError
from clc_lqr.model import CostSchedule

BACKENDS = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
SMALL = GridSpec(-2, 2, -2, 2, -1, 1, 5, 5, 5)


def _brute_force(a, b, cost, beta, grids, xhat, x0):
    """min over every control sequence whose model states stay on the grid."""
    T = cost.horizon
    best = np.inf
    for us in itertools.product(grids.u_grid, repeat=T):
        x = x0
        c = 0.0
        ok = True
        for t in range(T):
            c += cost.q[t] * x * x + cost.r[t] * us[t] ** 2
            x = a * x + b * us[t]
            if not grids.x_min <= x <= grids.x_max:
                ok = False
                break
            c += beta[t] * (x - xhat[t]) ** 2
        if ok:
            best = min(best, c + cost.q[T] * x * x)
    return best


def _sequence_cost(a, b, cost, beta, xhat, xs, us):
    T = cost.horizon
    c = sum(cost.q[t] * xs[t] ** 2 + cost.r[t] * us[t] ** 2 + beta[t] * (xs[t + 1] - xhat[t]) ** 2
            for t in range(T))
    return c + cost.q[T] * xs[T] ** 2


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("interpolation", ["linear", "quadratic"])
@pytest.mark.parametrize("T", [2, 3])
def test_exhaustive_backward_induction(backend, interpolation, T):
    # a = b = 1 on unit-spaced grids: every successor is a grid node, so the
    # DP must agree exactly with enumeration of all control sequences
    rng = np.random.default_rng(T)
    cost = CostSchedule(tuple(rng.uniform(0, 1, T)) + (1.0,), tuple(rng.uniform(0.1, 1, T)))
    beta = BetaVector(tuple(rng.uniform(-0.3, 1.0, T)))
    table = build_policy_table(1.0, 1.0, cost, beta, SMALL, interpolation=interpolation, backend=backend)
    v0 = value_tables(1.0, 1.0, cost, beta, SMALL, interpolation=interpolation, backend=backend)[0]
    for cidx in range(table.n_candidates):
        xhat = table.candidate(cidx).points
        for i, x0 in enumerate(SMALL.x_grid):
            bf = _brute_force(1.0, 1.0, cost, beta, SMALL, xhat, x0)
            assert v0[cidx, i] == pytest.approx(bf, abs=1e-12)
            traj = greedy_rollout(table, x0, cidx)
            got = _sequence_cost(1.0, 1.0, cost, beta, xhat, traj.states, traj.controls)
            assert got == pytest.approx(bf, abs=1e-12)


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba unavailable")
def test_backends_bit_identical():
    cost = CostSchedule((0.3, 1.0, 0.5, 1.0), (1.0, 0.4, 0.7))
    g = GridSpec(-2, 2, -3, 3, -1.5, 1.5, 21, 41, 7)
    for interp in ("linear", "quadratic"):
        for outside in ("exclude", "clamp"):
            args = (1.3, 0.9, cost, (-0.4, 0.8, -1.0), g)
            t_np = build_policy_table(*args, interpolation=interp, outside=outside, backend="numpy")
            t_nb = build_policy_table(*args, interpolation=interp, outside=outside, backend="numba")
            for k_np, k_nb in zip(t_np.stage_index, t_nb.stage_index):
                assert np.array_equal(k_np, k_nb)


def test_exclude_rule_never_leaves_grid():
    cost = CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0))
    g = GridSpec(-2, 2, -3, 3, -2, 2, 41, 61, 9)
    table = build_policy_table(1.0, 1.0, cost, (-1.5, -1.0), g)
    dense = table.dense()
    succ = g.x_grid[None, :, None] + dense
    assert np.all(succ >= g.x_min - 1e-12) and np.all(succ <= g.x_max + 1e-12)


def test_stencil_exact_on_polynomials():
    xp = np.linspace(-1.9, 1.9, 37)
    xg = GridSpec.axis(-2, 2, 9)
    for kind, f in (("linear", lambda x: 3 * x - 1), ("quadratic", lambda x: 2 * x * x - x + 0.5)):
        idx, w = interpolation_stencil(xp, -2.0, 0.5, 9, kind)
        assert np.allclose(np.sum(w * f(xg)[idx], axis=-1), f(xp), atol=1e-12)
        assert np.allclose(w.sum(axis=-1), 1.0)


def test_stencil_boundary_uses_edge_value():
    idx, w = interpolation_stencil(np.array([-5.0, 5.0]), -2.0, 0.5, 9, "quadratic")
    assert idx[0, 0] == 0 and w[0, 0] == 1.0 and np.all(w[0, 1:] == 0)
    assert idx[1, 0] == 8 and w[1, 0] == 1.0


def test_candidate_policy_matches_table():
    cost = CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0))
    g = GridSpec(-2, 2, -3, 3, -2, 2, 41, 61, 9)
    table = build_policy_table(1.0, 1.0, cost, (-1.5, -1.0), g)
    for cidx in (0, 17, 40, 80):
        k = candidate_policy(table, table.candidate(cidx).points)
        for t in range(2):
            assert np.array_equal(k[t], table.control_indices(t, np.arange(g.n_x), cidx))


def test_matches_unconstrained_lq_on_fine_grid(paper_cost):
    # the grid DP should reproduce the closed-form affine policy up to grid error
    g = GridSpec.paper_default()
    table = build_policy_table(1.0, 1.0, paper_cost, (-1.5, -1.0), g)
    xhat = (0.25, 0.25)
    traj = greedy_rollout(table, 0.5, xhat)
    exact = affine_clc_controls(1.0, 1.0, paper_cost, (-1.5, -1.0), xhat, 0.5)
    assert np.max(np.abs(traj.controls - exact)) <= g.du


def test_save_load_roundtrip(tmp_path):
    cost = CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0))
    g = GridSpec(-2, 2, -3, 3, -2, 2, 21, 31, 5)
    table = build_policy_table(1.0, 1.0, cost, (-1.5, -1.0), g)
    p = tmp_path / "t.bin"
    table.save(p)
    back = PolicyTable.load(p)
    assert back.grids == g and back.cost == cost and back.beta == table.beta
    for k0, k1 in zip(table.stage_index, back.stage_index):
        assert np.array_equal(k0, k1)
    (tmp_path / "bad.bin").write_bytes(b"nope\n")
    with pytest.raises(InvalidInputError):
        PolicyTable.load(tmp_path / "bad.bin")


def test_capacity_error():
    cost = CostSchedule.constant(3)
    with pytest.raises(CapacityError) as info:
        build_policy_table(1.0, 1.0, cost, (0.0, 0.0, 0.0), GridSpec.paper_default(), budget=1000)
    assert info.value.size == 81**3


def test_query_errors(paper_cost):
    table = build_policy_table(1.0, 1.0, paper_cost, (0.0, 0.0), SMALL)
    with pytest.raises(OutOfRangeError):
        nearest_index(SMALL, 3.5)
    with pytest.raises(InvalidInputError):
        query_policy(table, 2, 0.0, 0)
    with pytest.raises(InvalidInputError):
        query_policy(table, 0, 0.0, (0.3, 0.0))
    assert query_policy(table, 0, 0.0, (0.5, 0.0)) == query_policy(table, 0, 0.0, table.candidate_index((0.5, 0.0)))


def test_grid_and_beta_validation():
    with pytest.raises(InvalidInputError):
        GridSpec(1, 1, -1, 1, -1, 1, 3, 3, 3)
    with pytest.raises(InvalidInputError):
        GridSpec(-1, 1, -1, 1, -1, 1, 1, 3, 3)
    with pytest.raises(InvalidInputError):
        BetaVector((np.nan, 1.0))
    with pytest.raises(InvalidInputError):
        build_policy_table(1.0, 1.0, CostSchedule.constant(2), (0.0,), SMALL)
