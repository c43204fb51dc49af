import csv

import numpy as np
import pytest

from clc_lqr import riccati
from clc_lqr.clc_dp import GridSpec, build_policy_table
from clc_lqr.coupling import (ModelSpec, affine_clc_controls, evaluate_candidate, execute_clc,
                              execute_clc_exact, solve_coupled)
from clc_lqr.errors import DegenerateCostError, InvalidInputError, NoFixedPointError
from clc_lqr.model import CostSchedule, RealSystemOracle, SystemInstance


def test_paper_instance_grid(paper_model, paper_oracle):
    res = execute_clc((-1.5, -1.0), paper_model, paper_oracle)
    du = paper_model.grids.du
    assert res.Jr_value == pytest.approx(0.75, rel=0.01)
    assert np.all(np.abs(res.controls - [-0.75, -0.25]) <= du)
    assert res.episodes_used == paper_oracle.episodes


def test_paper_instance_exact(paper_model, paper_oracle):
    res = execute_clc_exact((-1.5, -1.0), paper_model, paper_oracle)
    assert res.Jr_value == pytest.approx(0.75, rel=1e-12)
    assert res.controls == pytest.approx([-0.75, -0.25], rel=1e-12)
    # T + 1 probes and one final run
    assert res.episodes_used == 4 == paper_oracle.episodes


@pytest.mark.parametrize("beta", [(0.0, -1.0), (0.5, -1.0), (1.0, -1.0), (2.0, -1.0)])
def test_grid_agrees_with_exact(paper_model, paper_instance, beta):
    exact = execute_clc_exact(beta, paper_model, RealSystemOracle.from_instance(paper_instance))
    grid = execute_clc(beta, paper_model, RealSystemOracle.from_instance(paper_instance), refine_tol=1e-6)
    assert grid.solution.residual <= 1e-6
    assert np.max(np.abs(grid.controls - exact.controls)) <= 2 * paper_model.grids.du


def test_exact_fixed_point_is_consistent(paper_model, paper_instance):
    res = execute_clc_exact((0.7, -1.0), paper_model, RealSystemOracle.from_instance(paper_instance))
    sol = res.solution
    assert np.max(np.abs(sol.real_states[1:] - np.array(sol.candidate.points))) <= 1e-10
    u = affine_clc_controls(1.0, 1.0, paper_model.cost, (0.7, -1.0), sol.candidate.points, 0.5)
    assert np.array_equal(u, res.controls)


def test_affine_controls_zero_beta_is_model_lqr(paper_cost):
    # without mismatch penalties the proxy problem is the model's own LQR
    u = affine_clc_controls(1.0, 1.0, paper_cost, (0.0, 0.0), (0.3, -0.2), 0.5)
    traj = riccati.optimal_policy_controls(riccati.solve(1.0, 1.0, paper_cost, 0.5), 1.0, 1.0, 0.5)
    assert u == pytest.approx(traj.controls, rel=1e-12)


def test_affine_controls_degenerate(paper_cost):
    with pytest.raises(DegenerateCostError):
        affine_clc_controls(1.0, 1.0, paper_cost, (-2.5, -1.0), (0.0, 0.0), 0.5)


def test_no_fixed_point(paper_model, paper_oracle):
    with pytest.raises(NoFixedPointError) as info:
        execute_clc((-2.5, -1.0), paper_model, paper_oracle)
    assert info.value.residual > info.value.threshold
    assert info.value.solution is not None


def test_matched_dynamics_zero_beta():
    cost = CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0))
    model = ModelSpec(1.0, 1.0, cost, 0.5, GridSpec.paper_default())
    o = RealSystemOracle.from_instance(SystemInstance(1, 1, 1, 1, 0.5, 2))
    res = execute_clc((0.0, -1.0), model, o)
    assert res.Jr_value == pytest.approx(riccati.solve(1, 1, cost, 0.5).optimal_cost, rel=0.01)


def test_episode_accounting(paper_model, paper_oracle):
    table = build_policy_table(1.0, 1.0, paper_model.cost, (-1.5, -1.0), paper_model.grids)
    sol = solve_coupled(table, paper_oracle, 0.5, refine=False)
    # one episode per candidate whose model rollout stays on the grid
    assert 0 < sol.episodes_used <= table.n_candidates
    assert sol.episodes_used == paper_oracle.episodes
    assert not sol.refined


def test_off_grid_candidate_without_episode(paper_model, paper_oracle):
    g = GridSpec(-0.5, 0.5, -3, 3, -2, 2, 11, 61, 9)
    table = build_policy_table(1.0, 1.0, paper_model.cost, (0.0, -1.0), g)
    # a model state of 2 is outside the model grid
    assert evaluate_candidate(table, paper_oracle, 2.0, (0.0, 0.0)) is None
    assert paper_oracle.episodes == 0


def test_trace_file(tmp_path, paper_model, paper_oracle):
    p = tmp_path / "trace.csv"
    execute_clc((-1.5, -1.0), paper_model, paper_oracle, trace_path=p)
    with open(p) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["candidate", "xhat_1", "xhat_2", "residual", "J_c", "J_r"]
    assert len(rows) - 1 == paper_oracle.episodes - 1  # all but the final run


def test_beta_length_checked(paper_model, paper_oracle):
    with pytest.raises(InvalidInputError):
        execute_clc((1.0,), paper_model, paper_oracle)
    with pytest.raises(InvalidInputError):
        execute_clc_exact((1.0, 2.0, 3.0), paper_model, paper_oracle)


def test_refinement_reaches_tolerance(paper_model, paper_instance):
    o = RealSystemOracle.from_instance(paper_instance)
    res = execute_clc((1.0, -1.0), paper_model, o, refine_tol=1e-6)
    assert res.solution.residual <= 1e-6
    assert res.solution.refined
    assert res.solution.grid_residual > 1e-6
