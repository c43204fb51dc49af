"""Combined learning-and-control for scalar finite-horizon LQR with unknown dynamics."""
from ._accel import HAS_NUMBA, backend
from .clc_dp import BetaVector, CandidateTrajectory, GridSpec, PolicyTable, build_policy_table, query_policy
from .model import CostSchedule, EpisodeLedger, RealSystemOracle, SystemInstance, Trajectory, eval_Jc, eval_Jr, rollout
from .riccati import RiccatiSolution, optimal_policy_controls, solve
from .coupling import CLCResult, ModelSpec, execute_clc, execute_clc_exact, solve_coupled
from .beta_learn import BetaLearnConfig, BetaTrace, fd_gradient, learn_beta, terminal_beta, theorem2_beta
from .baselines import LearningCurve, PGConfig, QLearnConfig, RSConfig, run_pg, run_q, run_rs

__version__ = "0.1.0"

__all__ = [
    "HAS_NUMBA", "backend", "BetaVector", "CandidateTrajectory", "GridSpec", "PolicyTable",
    "build_policy_table", "query_policy", "CostSchedule", "EpisodeLedger", "RealSystemOracle",
    "SystemInstance", "Trajectory", "eval_Jc", "eval_Jr", "rollout", "RiccatiSolution",
    "optimal_policy_controls", "solve", "CLCResult", "ModelSpec", "execute_clc", "execute_clc_exact",
    "solve_coupled", "BetaLearnConfig", "BetaTrace", "fd_gradient", "learn_beta", "terminal_beta",
    "theorem2_beta", "LearningCurve", "PGConfig", "QLearnConfig", "RSConfig", "run_pg", "run_q", "run_rs",
]
