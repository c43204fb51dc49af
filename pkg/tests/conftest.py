import pytest

from clc_lqr.clc_dp import GridSpec
from clc_lqr.coupling import ModelSpec
from clc_lqr.model import CostSchedule, RealSystemOracle, SystemInstance


@pytest.fixture
def paper_instance():
    return SystemInstance(a_true=2.0, b_true=1.0, a_model=1.0, b_model=1.0, x0=0.5, horizon=2)


@pytest.fixture
def paper_cost():
    return CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0))


@pytest.fixture
def paper_model(paper_cost):
    return ModelSpec(1.0, 1.0, paper_cost, 0.5, GridSpec.paper_default())


@pytest.fixture
def paper_oracle(paper_instance):
    return RealSystemOracle.from_instance(paper_instance)
