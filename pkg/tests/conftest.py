import os

import numpy as np
import pytest

from dualshield import provision
from dualshield.hj_solver import SolverConfig, solve, static_grid, static_obstacle_model
from dualshield.scenario import ValueFunctionGrids


@pytest.fixture(scope="session")
def vf_cache(request):
    """Value-function cache shared across runs (``$DUALSHIELD_VF_DIR`` wins)."""
    env = os.environ.get(provision.ENV_VAR)
    if env:
        return env
    return str(request.config.cache.mkdir("value_functions"))


@pytest.fixture(scope="session")
def reduced_vfs(vf_cache):
    """Reduced-grid HV and static value functions (computed once, then cached)."""
    return provision.value_functions(ValueFunctionGrids(), vf_cache)


@pytest.fixture(scope="session")
def small_static_vf():
    """A coarse 3-d static-obstacle value function; solves in well under a second."""
    return solve(static_obstacle_model(), static_grid((41, 41, 5)), SolverConfig(t_hj=1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
