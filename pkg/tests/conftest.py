"""Shared fixtures: the numerical example's market (T=2, K=1, a=0.5, a(s)=1)."""

import pytest

from src.models.gbm_model import CallClaim, solve_v
from src.utils.num_core import QuadratureConfig, RootConfig
from tests.reference_values import REFERENCE_RHOS, reference_params


@pytest.fixture(scope='session')
def quad_cfg():
    return QuadratureConfig()


@pytest.fixture(scope='session')
def root_cfg():
    return RootConfig()


@pytest.fixture(scope='session')
def call():
    return CallClaim(strike=1.0)


@pytest.fixture(scope='session', params=REFERENCE_RHOS, ids=lambda rho: f"rho={rho}")
def params(request):
    return reference_params(request.param)


@pytest.fixture(scope='session')
def params_03():
    return reference_params(0.3)


@pytest.fixture(scope='session')
def params_075():
    return reference_params(0.75)


@pytest.fixture(scope='session')
def dual_03_g3(params_03, call, quad_cfg, root_cfg):
    return solve_v(3.0, call, params_03, quad_cfg, root_cfg)


@pytest.fixture(scope='session')
def dual_075_g3(params_075, call, quad_cfg, root_cfg):
    return solve_v(3.0, call, params_075, quad_cfg, root_cfg)
