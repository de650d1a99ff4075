import numpy as np
import pytest

from caragames.analytic import Grid2D, solve_H, solve_delta_price, solve_f, solve_zeta
from caragames.market import (PlayerType, SolvableExampleParams, build_solvable_example,
                              constant_complete_model)
from caragames.paths import TimeGrid, simulate

SOLVABLE = dict(mu=0.5, beta=0.3, ell=1.0, m=0.5, rho=-0.5, horizon=1.0, y0=0.5)


@pytest.fixture(scope="session")
def solvable_params():
    return SolvableExampleParams(**SOLVABLE)


@pytest.fixture(scope="session")
def solvable_model(solvable_params):
    return build_solvable_example(solvable_params, y_domain=(0.002, 4.0))


@pytest.fixture(scope="session")
def pde_grid():
    return Grid2D(horizon=1.0, n_t=400, x_lo=0.002, x_hi=4.0, n_x=400)


@pytest.fixture(scope="session")
def f_solution(solvable_model, pde_grid):
    return solve_f(solvable_model, pde_grid)


@pytest.fixture(scope="session")
def zeta_solution(solvable_model, pde_grid):
    return solve_zeta(solvable_model, pde_grid)


@pytest.fixture(scope="session")
def bundle(solvable_model):
    return simulate(solvable_model, TimeGrid(0.0, 1.0, 128), 4000, seed=101)


@pytest.fixture(scope="session")
def complete_model():
    return constant_complete_model(mu=0.07, sigma=0.2, horizon=1.0, s0=1.0)


@pytest.fixture(scope="session")
def complete_grid():
    return Grid2D(horizon=1.0, n_t=400, x_lo=0.02, x_hi=6.0, n_x=600)


def affine_payoff(s):
    return 2.0 + 0.1 * np.asarray(s)


@pytest.fixture(scope="session")
def affine_solutions(complete_model, complete_grid):
    dsol = solve_delta_price(complete_model, affine_payoff, complete_grid)
    hsol = solve_H(complete_model, dsol, complete_grid)
    return dsol, hsol


@pytest.fixture(scope="session")
def complete_bundle(complete_model):
    return simulate(complete_model, TimeGrid(0.0, 1.0, 128), 4000, seed=202)


@pytest.fixture(scope="session")
def three_players():
    return [PlayerType(1.0, 2.0, 0.5), PlayerType(0.5, 1.0, -0.1),
            PlayerType(2.0, 3.0, 0.6)]
