import numpy as np
import pytest

from caragames.analytic import solve_H, solve_delta_price, xi_eta_complete
from caragames.errors import NoEquilibrium, ParamError, SampleError
from caragames.games import (mfg_complete, modified_risk_tolerance,
                             nplayer_complete, single_player_complete)
from caragames.market import PlayerType
from caragames.paths import TimeGrid, coarsen, simulate


def affine(s):
    return 2.0 + 0.1 * np.asarray(s)


@pytest.fixture(scope="module")
def player(complete_model):
    return PlayerType(x0=1.0, delta=affine, c=0.0)


@pytest.fixture(scope="module")
def solution(player, complete_model, complete_bundle, affine_solutions):
    dsol, hsol = affine_solutions
    return single_player_complete(player, complete_model, complete_bundle,
                                  dsol, hsol)


# -- single player ------------------------------------------------------------


def test_constant_delta_reduces_to_merton(complete_model, complete_grid,
                                          complete_bundle):
    dsol = solve_delta_price(complete_model, lambda s: 2.0 + 0.0 * s, complete_grid)
    hsol = solve_H(complete_model, dsol, complete_grid)
    p = PlayerType(x0=1.0, delta=2.0, c=0.0)
    sol = single_player_complete(p, complete_model, complete_bundle, dsol, hsol)
    # xi = eta = 0 and lam, sigma constant: pi = delta lam / sigma everywhere
    np.testing.assert_allclose(sol.pi, 2.0 * 0.35 / 0.2, atol=1e-9)
    assert np.max(np.abs(sol.xi)) <= 1e-12
    assert np.max(np.abs(sol.eta)) <= 1e-9


def test_initial_conditions(complete_model, complete_bundle, affine_solutions):
    dsol, hsol = affine_solutions
    p = PlayerType(x0=0.0, delta=affine, c=0.0)
    sol = single_player_complete(p, complete_model, complete_bundle, dsol, hsol)
    assert np.all(sol.wealth[:, 0] == 0.0)
    assert np.all(sol.phi(3, 3) == 1.0)


def test_value_formula_components(solution):
    assert solution.delta0 == pytest.approx(2.1, rel=1e-10)
    assert solution.value == pytest.approx(-np.exp(-1.0 / solution.delta0
                                                   - solution.H0), rel=1e-14)
    assert solution.value < 0.0


def test_terminal_H_and_delta(solution, complete_bundle):
    assert np.max(np.abs(solution.H_t[:, -1])) == 0.0
    np.testing.assert_allclose(solution.delta_t[:, -1],
                               affine(complete_bundle.s[:, -1]), rtol=1e-12)


def test_terminal_value_consistency(solution, complete_bundle):
    # -exp(-x_T/delta_t(T) - H_T) equals -exp(-x_T/delta(S_T)) path by path
    lhs = -np.exp(-solution.wealth[:, -1] / solution.delta_t[:, -1]
                  - solution.H_t[:, -1])
    rhs = -np.exp(-solution.wealth[:, -1] / affine(complete_bundle.s[:, -1]))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_phi_cocycle(solution):
    phi_ab = solution.phi(10, 50)
    phi_bc = solution.phi(50, 90)
    phi_ac = solution.phi(10, 90)
    assert np.max(np.abs(phi_ab * phi_bc - phi_ac)) <= 1e-12 * np.max(np.abs(phi_ac))


def test_strategy_matches_feedback_form(solution, complete_bundle):
    b = complete_bundle
    expected = (solution.delta_t[:, :-1] * (b.lam - solution.eta - solution.xi)
                + solution.xi * solution.wealth[:, :-1]) / b.sigma
    assert np.array_equal(solution.pi, expected)


def test_closed_form_vs_euler_strong_order(player, complete_model,
                                           affine_solutions):
    dsol, hsol = affine_solutions
    fine = simulate(complete_model, TimeGrid(0.0, 1.0, 512), 300, seed=31)
    gaps, hs = [], []
    for factor in (8, 4, 2, 1):
        b = coarsen(complete_model, fine, factor)
        sol = single_player_complete(player, complete_model, b, dsol, hsol)
        x = np.full(b.n_paths, player.x0)
        for j in range(b.n_steps):
            pi = (sol.delta_t[:, j] * (b.lam[:, j] - sol.eta[:, j] - sol.xi[:, j])
                  + sol.xi[:, j] * x) / b.sigma[:, j]
            x = x + pi * b.sigma[:, j] * (b.lam[:, j] * b.grid.h + b.dw[:, j])
        gaps.append(np.max(np.abs(sol.wealth[:, -1] - x)))
        hs.append(b.grid.h)
    slope = np.polyfit(np.log(hs), np.log(gaps), 1)[0]
    assert slope >= 0.4
    assert gaps[-1] < gaps[0]


# -- N-player -----------------------------------------------------------------


@pytest.fixture(scope="module")
def hetero_setup(complete_model, complete_grid):
    payoffs = [affine, lambda s: 1.5 + 0.05 * np.sqrt(s), lambda s: 0.5 + 0.2 * s]
    players = [PlayerType(1.0, payoffs[0], 0.5), PlayerType(0.5, payoffs[1], -0.2),
               PlayerType(2.0, payoffs[2], 0.7)]
    solutions = []
    for f in payoffs:
        d = solve_delta_price(complete_model, f, complete_grid)
        solutions.append((d, solve_H(complete_model, d, complete_grid)))
    return players, solutions


def test_nplayer_fixed_point_residual(hetero_setup, complete_model, complete_bundle):
    players, solutions = hetero_setup
    report = nplayer_complete(players, complete_model, complete_bundle, solutions)
    n = len(players)
    sum_x = np.sum([report.wealth[j] for j in range(n)], axis=0)
    sum_pi = np.sum([report.pi(j) for j in range(n)], axis=0)
    b = complete_bundle
    t_left = b.grid.times[:-1]
    for i, p in enumerate(players):
        dsol, hsol = solutions[i]
        d_t = dsol.eval(np.broadcast_to(t_left, b.s[:, :-1].shape), b.s[:, :-1])
        xi, eta = xi_eta_complete(dsol, hsol, complete_model, t_left, b.s[:, :-1])
        x_tilde = report.wealth[i][:, :-1] - (p.c / n) * sum_x[:, :-1]
        rhs = (d_t * (b.lam - eta - xi) + xi * x_tilde) / b.sigma \
            + (p.c / n) * sum_pi
        assert np.max(np.abs(report.pi(i) - rhs)) <= 1e-10


def test_nplayer_no_interaction_reduces_bitwise(hetero_setup, complete_model,
                                                complete_bundle):
    players, solutions = hetero_setup
    solo_players = [PlayerType(p.x0, p.delta, 0.0) for p in players]
    report = nplayer_complete(solo_players, complete_model, complete_bundle,
                              solutions)
    for i, p in enumerate(solo_players):
        single = single_player_complete(p, complete_model, complete_bundle,
                                        solutions[i][0], solutions[i][1])
        assert np.array_equal(report.wealth[i], single.wealth)
        assert np.array_equal(report.pi(i), single.pi)
        assert report.values[i] == single.value


def test_nplayer_constant_deltas_match_factor_market_formula(
        complete_model, complete_grid, complete_bundle):
    # equal constant risk tolerances and deterministic lam: the strategies
    # collapse to delta_bar_i lam / sigma, the interaction-game formula
    # without correlation terms
    dsol = solve_delta_price(complete_model, lambda s: 2.0 + 0.0 * s, complete_grid)
    hsol = solve_H(complete_model, dsol, complete_grid)
    cs = (0.5, -0.2, 0.7)
    players = [PlayerType(1.0, 2.0, c) for c in cs]
    report = nplayer_complete(players, complete_model, complete_bundle,
                              [(dsol, hsol)] * 3)
    mrt = modified_risk_tolerance(players)
    for i in range(3):
        np.testing.assert_allclose(report.pi(i), mrt.delta_bar[i] * 0.35 / 0.2,
                                   atol=1e-9)


def test_nplayer_values_and_wealth_start(hetero_setup, complete_model,
                                         complete_bundle):
    players, solutions = hetero_setup
    report = nplayer_complete(players, complete_model, complete_bundle, solutions)
    assert np.all(report.values < 0.0)
    x0 = np.array([p.x0 for p in players])
    x_tilde0 = x0 - np.array([p.c for p in players]) * x0.mean()
    for i in range(3):
        np.testing.assert_allclose(report.wealth[i][:, 0], x0[i], rtol=1e-12)
    np.testing.assert_allclose(report.diagnostics["x_tilde0"], x_tilde0, rtol=1e-14)


def test_nplayer_rejects_all_ones(hetero_setup, complete_model, complete_bundle):
    players, solutions = hetero_setup
    bad = [PlayerType(p.x0, p.delta, 1.0) for p in players]
    with pytest.raises(NoEquilibrium):
        nplayer_complete(bad, complete_model, complete_bundle, solutions)


def test_nplayer_needs_matching_solutions(hetero_setup, complete_model,
                                          complete_bundle):
    players, solutions = hetero_setup
    with pytest.raises(ParamError):
        nplayer_complete(players, complete_model, complete_bundle, solutions[:2])


# -- mean-field ---------------------------------------------------------------


def test_mfg_degenerate_type_matches_single_player(complete_model,
                                                   complete_bundle,
                                                   affine_solutions):
    p = PlayerType(1.0, affine, 0.0)
    report = mfg_complete([p, p], complete_model, complete_bundle,
                          [affine_solutions, affine_solutions],
                          mean_c=0.0, mean_x=1.0)
    single = single_player_complete(p, complete_model, complete_bundle,
                                    *affine_solutions)
    for i in range(2):
        assert np.max(np.abs(report.wealth[i] - single.wealth)) <= 1e-10
        assert np.max(np.abs(report.pi(i) - single.pi)) <= 1e-10


def test_mfg_constant_delta_matches_factor_market_formula(
        complete_model, complete_grid, complete_bundle):
    # constant delta_T across types and deterministic lam: xi = eta = 0 and
    # pi = (delta + E[delta] c / (1 - E[c])) lam / sigma
    dsol = solve_delta_price(complete_model, lambda s: 2.0 + 0.0 * s, complete_grid)
    hsol = solve_H(complete_model, dsol, complete_grid)
    types = [PlayerType(1.0, 2.0, 0.5), PlayerType(1.0, 2.0, 0.5)]
    report = mfg_complete(types, complete_model, complete_bundle,
                          [(dsol, hsol)] * 2, mean_c=0.5, mean_x=1.0)
    coef = 2.0 + 2.0 * 0.5 / 0.5
    np.testing.assert_allclose(report.pi(0), coef * 0.35 / 0.2, atol=1e-8)


def test_mfg_internal_estimator_identity(complete_model, complete_grid,
                                         complete_bundle):
    payoffs = [affine, lambda s: 1.0 + 0.3 * np.sqrt(s)]
    sols = []
    for f in payoffs:
        d = solve_delta_price(complete_model, f, complete_grid)
        sols.append((d, solve_H(complete_model, d, complete_grid)))
    types = [PlayerType(1.0, payoffs[0], 0.4), PlayerType(0.5, payoffs[1], -0.3)]
    report = mfg_complete(types, complete_model, complete_bundle, sols,
                          mean_c=0.05, mean_x=0.75)
    cond = report.diagnostics["cond_mean_wealth"]
    c = report.diagnostics["c"]
    recovered = np.mean([report.wealth[i] - c[i] * cond for i in range(2)], axis=0)
    target = report.diagnostics["tilde_wealth_mean"]
    assert np.max(np.abs(recovered - target)) <= 1e-10


def test_mfg_guards(complete_model, complete_bundle, affine_solutions):
    p = PlayerType(1.0, affine, 0.0)
    with pytest.raises(SampleError):
        mfg_complete([p], complete_model, complete_bundle, [affine_solutions],
                     mean_c=0.0, mean_x=1.0)
    with pytest.raises(NoEquilibrium):
        mfg_complete([p, p], complete_model, complete_bundle,
                     [affine_solutions, affine_solutions], mean_c=1.0, mean_x=1.0)
