"""Equilibrium strategies, wealth processes, and game values.

Four games are covered: the factor-market (incomplete) N-player game and
its mean-field limit, where strategies are wealth-independent multiples of
a common process, and the complete-market N-player game and mean-field
game with random risk tolerances, where strategies feed back on wealth.
The complete-market games reduce each player to a tilted single-player
problem via the wealth transform x_tilde = x - c * (crowd average); the
single-player solution is computed once and shared, which keeps the
interaction-free cases bit-identical to the stand-alone solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analytic import PDESolution, xi_eta_complete, xi_incomplete
from .errors import NoEquilibrium, ParamError, SampleError
from .market import PlayerType, TypeDistribution, aggregate_stats
from .paths import PathBundle, _cum0

WEALTH_INDEPENDENT = "factor-adapted"
WEALTH_DEPENDENT = "wealth-dependent"


@dataclass(frozen=True)
class ModifiedRiskTolerance:
    """Per-player effective risk tolerances

        delta_bar_i = delta_i + mean_delta * c_i / (1 - mean_c),

    where mean_delta and mean_c are the cross-sectional averages of the
    players' risk tolerances and interaction weights."""

    delta_bar: np.ndarray
    mean_delta: float
    mean_c: float
    delta: np.ndarray
    c: np.ndarray

    @property
    def mean_delta_bar(self) -> float:
        return float(np.mean(self.delta_bar))


@dataclass(frozen=True)
class StrategyPath:
    """Per-path investment amounts at the grid's left endpoints."""

    player: int
    pi: np.ndarray  # (n_paths, n_steps)
    measurability: str


@dataclass(frozen=True)
class EquilibriumReport:
    """Output of one equilibrium computation on a path bundle."""

    times: np.ndarray
    strategies: tuple[StrategyPath, ...]
    wealth: np.ndarray          # (n_players, n_paths, n_steps + 1)
    values: np.ndarray          # (n_players,)
    value_components: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_players(self) -> int:
        return self.wealth.shape[0]

    def pi(self, i: int) -> np.ndarray:
        return self.strategies[i].pi


@dataclass(frozen=True)
class SinglePlayerSolution:
    """Optimal processes for one complete-market player with random risk
    tolerance.  ``phi_log`` holds the cumulative log of the wealth
    propagator, so Phi_{u,s} = exp(phi_log[:, s] - phi_log[:, u])."""

    times: np.ndarray
    delta_t: np.ndarray    # (n_paths, n_steps + 1)
    xi: np.ndarray         # (n_paths, n_steps)
    eta: np.ndarray        # (n_paths, n_steps)
    H_t: np.ndarray        # (n_paths, n_steps + 1)
    pi: np.ndarray         # (n_paths, n_steps)
    wealth: np.ndarray     # (n_paths, n_steps + 1)
    phi_log: np.ndarray    # (n_paths, n_steps + 1)
    delta0: float
    H0: float
    value: float

    def phi(self, u: int, s: int) -> np.ndarray:
        """Propagator Phi_{u,s} between grid indices u <= s."""
        return np.exp(self.phi_log[:, s] - self.phi_log[:, u])


def modified_risk_tolerance(players: Sequence[PlayerType]) -> ModifiedRiskTolerance:
    """Effective risk tolerances for the factor-market game.

    Raises NoEquilibrium when the average interaction weight is 1, which
    forces every c_i = 1: no wealth-independent equilibrium exists there.
    """
    mean_delta, mean_c = aggregate_stats(players)
    if mean_c >= 1.0:
        raise NoEquilibrium(
            "all interaction weights equal 1: no wealth-independent "
            "equilibrium exists"
        )
    delta = np.array([p.constant_delta() for p in players])
    c = np.array([p.c for p in players])
    delta_bar = delta + mean_delta / (1.0 - mean_c) * c
    return ModifiedRiskTolerance(delta_bar=delta_bar, mean_delta=mean_delta,
                                 mean_c=mean_c, delta=delta, c=c)


def reparameterize_interaction(delta_prime: float, c_prime: float,
                               n_players: int) -> tuple[float, float]:
    """Convert benchmark-the-others parameters (delta', c') into the
    average-including-self parameterization used here:

        delta = delta' / (1 + c'/(N-1)),    c = c' / ((N-1)/N + c'/N).
    """
    if n_players < 2:
        raise ParamError("reparameterization needs at least two players")
    d1 = 1.0 + c_prime / (n_players - 1)
    d2 = (n_players - 1) / n_players + c_prime / n_players
    if d1 == 0.0 or d2 == 0.0:
        raise ParamError("degenerate interaction weight: zero denominator")
    return delta_prime / d1, c_prime / d2


def incomplete_common_process(model, bundle: PathBundle,
                              f_solution: PDESolution) -> np.ndarray:
    """The type-independent factor of every factor-market equilibrium
    strategy: lambda/sigma + rho/(1-rho^2) xi/sigma at left grid points."""
    xi = xi_incomplete(model, f_solution, bundle.grid.times[:-1], bundle.y[:, :-1])
    rho = model.rho
    return bundle.lam / bundle.sigma + rho / (1.0 - rho**2) * xi / bundle.sigma


def _incomplete_wealth_kernel(model, bundle, f_solution):
    """Increments (lam + rho/(1-rho^2) xi)(lam h + dW) of the explicit
    wealth integral, shared by every player up to the delta_bar factor."""
    xi = xi_incomplete(model, f_solution, bundle.grid.times[:-1], bundle.y[:, :-1])
    rho = model.rho
    drift_kernel = bundle.lam + rho / (1.0 - rho**2) * xi
    return drift_kernel * (bundle.lam * bundle.grid.h + bundle.dw)


def _value_power(model, f_solution, zeta_solution):
    """M_0^{1/(1-rho^2)} with M_0 = zeta(0, Y_0).

    Taken from the zeta solve when available, otherwise from the identity
    zeta = exp((1 - rho^2) f), which defines the same number.
    """
    if zeta_solution is not None:
        m0 = zeta_solution.at_origin(model.y0)
        return float(m0), float(m0 ** (1.0 / (1.0 - model.rho**2)))
    f0 = f_solution.at_origin(model.y0)
    m0 = float(np.exp((1.0 - model.rho**2) * f0))
    return m0, float(np.exp(f0))


def nplayer_incomplete(players: Sequence[PlayerType], model, bundle: PathBundle,
                       f_solution: PDESolution,
                       zeta_solution: Optional[PDESolution] = None) -> EquilibriumReport:
    """Wealth-independent Nash equilibrium of the factor-market game.

    Strategies: pi_i = delta_bar_i (lam/sigma + rho/(1-rho^2) xi/sigma);
    wealth by the explicit left-point integral; values
    -exp(-(x_i - c_i xbar)/delta_i) M_0^{1/(1-rho^2)}.
    """
    mrt = modified_risk_tolerance(players)
    common = incomplete_common_process(model, bundle, f_solution)
    kernel = _incomplete_wealth_kernel(model, bundle, f_solution)
    kernel_cum = _cum0(kernel)

    n_players = len(players)
    strategies = []
    wealth = np.empty((n_players, bundle.n_paths, bundle.n_steps + 1))
    xbar = float(np.mean([p.x0 for p in players]))
    m0, power = _value_power(model, f_solution, zeta_solution)
    values = np.empty(n_players)
    for i, p in enumerate(players):
        strategies.append(StrategyPath(player=i, pi=mrt.delta_bar[i] * common,
                                       measurability=WEALTH_INDEPENDENT))
        wealth[i] = p.x0 + mrt.delta_bar[i] * kernel_cum
        values[i] = -np.exp(-(p.x0 - p.c * xbar) / mrt.delta[i]) * power

    return EquilibriumReport(
        times=bundle.grid.times,
        strategies=tuple(strategies),
        wealth=wealth,
        values=values,
        value_components={"M0": m0, "value_power": power},
        diagnostics={
            "mean_delta": mrt.mean_delta, "mean_c": mrt.mean_c,
            "delta_bar": mrt.delta_bar, "delta": mrt.delta, "c": mrt.c,
            "wealth_mean": xbar, "common_process": common,
        },
    )


def _mfg_moments(types, moments, n_types, seed):
    if isinstance(types, TypeDistribution):
        dist = types
        return dist.sample(n_types, seed), (dist.mean_delta, dist.mean_c, dist.mean_x)
    if moments is None:
        raise ParamError("explicit type samples need declared moments "
                         "(E[delta], E[c], E[x])")
    return list(types), tuple(float(m) for m in moments)


def mfg_incomplete(types, model, bundle: PathBundle, f_solution: PDESolution,
                   moments: Optional[tuple] = None,
                   zeta_solution: Optional[PDESolution] = None,
                   n_types: int = 1, seed: int = 0) -> EquilibriumReport:
    """Mean-field equilibrium of the factor-market game.

    ``types`` is a TypeDistribution (moments read off, ``n_types``
    representatives drawn) or a list of representative PlayerTypes with
    ``moments = (E[delta], E[c], E[x])`` declared.  Each representative's
    strategy is (delta + E[delta] c / (1 - E[c])) times the common process.
    """
    players, (mean_delta, mean_c, mean_x) = _mfg_moments(types, moments, n_types, seed)
    if mean_c >= 1.0:
        raise NoEquilibrium("E[c] = 1: no wealth-independent mean-field "
                            "equilibrium exists")
    common = incomplete_common_process(model, bundle, f_solution)
    kernel_cum = _cum0(_incomplete_wealth_kernel(model, bundle, f_solution))
    m0, power = _value_power(model, f_solution, zeta_solution)

    n_players = len(players)
    strategies = []
    wealth = np.empty((n_players, bundle.n_paths, bundle.n_steps + 1))
    values = np.empty(n_players)
    coefs = np.empty(n_players)
    for i, p in enumerate(players):
        coefs[i] = p.constant_delta() + mean_delta * p.c / (1.0 - mean_c)
        strategies.append(StrategyPath(player=i, pi=coefs[i] * common,
                                       measurability=WEALTH_INDEPENDENT))
        wealth[i] = p.x0 + coefs[i] * kernel_cum
        values[i] = -np.exp(-(p.x0 - p.c * mean_x) / p.constant_delta()) * power

    return EquilibriumReport(
        times=bundle.grid.times,
        strategies=tuple(strategies),
        wealth=wealth,
        values=values,
        value_components={"M0": m0, "value_power": power},
        diagnostics={
            "mean_delta": mean_delta, "mean_c": mean_c, "mean_x": mean_x,
            "coefficients": coefs, "common_process": common,
        },
    )


def mfg_strategy_coefficient(player: PlayerType, mean_delta: float,
                             mean_c: float) -> float:
    """delta + E[delta] c / (1 - E[c]), the mean-field strategy multiplier."""
    if mean_c >= 1.0:
        raise NoEquilibrium("E[c] = 1: no wealth-independent mean-field "
                            "equilibrium exists")
    return player.constant_delta() + mean_delta * player.c / (1.0 - mean_c)


# ---------------------------------------------------------------------------
# complete market with random risk tolerance
# ---------------------------------------------------------------------------


def _complete_player_inputs(model, bundle: PathBundle, delta_solution: PDESolution,
                            H_solution: PDESolution):
    """Per-path delta_t, H_t (all nodes) and xi, eta (left points)."""
    times = bundle.grid.times
    delta_t = delta_solution.eval(np.broadcast_to(times, bundle.s.shape), bundle.s)
    h_t = H_solution.eval(np.broadcast_to(times, bundle.s.shape), bundle.s)
    xi, eta = xi_eta_complete(delta_solution, H_solution, model,
                              times[:-1], bundle.s[:, :-1])
    delta0 = delta_solution.at_origin(model.s0)
    h0 = H_solution.at_origin(model.s0)
    return delta_t, h_t, xi, eta, delta0, h0


def _tilde_wealth(x0, bundle: PathBundle, delta_left, xi, eta):
    """Closed-form optimal wealth for the tilted single-player problem.

    Discretizes x_s = x Phi_{0,s} + int delta (lam - xi)(lam - eta - xi)
    Phi_{.,s} ds + int delta (lam - eta - xi) Phi_{.,s} dW with left-point
    sums, via the equivalent one-step recursion

        x_{j+1} = g_j (x_j + delta_j (lam_j - xi_j)(lam_j - eta_j - xi_j) h
                          + delta_j (lam_j - eta_j - xi_j) dW_j),
        g_j = exp((lam_j - xi_j/2) xi_j h + xi_j dW_j).

    Returns (wealth, phi_log) with phi_log the cumulative log-propagator.
    """
    lam = bundle.lam
    dw = bundle.dw
    h = bundle.grid.h
    n_paths, n_steps = lam.shape
    phi_incr = (lam - 0.5 * xi) * xi * h + xi * dw
    phi_log = _cum0(phi_incr)
    growth = np.exp(phi_incr)
    drift_term = delta_left * (lam - xi) * (lam - eta - xi) * h
    noise_term = delta_left * (lam - eta - xi) * dw

    x = np.empty((n_paths, n_steps + 1))
    x[:, 0] = x0
    for j in range(n_steps):
        x[:, j + 1] = growth[:, j] * (x[:, j] + drift_term[:, j] + noise_term[:, j])
    return x, phi_log


def _tilde_strategy(bundle: PathBundle, delta_left, xi, eta, x_tilde_left):
    """pi = (delta (lam - eta - xi) + xi x_tilde) / sigma at left points."""
    return (delta_left * (bundle.lam - eta - xi) + xi * x_tilde_left) / bundle.sigma


def single_player_complete(player: PlayerType, model, bundle: PathBundle,
                           delta_solution: PDESolution,
                           H_solution: PDESolution) -> SinglePlayerSolution:
    """Optimal policy, wealth, and value for one complete-market player.

    pi_s = delta_s (lam_s - eta_s - xi_s)/sigma_s + (xi_s/sigma_s) x_s with
    the wealth given in closed form by the propagator representation; the
    value is -exp(-x0/delta_0 - H_0) with delta_0, H_0 from the solved
    fields at (0, S_0).
    """
    delta_t, h_t, xi, eta, delta0, h0 = _complete_player_inputs(
        model, bundle, delta_solution, H_solution)
    delta_left = delta_t[:, :-1]
    wealth, phi_log = _tilde_wealth(player.x0, bundle, delta_left, xi, eta)
    pi = _tilde_strategy(bundle, delta_left, xi, eta, wealth[:, :-1])
    value = -float(np.exp(-player.x0 / delta0 - h0))
    return SinglePlayerSolution(
        times=bundle.grid.times, delta_t=delta_t, xi=xi, eta=eta, H_t=h_t,
        pi=pi, wealth=wealth, phi_log=phi_log, delta0=delta0, H0=h0, value=value,
    )


def nplayer_complete(players: Sequence[PlayerType], model, bundle: PathBundle,
                     solutions: Sequence[tuple[PDESolution, PDESolution]]) -> EquilibriumReport:
    """Nash equilibrium of the complete-market game with random risk
    tolerances.

    Each player's tilted wealth x_tilde follows their single-player closed
    form started at x_i - (c_i/N) sum x_j; the crowd average is recovered
    from Xbar = mean(x_tilde)/(1 - mean_c), wealths as X_i = x_tilde_i +
    c_i Xbar, and strategies from the averaged best-response relation.
    """
    n_players = len(players)
    if len(solutions) != n_players:
        raise ParamError("need one (delta, H) solution pair per player")
    c = np.array([p.c for p in players])
    mean_c = float(np.mean(c))
    if mean_c >= 1.0:
        raise NoEquilibrium(
            "all interaction weights equal 1: no such equilibrium exists"
        )
    x0 = np.array([p.x0 for p in players])
    x_tilde0 = x0 - c * float(np.mean(x0))

    delta_left = []
    xi_list = []
    eta_list = []
    tilde_wealth = []
    tilde_pi = []
    delta0 = np.empty(n_players)
    h0 = np.empty(n_players)
    for i, (p, (dsol, hsol)) in enumerate(zip(players, solutions)):
        d_t, _, xi, eta, d0, hh0 = _complete_player_inputs(model, bundle, dsol, hsol)
        d_left = d_t[:, :-1]
        xw, _ = _tilde_wealth(x_tilde0[i], bundle, d_left, xi, eta)
        tilde_wealth.append(xw)
        tilde_pi.append(_tilde_strategy(bundle, d_left, xi, eta, xw[:, :-1]))
        delta_left.append(d_left)
        xi_list.append(xi)
        eta_list.append(eta)
        delta0[i] = d0
        h0[i] = hh0

    xbar = np.mean(tilde_wealth, axis=0) / (1.0 - mean_c)
    wealth = np.empty((n_players, bundle.n_paths, bundle.n_steps + 1))
    for i in range(n_players):
        wealth[i] = tilde_wealth[i] + c[i] * xbar

    # crowd-average strategy from the averaged best-response relation
    avg_delta = np.mean(delta_left, axis=0)
    avg_delta_vol = np.mean([d * (x + e) for d, x, e in
                             zip(delta_left, xi_list, eta_list)], axis=0)
    avg_wealth_vol = np.mean([wealth[i][:, :-1] * xi_list[i]
                              for i in range(n_players)], axis=0)
    avg_c_vol = np.mean([c[i] * xi_list[i] for i in range(n_players)], axis=0)
    pibar = (bundle.lam * avg_delta - avg_delta_vol + avg_wealth_vol
             - avg_c_vol * xbar[:, :-1]) / (bundle.sigma * (1.0 - mean_c))

    strategies = []
    values = np.empty(n_players)
    for i, p in enumerate(players):
        pi_i = tilde_pi[i] + c[i] * pibar
        strategies.append(StrategyPath(player=i, pi=pi_i,
                                       measurability=WEALTH_DEPENDENT))
        values[i] = -np.exp(-x_tilde0[i] / delta0[i] - h0[i])

    return EquilibriumReport(
        times=bundle.grid.times,
        strategies=tuple(strategies),
        wealth=wealth,
        values=values,
        value_components={"delta0": delta0, "H0": h0},
        diagnostics={
            "mean_c": mean_c, "c": c, "x_tilde0": x_tilde0,
            "crowd_wealth": xbar, "crowd_strategy": pibar,
        },
    )


def mfg_complete(types: Sequence[PlayerType], model, bundle: PathBundle,
                 solutions: Sequence[tuple[PDESolution, PDESolution]],
                 mean_c: float, mean_x: float) -> EquilibriumReport:
    """Mean-field equilibrium of the complete-market game.

    The conditional expectations given the market filtration are estimated
    as cross-sectional averages over the supplied type samples on each
    common noise path: with x_tilde_k the per-type tilted single-player
    wealth started at x_k - c_k E[x], the estimators are

        E[X|F_t]  ~ mean_k(x_tilde_k) / (1 - E[c]),
        E[pi|F_t] ~ mean_k(pi_tilde_k) / (1 - E[c]),

    and X_k = x_tilde_k + c_k E[X|F_t], pi_k = pi_tilde_k + c_k E[pi|F_t].
    Type samples must be independent of the bundle's noise (fresh seed).
    """
    n_types = len(types)
    if n_types < 2:
        raise SampleError("need at least 2 type samples for the cross-sectional "
                          "estimators")
    if len(solutions) != n_types:
        raise ParamError("need one (delta, H) solution pair per type sample")
    if mean_c >= 1.0:
        raise NoEquilibrium("E[c] = 1: no such mean-field equilibrium exists")

    c = np.array([p.c for p in types])
    x_tilde0 = np.array([p.x0 for p in types]) - c * mean_x

    tilde_wealth = []
    tilde_pi = []
    delta0 = np.empty(n_types)
    h0 = np.empty(n_types)
    for i, (p, (dsol, hsol)) in enumerate(zip(types, solutions)):
        d_t, _, xi, eta, d0, hh0 = _complete_player_inputs(model, bundle, dsol, hsol)
        d_left = d_t[:, :-1]
        xw, _ = _tilde_wealth(x_tilde0[i], bundle, d_left, xi, eta)
        tilde_wealth.append(xw)
        tilde_pi.append(_tilde_strategy(bundle, d_left, xi, eta, xw[:, :-1]))
        delta0[i] = d0
        h0[i] = hh0

    cond_wealth = np.mean(tilde_wealth, axis=0) / (1.0 - mean_c)
    cond_pi = np.mean(tilde_pi, axis=0) / (1.0 - mean_c)

    wealth = np.empty((n_types, bundle.n_paths, bundle.n_steps + 1))
    strategies = []
    values = np.empty(n_types)
    for i, p in enumerate(types):
        wealth[i] = tilde_wealth[i] + c[i] * cond_wealth
        strategies.append(StrategyPath(player=i, pi=tilde_pi[i] + c[i] * cond_pi,
                                       measurability=WEALTH_DEPENDENT))
        values[i] = -np.exp(-x_tilde0[i] / delta0[i] - h0[i])

    return EquilibriumReport(
        times=bundle.grid.times,
        strategies=tuple(strategies),
        wealth=wealth,
        values=values,
        value_components={"delta0": delta0, "H0": h0},
        diagnostics={
            "mean_c": mean_c, "mean_x": mean_x, "c": c,
            "cond_mean_wealth": cond_wealth, "cond_mean_strategy": cond_pi,
            "tilde_wealth_mean": np.mean(tilde_wealth, axis=0),
        },
    )
