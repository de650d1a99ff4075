"""Backward parabolic solvers and closed forms behind the equilibria.

Incomplete factor market: the discounting function zeta and its log
transform f (which carries the quadratic-gradient term), with the affine
closed form p(t) y + q(t) for the solvable factor family.  Complete market:
the risk-tolerance price delta(t, S) and the exponent H(t, S).  Solved
fields are evaluated along simulated paths by bilinear interpolation; the
derived processes xi, eta, chi come from those evaluations.

All PDEs march backward from the terminal slice with a theta-weighted
scheme: implicit-weighted diffusion, upwinded drift, and any source or
quadratic-gradient term lagged inside a per-step fixed-point iteration.
Spatial boundaries impose a zero second derivative, so boundary error stays
local; consumers should stay in the grid's interior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded

from .errors import ConvergenceError, ExtrapolationError, ParamError
from .market import IncompleteMarketModel, PlayerType, SolvableExampleParams, check_payoff_positive


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular grid: n_t + 1 time nodes on [0, horizon] and
    n_x + 1 space nodes on [x_lo, x_hi]."""

    horizon: float
    n_t: int
    x_lo: float
    x_hi: float
    n_x: int

    def __post_init__(self):
        if self.n_t < 2 or self.n_x < 2:
            raise ParamError("need n_t >= 2 and n_x >= 2")
        if not self.x_lo < self.x_hi:
            raise ParamError(f"need x_lo < x_hi, got [{self.x_lo}, {self.x_hi}]")
        if self.horizon <= 0.0:
            raise ParamError("horizon must be positive")

    @property
    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_t + 1)

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n_x + 1)

    @property
    def h_t(self) -> float:
        return self.horizon / self.n_t

    @property
    def h_x(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_x

    def refine(self, factor: int = 2) -> "Grid2D":
        return Grid2D(self.horizon, self.n_t * factor, self.x_lo, self.x_hi,
                      self.n_x * factor)


def default_grid(horizon: float, x_samples: np.ndarray, n_t: int = 400,
                 n_x: int = 400, pad: float = 0.20,
                 q_lo: float = 0.001, q_hi: float = 0.999,
                 x_floor: float | None = None) -> Grid2D:
    """Grid whose spatial range covers the [q_lo, q_hi] quantiles of the
    simulated state's marginal, padded by ``pad`` on each side."""
    lo, hi = np.quantile(np.asarray(x_samples, dtype=float).ravel(), [q_lo, q_hi])
    span = hi - lo
    lo -= pad * span
    hi += pad * span
    if x_floor is not None:
        lo = max(lo, x_floor)
    return Grid2D(horizon, n_t, float(lo), float(hi), n_x)


@dataclass(frozen=True)
class PDESolution:
    """A solved field u(t_i, x_j) with its first spatial derivative.

    ``u_x`` is the centered difference of ``u`` at interior nodes and
    one-sided at the edges; the terminal slice equals the imposed terminal
    condition exactly.
    """

    grid: Grid2D
    u: np.ndarray
    u_x: np.ndarray
    equation: str

    def eval(self, t, x) -> np.ndarray:
        return _bilinear(self.grid, self.u, t, x, self.equation)

    def eval_x(self, t, x) -> np.ndarray:
        return _bilinear(self.grid, self.u_x, t, x, self.equation)

    def at_origin(self, x0: float) -> float:
        """Field value at (t=0, x0)."""
        return float(self.eval(0.0, x0))


def _spatial_derivative(u: np.ndarray, h_x: float) -> np.ndarray:
    ux = np.empty_like(u)
    ux[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * h_x)
    ux[..., 0] = (u[..., 1] - u[..., 0]) / h_x
    ux[..., -1] = (u[..., -1] - u[..., -2]) / h_x
    return ux


def _bilinear(grid: Grid2D, field: np.ndarray, t, x, label: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    tol_t = 1e-9 * max(grid.horizon, 1.0)
    tol_x = 1e-9 * max(grid.x_hi - grid.x_lo, 1.0)
    if np.any(t < -tol_t) or np.any(t > grid.horizon + tol_t):
        raise ExtrapolationError(f"time query outside [0, {grid.horizon}] for {label}")
    if np.any(x < grid.x_lo - tol_x) or np.any(x > grid.x_hi + tol_x):
        bad_lo = float(np.min(x))
        bad_hi = float(np.max(x))
        raise ExtrapolationError(
            f"spatial query range [{bad_lo}, {bad_hi}] leaves the grid "
            f"[{grid.x_lo}, {grid.x_hi}] for {label}"
        )
    ft = np.clip((t - 0.0) / grid.h_t, 0.0, grid.n_t)
    fx = np.clip((x - grid.x_lo) / grid.h_x, 0.0, grid.n_x)
    it = np.minimum(ft.astype(np.int64), grid.n_t - 1)
    ix = np.minimum(fx.astype(np.int64), grid.n_x - 1)
    wt = ft - it
    wx = fx - ix
    f00 = field[it, ix]
    f01 = field[it, ix + 1]
    f10 = field[it + 1, ix]
    f11 = field[it + 1, ix + 1]
    return ((1 - wt) * ((1 - wx) * f00 + wx * f01)
            + wt * ((1 - wx) * f10 + wx * f11))


def _operator_bands(a_diff, b_drift, r_react, h_x, n):
    """Tridiagonal bands of L = A d_xx + B d_x - R with upwinded drift and a
    zero-second-derivative boundary row at each end."""
    b_plus = np.maximum(b_drift, 0.0)
    b_minus = np.minimum(b_drift, 0.0)
    sub = a_diff / h_x**2 - b_minus / h_x
    diag = -2.0 * a_diff / h_x**2 + (b_minus - b_plus) / h_x - r_react
    sup = a_diff / h_x**2 + b_plus / h_x
    # boundary rows: drop the diffusion term, one-sided drift into the domain
    sub = sub.copy()
    diag = diag.copy()
    sup = sup.copy()
    diag[0] = -b_drift[0] / h_x - r_react[0]
    sup[0] = b_drift[0] / h_x
    sub[0] = 0.0
    diag[n] = b_drift[n] / h_x - r_react[n]
    sub[n] = -b_drift[n] / h_x
    sup[n] = 0.0
    return sub, diag, sup


def _apply_operator(sub, diag, sup, u):
    out = diag * u
    out[1:] += sub[1:] * u[:-1]
    out[:-1] += sup[:-1] * u[1:]
    return out


def _banded_matrix(sub, diag, sup, scale, shift):
    """Banded storage of (shift * I + scale * L) for solve_banded."""
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = scale * sup[:-1]
    ab[1, :] = shift + scale * diag
    ab[2, :-1] = scale * sub[1:]
    return ab


def _solve_backward(grid: Grid2D, coef_fn: Callable, terminal: np.ndarray,
                    equation: str, theta: float = 0.5,
                    nonlinear_coef_fn: Callable | None = None,
                    fp_tol: float = 1e-12, max_iter: int = 50) -> PDESolution:
    """March u_t + A u_xx + B u_x - R u + C + N_coef * u_x^2 = 0 backward.

    ``coef_fn(t) -> (A, B, R, C)`` returns nodal coefficient arrays, and is
    evaluated at the midpoint of each step.  When ``nonlinear_coef_fn`` is
    given, the quadratic-gradient term is lagged and iterated to ``fp_tol``
    within each step.
    """
    x = grid.x_nodes
    n = grid.n_x
    h_t = grid.h_t
    h_x = grid.h_x
    u = np.empty((grid.n_t + 1, n + 1))
    u[-1] = terminal
    t_nodes = grid.t_nodes

    for k in range(grid.n_t - 1, -1, -1):
        t_mid = 0.5 * (t_nodes[k] + t_nodes[k + 1])
        a_diff, b_drift, r_react, c_src = coef_fn(t_mid, x)
        sub, diag, sup = _operator_bands(a_diff, b_drift, r_react, h_x, n)
        u_next = u[k + 1]
        explicit = u_next + h_t * (1.0 - theta) * _apply_operator(sub, diag, sup, u_next)
        ab = _banded_matrix(sub, diag, sup, -h_t * theta, 1.0)

        if nonlinear_coef_fn is None:
            u[k] = solve_banded((1, 1), ab, explicit + h_t * c_src)
            continue

        n_coef = nonlinear_coef_fn(t_mid, x)
        ux_next = _spatial_derivative(u_next, h_x)
        u_curr = u_next
        for it in range(max_iter):
            ux_bar = theta * _spatial_derivative(u_curr, h_x) + (1.0 - theta) * ux_next
            rhs = explicit + h_t * (c_src + n_coef * ux_bar**2)
            u_new = solve_banded((1, 1), ab, rhs)
            gap = float(np.max(np.abs(u_new - u_curr)))
            u_curr = u_new
            if gap <= fp_tol:
                break
        else:
            raise ConvergenceError(
                f"{equation}: lagged-term fixed point did not contract within "
                f"{max_iter} iterations at t = {t_nodes[k]:.6g} (last gap {gap:.3g})"
            )
        u[k] = u_curr

    if not np.all(np.isfinite(u)):
        raise ConvergenceError(f"{equation}: solution became non-finite")
    return PDESolution(grid=grid, u=u, u_x=_spatial_derivative(u, h_x), equation=equation)


def solve_f(model: IncompleteMarketModel, grid: Grid2D, theta: float = 0.5,
            fp_tol: float = 1e-12, max_iter: int = 50) -> PDESolution:
    """Log-transformed discounting field f for the factor market:

        f_t + 1/2 a^2 f_yy + (b - rho lam a) f_y
            + 1/2 (1 - rho^2) a^2 f_y^2 = 1/2 lam^2,   f(T, y) = 0.
    """
    rho = model.rho
    one_m_rho2 = 1.0 - rho**2

    def coef(t, y):
        a = np.asarray(model.a(t, y), dtype=float)
        lam = np.asarray(model.sharpe(t, y), dtype=float)
        drift = np.asarray(model.b(t, y), dtype=float) - rho * lam * a
        return 0.5 * a**2, drift, np.zeros_like(a), -0.5 * lam**2

    def nl_coef(t, y):
        a = np.asarray(model.a(t, y), dtype=float)
        return 0.5 * one_m_rho2 * a**2

    terminal = np.zeros(grid.n_x + 1)
    return _solve_backward(grid, coef, terminal, "f", theta=theta,
                           nonlinear_coef_fn=nl_coef, fp_tol=fp_tol, max_iter=max_iter)


def solve_zeta(model: IncompleteMarketModel, grid: Grid2D,
               theta: float = 0.5) -> PDESolution:
    """Discounting field zeta for the factor market:

        zeta_t + 1/2 a^2 zeta_yy + (b - rho lam a) zeta_y
            = 1/2 (1 - rho^2) lam^2 zeta,   zeta(T, y) = 1.
    """
    rho = model.rho
    one_m_rho2 = 1.0 - rho**2

    def coef(t, y):
        a = np.asarray(model.a(t, y), dtype=float)
        lam = np.asarray(model.sharpe(t, y), dtype=float)
        drift = np.asarray(model.b(t, y), dtype=float) - rho * lam * a
        react = 0.5 * one_m_rho2 * lam**2
        return 0.5 * a**2, drift, react, np.zeros_like(a)

    terminal = np.ones(grid.n_x + 1)
    return _solve_backward(grid, coef, terminal, "zeta", theta=theta)


def solve_delta_price(model, player_or_payoff, grid: Grid2D,
                      theta: float = 0.5, delta_lo: float = 1e-12) -> PDESolution:
    """Arbitrage-free price of the risk-tolerance claim delta(S_T):

        delta_t + 1/2 sigma^2 S^2 delta_SS = 0,   delta(T, S) = delta(S).
    """
    if isinstance(player_or_payoff, PlayerType):
        player = player_or_payoff
    else:
        player = PlayerType(x0=0.0, delta=player_or_payoff, c=0.0)
    check_payoff_positive(player, grid.x_nodes, delta_lo=delta_lo)

    def coef(t, s):
        sig = np.asarray(model.sigma(t, s), dtype=float)
        zeros = np.zeros_like(sig)
        return 0.5 * sig**2 * s**2, zeros, zeros, zeros

    terminal = player.terminal_delta(grid.x_nodes)
    return _solve_backward(grid, coef, terminal, "delta", theta=theta)


def solve_H(model, delta_solution: PDESolution, grid: Grid2D,
            theta: float = 0.5) -> PDESolution:
    """Exponent field H for the random-risk-tolerance problem:

        H_t + 1/2 sigma^2 S^2 H_SS + (sigma^2 S^2 delta_S / delta) H_S
            + 1/2 (lam - sigma S delta_S / delta)^2 = 0,   H(T, S) = 0.

    Must be solved on the same grid as ``delta_solution``.
    """
    if delta_solution.grid != grid:
        raise ParamError("H must be solved on the delta solution's grid")
    if np.min(delta_solution.u) <= 0.0:
        raise ParamError("delta price must stay positive on the whole grid")

    def coef(t, s):
        sig = np.asarray(model.sigma(t, s), dtype=float)
        lam = np.asarray(model.sharpe(t, s), dtype=float)
        delta = delta_solution.eval(t, s)
        delta_s = delta_solution.eval_x(t, s)
        ratio = sig * s * delta_s / delta
        drift = sig * s * ratio
        source = 0.5 * (lam - ratio) ** 2
        return 0.5 * sig**2 * s**2, drift, np.zeros_like(sig), source

    terminal = np.zeros(grid.n_x + 1)
    return _solve_backward(grid, coef, terminal, "H", theta=theta)


@dataclass(frozen=True)
class RiccatiSolution:
    """Closed-form p(t), q(t) for the solvable factor family, where
    f(t, y) = p(t) y + q(t), p(T) = q(T) = 0."""

    params: SolvableExampleParams
    delta: float

    def p(self, t):
        pr = self.params
        root = np.sqrt(self.delta)
        base = 1.0 + pr.rho * pr.mu * pr.beta
        denom0 = base + root
        if denom0 == 0.0:
            raise ParamError("degenerate parameters: 1 + rho mu beta + sqrt(delta) = 0")
        ratio = (base - root) / denom0
        decay = np.exp(-root * (pr.horizon - np.asarray(t, dtype=float)))
        return ((base - root) / ((1.0 - pr.rho**2) * pr.beta**2)
                * (1.0 - decay) / (1.0 - ratio * decay))

    def q(self, t):
        pr = self.params
        t_arr = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t_arr).ravel()
        # adaptive quadrature of the closed-form p
        vals = np.array([
            pr.m * quad(lambda s: float(self.p(s)), ti, pr.horizon,
                        epsabs=1e-10, limit=200)[0]
            for ti in flat
        ])
        return vals.reshape(t_arr.shape) if t_arr.shape else float(vals[0])

    def f(self, t, y):
        return self.p(t) * np.asarray(y, dtype=float) + self.q(t)

    def p_dot(self, t, dt: float = 1e-6):
        return (self.p(np.asarray(t) + dt) - self.p(np.asarray(t) - dt)) / (2.0 * dt)

    def ode_residual(self, t):
        """Residual of p' = 1/2 (mu + rho beta p)^2 + p - 1/2 beta^2 p^2."""
        pr = self.params
        p = self.p(t)
        return self.p_dot(t) - (0.5 * (pr.mu + pr.rho * pr.beta * p) ** 2
                                + p - 0.5 * pr.beta**2 * p**2)


def solve_riccati(params: SolvableExampleParams) -> RiccatiSolution:
    """Closed-form affine solution for the solvable factor family."""
    delta = params.discriminant
    base = 1.0 + params.rho * params.mu * params.beta
    if base + np.sqrt(delta) == 0.0:
        raise ParamError("degenerate parameters: 1 + rho mu beta + sqrt(delta) = 0")
    return RiccatiSolution(params=params, delta=delta)


def xi_incomplete(model: IncompleteMarketModel, f_solution: PDESolution,
                  times, y) -> np.ndarray:
    """Volatility of the discounting martingale along a factor path:
    xi_t = (1 - rho^2) a(t, Y_t) f_y(t, Y_t)."""
    times_b = np.broadcast_to(np.asarray(times, dtype=float), np.shape(y))
    f_y = f_solution.eval_x(times_b, y)
    a = np.asarray(model.a(times_b, y), dtype=float)
    return (1.0 - model.rho**2) * a * f_y


def xi_eta_complete(delta_solution: PDESolution, H_solution: PDESolution,
                    model, times, s) -> tuple[np.ndarray, np.ndarray]:
    """Lognormal volatility of the risk-tolerance price and of the exponent
    martingale along a stock path:

        xi_t  = (delta_S / delta)(t, S_t) S_t sigma(t, S_t)
        eta_t = H_S(t, S_t) S_t sigma(t, S_t)
    """
    times_b = np.broadcast_to(np.asarray(times, dtype=float), np.shape(s))
    s = np.asarray(s, dtype=float)
    sig = np.asarray(model.sigma(times_b, s), dtype=float)
    delta = delta_solution.eval(times_b, s)
    delta_s = delta_solution.eval_x(times_b, s)
    h_s = H_solution.eval_x(times_b, s)
    xi = delta_s / delta * s * sig
    eta = h_s * s * sig
    return xi, eta


def me_chi(model: IncompleteMarketModel, f_solution: PDESolution,
           bundle) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal kernel of the minimal entropy measure and its log-density.

    chi_t = -sqrt(1 - rho^2) a(t, Y_t) f_y(t, Y_t); the log-density is
    accumulated along each path as

        -1/2 sum (lam^2 + chi^2) h - sum lam dW - sum chi dW_perp.
    """
    times = bundle.grid.times[:-1]
    y_left = bundle.y[:, :-1]
    times_b = np.broadcast_to(times, y_left.shape)
    f_y = f_solution.eval_x(times_b, y_left)
    a = np.asarray(model.a(times_b, y_left), dtype=float)
    chi = -np.sqrt(1.0 - model.rho**2) * a * f_y
    h = bundle.grid.h
    log_density = (
        -0.5 * ((bundle.lam**2 + chi**2) * h).sum(axis=1)
        - (bundle.lam * bundle.dw).sum(axis=1)
        - (chi * bundle.dw_perp).sum(axis=1)
    )
    return chi, log_density
