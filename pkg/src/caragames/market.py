"""Market models, player types, and type distributions.

Two market shapes are supported: a single-stochastic-factor model with an
imperfectly correlated factor (incomplete market), and a one-asset model
whose coefficients depend on the stock itself (complete market).  Players
carry an initial wealth, a risk tolerance (a positive constant, or a
terminal payoff ``delta(S)`` in the complete case), and an interaction
weight ``c <= 1`` (``c > 0`` competition toward the crowd's average wealth,
``c < 0`` homophily).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DomainError, ParamError

Coefficient = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_coefficient(value) -> Coefficient:
    """Wrap a constant as a two-argument coefficient function."""
    if callable(value):
        return value
    const = float(value)

    def fn(t, x):
        return np.full(np.broadcast_shapes(np.shape(t), np.shape(x)), const)

    fn.expression = repr(const)
    return fn


@dataclass(frozen=True)
class IncompleteMarketModel:
    """Single-factor market: dS = mu(t,Y) S dt + sigma(t,Y) S dW,
    dY = b(t,Y) dt + a(t,Y) dW^Y, with corr(W, W^Y) = rho.

    ``y_domain`` is the declared open domain on which coefficient bounds are
    meant to hold; validation samples it and simulation clamps Y at
    ``y_clip`` before coefficients are evaluated (square-root coefficients
    are not defined below zero, and Euler steps can cross it).
    """

    mu: Coefficient
    sigma: Coefficient
    b: Coefficient
    a: Coefficient
    rho: float
    horizon: float
    y0: float
    s0: float = 1.0
    y_domain: tuple[float, float] = (1e-6, np.inf)
    y_clip: float = 1e-6
    sharpe_fn: Optional[Coefficient] = None

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ParamError(f"rho must lie strictly inside (-1, 1), got {self.rho}")
        if self.horizon <= 0.0:
            raise ParamError(f"horizon must be positive, got {self.horizon}")
        if self.y_domain[0] >= self.y_domain[1]:
            raise ParamError(f"empty y_domain {self.y_domain}")

    @property
    def is_complete(self) -> bool:
        return False

    def sharpe(self, t, y):
        """Sharpe ratio lambda(t, y), by default mu / sigma.

        Families whose ratio simplifies (the solvable family's is
        mu sqrt(y) for every ell) supply the simplified form directly, so
        the value does not inherit rounding from the two power evaluations.
        """
        if self.sharpe_fn is not None:
            return np.asarray(self.sharpe_fn(t, y))
        return np.asarray(self.mu(t, y)) / np.asarray(self.sigma(t, y))


@dataclass(frozen=True)
class CompleteMarketModel:
    """One-asset market: dS = mu(t,S) S dt + sigma(t,S) S dW."""

    mu: Coefficient
    sigma: Coefficient
    horizon: float
    s0: float = 1.0

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ParamError(f"horizon must be positive, got {self.horizon}")
        if self.s0 <= 0.0:
            raise ParamError(f"s0 must be positive, got {self.s0}")

    @property
    def is_complete(self) -> bool:
        return True

    def sharpe(self, t, s):
        return np.asarray(self.mu(t, s)) / np.asarray(self.sigma(t, s))


def constant_complete_model(mu: float, sigma: float, horizon: float,
                            s0: float = 1.0) -> CompleteMarketModel:
    """Complete market with constant drift and volatility."""
    if sigma <= 0.0:
        raise ParamError(f"sigma must be positive, got {sigma}")
    return CompleteMarketModel(
        mu=_as_coefficient(mu), sigma=_as_coefficient(sigma), horizon=horizon, s0=s0
    )


@dataclass(frozen=True)
class SolvableExampleParams:
    """Parameters of the autonomous factor family

        mu(t,y) = mu * y^(1/(2 ell) + 1/2),  sigma(t,y) = y^(1/(2 ell)),
        b(t,y)  = m - y,                     a(t,y)     = beta * sqrt(y),

    whose Sharpe ratio is mu*sqrt(y) for every ell.  ``ell = 1`` is the
    Heston volatility model.  Requires mu > 0, beta > 0, ell != 0,
    m > beta^2/2, and the discriminant 1 + beta^2 mu^2 + 2 rho mu beta > 0.
    """

    mu: float
    beta: float
    ell: float
    m: float
    rho: float
    horizon: float
    y0: float = 0.5
    s0: float = 1.0

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ParamError(f"mu must be positive, got {self.mu}")
        if self.beta <= 0.0:
            raise ParamError(f"beta must be positive, got {self.beta}")
        if self.ell == 0.0:
            raise ParamError("ell must be nonzero")
        if self.m <= 0.5 * self.beta**2:
            raise ParamError(f"m must exceed beta^2/2 = {0.5 * self.beta ** 2}, got {self.m}")
        if not -1.0 < self.rho < 1.0:
            raise ParamError(f"rho must lie strictly inside (-1, 1), got {self.rho}")
        if self.discriminant <= 0.0:
            raise ParamError(f"discriminant must be positive, got {self.discriminant}")
        if self.horizon <= 0.0:
            raise ParamError(f"horizon must be positive, got {self.horizon}")

    @property
    def discriminant(self) -> float:
        return 1.0 + self.beta**2 * self.mu**2 + 2.0 * self.rho * self.mu * self.beta


def build_solvable_example(params: SolvableExampleParams,
                           y_domain: tuple[float, float] = (0.01, 4.0),
                           y_clip: float = 1e-6) -> IncompleteMarketModel:
    """Instantiate the solvable factor family as an IncompleteMarketModel.

    The power coefficients are unbounded as y -> 0 or y -> infinity, so the
    bound checks only apply on the declared ``y_domain`` and simulated
    factors are clamped at ``y_clip``.
    """
    mu_, ell = params.mu, params.ell
    beta, m = params.beta, params.m

    def mu(t, y):
        return mu_ * np.power(y, 0.5 / ell + 0.5)

    def sigma(t, y):
        return np.power(y, 0.5 / ell)

    def b(t, y):
        return m - np.asarray(y, dtype=float)

    def a(t, y):
        return beta * np.sqrt(y)

    def sharpe(t, y):
        return mu_ * np.sqrt(y)

    mu.expression = f"{mu_} * y^{0.5 / ell + 0.5}"
    sigma.expression = f"y^{0.5 / ell}"
    b.expression = f"{m} - y"
    a.expression = f"{beta} * sqrt(y)"
    sharpe.expression = f"{mu_} * sqrt(y)"
    return IncompleteMarketModel(
        mu=mu, sigma=sigma, b=b, a=a, rho=params.rho, horizon=params.horizon,
        y0=params.y0, s0=params.s0, y_domain=y_domain, y_clip=y_clip,
        sharpe_fn=sharpe,
    )


RiskTolerance = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PlayerType:
    """One player's (initial wealth, risk tolerance, interaction weight).

    ``delta`` is either a positive constant or a terminal payoff function
    ``delta(S)`` of the stock price at the horizon.  Functional tolerances
    are only meaningful in the complete market; factor-market operations
    reject them.
    """

    x0: float
    delta: RiskTolerance
    c: float

    def __post_init__(self):
        if self.c > 1.0:
            raise ParamError(f"interaction weight must satisfy c <= 1, got {self.c}")
        if not callable(self.delta) and float(self.delta) <= 0.0:
            raise ParamError(f"constant risk tolerance must be positive, got {self.delta}")

    @property
    def has_constant_delta(self) -> bool:
        return not callable(self.delta)

    def constant_delta(self) -> float:
        if callable(self.delta):
            raise ParamError("player has a functional risk tolerance; a constant is required here")
        return float(self.delta)

    def terminal_delta(self, s_terminal):
        """Evaluate delta_T, whichever representation the player carries."""
        if callable(self.delta):
            return np.asarray(self.delta(s_terminal), dtype=float)
        return np.full(np.shape(s_terminal), float(self.delta))


def check_payoff_positive(player: PlayerType, s_grid: np.ndarray,
                          delta_lo: float = 1e-12) -> None:
    """Require delta(S) >= delta_lo on a sampled grid (functional players)."""
    vals = player.terminal_delta(np.asarray(s_grid, dtype=float))
    if not np.all(np.isfinite(vals)):
        raise ParamError("risk tolerance payoff is non-finite on the sampled grid")
    lo = float(np.min(vals))
    if lo < delta_lo:
        raise ParamError(
            f"risk tolerance payoff must be bounded below by a positive constant; "
            f"minimum {lo} on the sampled grid"
        )


class _Marginal:
    """One coordinate of a type distribution with declared exact moments."""

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    mean: float
    var: float


@dataclass(frozen=True)
class Constant(_Marginal):
    value: float

    @property
    def mean(self) -> float:
        return self.value

    @property
    def var(self) -> float:
        return 0.0

    def sample(self, rng, n):
        return np.full(n, self.value)


@dataclass(frozen=True)
class Uniform(_Marginal):
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ParamError(f"uniform marginal needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def var(self) -> float:
        return (self.hi - self.lo) ** 2 / 12.0

    def sample(self, rng, n):
        return rng.uniform(self.lo, self.hi, size=n)


@dataclass(frozen=True)
class TypeDistribution:
    """Law of (x0, delta, c) with independent coordinates and constant-delta
    support.  Draws are i.i.d.; a fixed seed reproduces them bit-for-bit.
    """

    x0: _Marginal
    delta: _Marginal
    c: _Marginal

    def __post_init__(self):
        if isinstance(self.delta, Constant) and self.delta.value <= 0.0:
            raise ParamError("risk tolerance marginal must be positive")
        if isinstance(self.delta, Uniform) and self.delta.lo <= 0.0:
            raise ParamError("risk tolerance marginal must be positive")
        if isinstance(self.c, Constant) and self.c.value > 1.0:
            raise ParamError("interaction marginal must satisfy c <= 1")
        if isinstance(self.c, Uniform) and self.c.hi > 1.0:
            raise ParamError("interaction marginal must satisfy c <= 1")

    @property
    def mean_x(self) -> float:
        return self.x0.mean

    @property
    def mean_delta(self) -> float:
        return self.delta.mean

    @property
    def mean_c(self) -> float:
        return self.c.mean

    def sample_arrays(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        return self.x0.sample(rng, n), self.delta.sample(rng, n), self.c.sample(rng, n)

    def sample(self, n: int, seed: int) -> list[PlayerType]:
        xs, deltas, cs = self.sample_arrays(n, seed)
        return [PlayerType(x0=float(x), delta=float(d), c=float(c))
                for x, d, c in zip(xs, deltas, cs)]


@dataclass(frozen=True)
class BoundCheck:
    name: str
    passed: bool
    worst_value: float
    worst_point: tuple[float, float]
    bound: float


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[BoundCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[BoundCheck]:
        return [c for c in self.checks if not c.passed]


def _sample_grid(model, grid):
    t_nodes, x_nodes = grid
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.asarray(x_nodes, dtype=float)
    if t_nodes.size == 0 or x_nodes.size == 0:
        raise ParamError("validation grid must be nonempty")
    if np.min(t_nodes) < 0.0 or np.max(t_nodes) > model.horizon:
        raise DomainError("time nodes lie outside [0, horizon]")
    if not model.is_complete:
        lo, hi = model.y_domain
        if np.min(x_nodes) < lo or np.max(x_nodes) > hi:
            raise DomainError(
                f"factor nodes lie outside the declared domain [{lo}, {hi}]"
            )
    elif np.min(x_nodes) <= 0.0:
        raise DomainError("stock nodes must be positive")
    return np.meshgrid(t_nodes, x_nodes, indexing="ij")


def default_validation_grid(model, n_t: int = 200, n_x: int = 200,
                            x_range: tuple[float, float] | None = None):
    """A 200 x 200 sampling grid over the model's declared domain."""
    if x_range is None:
        if model.is_complete:
            x_range = (0.1 * model.s0, 10.0 * model.s0)
        else:
            lo, hi = model.y_domain
            x_range = (lo, min(hi, 10.0 * max(abs(model.y0), 1.0)))
    return (np.linspace(0.0, model.horizon, n_t),
            np.linspace(x_range[0], x_range[1], n_x))


def validate_model(model, grid=None, *, sigma_lo: float = 1e-6,
                   coeff_hi: float = 1e3, sharpe_hi: float = 1e3) -> ValidationReport:
    """Sampled check of the standing coefficient bounds.

    Checks, over the supplied ``(t_nodes, x_nodes)`` grid: sigma in
    [sigma_lo, coeff_hi], |mu| <= coeff_hi, |mu/sigma| <= sharpe_hi, and for
    factor models |a|, |b| <= coeff_hi.  Returns one pass/fail entry per
    bound with the worst offending grid point.  Downstream solvers assume a
    passing report.
    """
    if grid is None:
        grid = default_validation_grid(model)
    tt, xx = _sample_grid(model, grid)

    def worst(values, compare_hi=True):
        values = np.asarray(values, dtype=float)
        bad = np.nan_to_num(values, nan=np.inf, posinf=np.inf, neginf=-np.inf)
        idx = np.unravel_index(np.argmax(bad) if compare_hi else np.argmin(bad), bad.shape)
        return float(values[idx]), (float(tt[idx]), float(xx[idx]))

    sig = np.asarray(model.sigma(tt, xx), dtype=float)
    mu = np.asarray(model.mu(tt, xx), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.asarray(model.sharpe(tt, xx), dtype=float)
    checks = []

    v, pt = worst(sig, compare_hi=False)
    checks.append(BoundCheck("volatility lower bound violated" if v < sigma_lo
                             else "volatility lower bound", v >= sigma_lo, v, pt, sigma_lo))
    v, pt = worst(sig)
    checks.append(BoundCheck("volatility upper bound", v <= coeff_hi, v, pt, coeff_hi))
    v, pt = worst(np.abs(mu))
    checks.append(BoundCheck("drift bound", v <= coeff_hi, v, pt, coeff_hi))
    with np.errstate(divide="ignore", invalid="ignore"):
        v, pt = worst(np.abs(lam))
    checks.append(BoundCheck("sharpe ratio bound", v <= sharpe_hi, v, pt, sharpe_hi))

    if not model.is_complete:
        v, pt = worst(np.abs(np.asarray(model.a(tt, xx), dtype=float)))
        checks.append(BoundCheck("factor volatility bound", v <= coeff_hi, v, pt, coeff_hi))
        v, pt = worst(np.abs(np.asarray(model.b(tt, xx), dtype=float)))
        checks.append(BoundCheck("factor drift bound", v <= coeff_hi, v, pt, coeff_hi))

    return ValidationReport(checks=tuple(checks))


def aggregate_stats(players: Sequence[PlayerType]) -> tuple[float, float]:
    """Cross-sectional averages of the players' risk tolerances and
    interaction weights.  Requires constant risk tolerances.
    """
    if len(players) == 0:
        raise ParamError("need at least one player")
    deltas = np.array([p.constant_delta() for p in players])
    cs = np.array([p.c for p in players])
    return float(np.mean(deltas)), float(np.mean(cs))
