"""Monte Carlo verification of the equilibrium claims.

Everything here is statistical: utilities are estimated with standard
errors, unilateral deviations are checked on common random numbers (the
zero deviation ties bitwise), martingale structure is tested through mean
per-step increments, the mean-field limit is checked by resampling finite
games, and the entropy identity ties the reweighted simulation back to the
solved discounting field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analytic import PDESolution, me_chi
from .errors import NumericsError, ParamError, SampleError
from .games import EquilibriumReport, incomplete_common_process
from .market import CompleteMarketModel, PlayerType, TypeDistribution
from .paths import PathBundle, TimeGrid, integrate_wealth, simulate

UTILITY_CLIP = -1e300


@dataclass(frozen=True)
class UtilityEstimate:
    mean: float
    se: float
    n_clipped: int = 0

    def to_record(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n_clipped": self.n_clipped}


def _terminal_deltas(players: Sequence[PlayerType], bundle: PathBundle) -> np.ndarray:
    s_terminal = bundle.s[:, -1]
    return np.stack([p.terminal_delta(s_terminal) for p in players])


def _safe_se(values: np.ndarray) -> float:
    """Standard error of the mean, robust to clip-magnitude samples."""
    n = values.size
    if n < 2:
        return 0.0
    with np.errstate(over="ignore"):
        sd = np.std(values, ddof=1)
    if not np.isfinite(sd):
        scale = 2.0 ** -600  # power of two: rescaling is exact
        sd = np.std(values * scale, ddof=1) / scale
    return float(sd / np.sqrt(n))


def estimate_utility(players: Sequence[PlayerType], strategies, bundle: PathBundle,
                     wealth_terminal: Optional[np.ndarray] = None
                     ) -> list[UtilityEstimate]:
    """Per-player Monte Carlo estimate of E[-exp(-(X_T^i - c_i C_T)/delta_T^i)].

    Terminal wealths are re-integrated from the supplied strategies on the
    bundle (so deviated strategies are priced on the same noise), unless
    ``wealth_terminal`` (n_players, n_paths) is passed directly.  Utilities
    that underflow are clipped at -1e300 and counted.
    """
    if wealth_terminal is None:
        pis = [s.pi if hasattr(s, "pi") else np.asarray(s) for s in strategies]
        wealth_terminal = np.stack([
            integrate_wealth(bundle, pi, p.x0)[:, -1]
            for p, pi in zip(players, pis)
        ])
    deltas = _terminal_deltas(players, bundle)
    crowd = wealth_terminal.mean(axis=0)
    out = []
    for i, p in enumerate(players):
        exponent = -(wealth_terminal[i] - p.c * crowd) / deltas[i]
        with np.errstate(over="ignore"):
            u = -np.exp(exponent)
        clipped = int(np.sum(~np.isfinite(u) | (u < UTILITY_CLIP)))
        u = np.clip(np.nan_to_num(u, nan=UTILITY_CLIP, neginf=UTILITY_CLIP), UTILITY_CLIP, 0.0)
        out.append(UtilityEstimate(mean=float(np.mean(u)), se=_safe_se(u),
                                   n_clipped=clipped))
    return out


@dataclass(frozen=True)
class DeviationArm:
    label: str
    means: np.ndarray   # (n_players,)
    ses: np.ndarray     # paired SEs of (deviation - baseline)
    z: np.ndarray       # paired z-scores; improvement is positive


@dataclass(frozen=True)
class DeviationTestResult:
    baseline: tuple[UtilityEstimate, ...]
    arms: tuple[DeviationArm, ...]
    z_threshold: float

    @property
    def passed(self) -> bool:
        """No deviation improves any player beyond the z threshold."""
        return all(np.all(arm.z <= self.z_threshold) for arm in self.arms)

    def arm(self, label: str) -> DeviationArm:
        for a in self.arms:
            if a.label == label:
                return a
        raise KeyError(label)

    def to_record(self) -> dict:
        return {
            "pass": bool(self.passed),
            "z_threshold": self.z_threshold,
            "baseline": [b.to_record() for b in self.baseline],
            "arms": [
                {"label": a.label, "means": a.means.tolist(),
                 "ses": a.ses.tolist(), "z": a.z.tolist()}
                for a in self.arms
            ],
        }


DEFAULT_DEVIATIONS = (0.5, 0.9, 1.0, 1.1, 1.5, "solo")


def _utility_per_path(x_terminal_i, others_terminal_sum, player, delta_i, n_players):
    crowd = (others_terminal_sum + x_terminal_i) / n_players
    with np.errstate(over="ignore"):
        u = -np.exp(-(x_terminal_i - player.c * crowd) / delta_i)
    return np.clip(np.nan_to_num(u, nan=UTILITY_CLIP, neginf=UTILITY_CLIP), UTILITY_CLIP, 0.0)


def nash_deviation_test(players: Sequence[PlayerType], report: EquilibriumReport,
                        deviations: Sequence = DEFAULT_DEVIATIONS,
                        bundle: PathBundle = None,
                        z_threshold: float = 2.0) -> DeviationTestResult:
    """Unilateral-deviation check of a reported equilibrium.

    For each player and each perturbation (a float is a multiplicative
    scaling of the equilibrium strategy; "solo" is the interaction-free
    policy), the player's wealth is re-simulated on the bundle's noise with
    everyone else held fixed, and the paired utility difference against the
    baseline is scored as z = mean(diff)/se(diff).  Passing means no arm
    improves on the baseline by more than ``z_threshold`` standard errors;
    the zero perturbation ties bitwise, giving z = 0 exactly.
    """
    if bundle is None:
        raise ParamError("a path bundle is required")
    n_players = len(players)
    deltas = _terminal_deltas(players, bundle)
    # baseline terminal wealths re-integrated from reported strategies, so a
    # unit-scale arm reproduces them bitwise
    base_terminal = np.stack([
        integrate_wealth(bundle, report.pi(i), p.x0)[:, -1]
        for i, p in enumerate(players)
    ])
    total = base_terminal.sum(axis=0)

    base_utils = []
    base_u_paths = []
    for i, p in enumerate(players):
        u = _utility_per_path(base_terminal[i], total - base_terminal[i],
                              p, deltas[i], n_players)
        base_u_paths.append(u)
        n = u.size
        base_utils.append(UtilityEstimate(float(np.mean(u)),
                                          float(np.std(u, ddof=1) / np.sqrt(n))))

    delta_bar = report.diagnostics.get("delta_bar")
    arms = []
    for dev in deviations:
        means = np.empty(n_players)
        ses = np.empty(n_players)
        zs = np.empty(n_players)
        label = f"scale_{dev:g}" if not isinstance(dev, str) else dev
        for i, p in enumerate(players):
            if isinstance(dev, str):
                if dev != "solo":
                    raise ParamError(f"unknown deviation {dev!r}")
                if delta_bar is None:
                    raise ParamError("'solo' deviation needs the game's "
                                     "delta_bar diagnostics")
                factor = report.diagnostics["delta"][i] / delta_bar[i]
            else:
                factor = float(dev)
            if factor == 1.0:
                x_dev = base_terminal[i]
            else:
                x_dev = integrate_wealth(bundle, factor * report.pi(i), p.x0)[:, -1]
            u_dev = _utility_per_path(x_dev, total - base_terminal[i],
                                      p, deltas[i], n_players)
            diff = u_dev - base_u_paths[i]
            means[i] = float(np.mean(u_dev))
            ses[i] = _safe_se(diff)
            zs[i] = float(np.mean(diff)) / ses[i] if ses[i] > 0.0 else 0.0
        arms.append(DeviationArm(label=label, means=means, ses=ses, z=zs))

    return DeviationTestResult(baseline=tuple(base_utils), arms=tuple(arms),
                               z_threshold=z_threshold)


@dataclass(frozen=True)
class DriftTestResult:
    label: str
    mean_increment: float
    se: float
    classification: str
    n_paths: int

    @property
    def z(self) -> float:
        if self.se > 0.0:
            return self.mean_increment / self.se
        # zero-variance statistic: the statement is exact, not statistical
        if self.mean_increment == 0.0:
            return 0.0
        return float(np.copysign(np.inf, self.mean_increment))

    def to_record(self) -> dict:
        z = self.z
        return {"label": self.label, "mean_increment": self.mean_increment,
                "se": self.se, "z": z if np.isfinite(z) else repr(z),
                "classification": self.classification, "n_paths": self.n_paths}


def classify_drift(mean: float, se: float, martingale_z: float = 3.0) -> str:
    """Pure classification rule on (mean, se)."""
    if se > 0.0:
        z = mean / se
    else:
        z = 0.0 if mean == 0.0 else float(np.copysign(np.inf, mean))
    if abs(z) <= martingale_z:
        return "martingale-consistent"
    if z < 0.0:
        return "supermartingale-consistent"
    return "violation"


def drift_test(process: np.ndarray, label: str,
               martingale_z: float = 3.0) -> DriftTestResult:
    """Mean per-step increment of a per-path process (n_paths, n_times).

    Per-path mean increments are independent across paths, so the standard
    error is taken over paths.  Requires at least 10^3 paths.
    """
    process = np.asarray(process, dtype=float)
    n_paths, n_times = process.shape
    if n_paths < 1000:
        raise SampleError(f"drift test needs >= 1000 paths, got {n_paths}")
    per_path = (process[:, -1] - process[:, 0]) / (n_times - 1)
    mean = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(n_paths))
    return DriftTestResult(label=label, mean_increment=mean, se=se,
                           classification=classify_drift(mean, se, martingale_z),
                           n_paths=n_paths)


def incomplete_value_process(x_tilde: np.ndarray, delta: float,
                             f_solution: PDESolution,
                             bundle: PathBundle) -> np.ndarray:
    """The verification process u_t = -exp(-x_tilde_t/delta + f(t, Y_t)),
    a martingale under the optimal policy and a supermartingale otherwise."""
    times = np.broadcast_to(bundle.grid.times, bundle.y.shape)
    f_vals = f_solution.eval(times, bundle.y)
    return -np.exp(-x_tilde / delta + f_vals)


def game_tilde_wealth(report: EquilibriumReport, i: int) -> np.ndarray:
    """x_tilde^i = X^i - (c_i/N) sum_j X^j from a reported game."""
    c_i = report.diagnostics["c"][i]
    return report.wealth[i] - c_i * report.wealth.mean(axis=0)


def delta_price_under_q(model: CompleteMarketModel, delta_solution: PDESolution,
                        grid: TimeGrid, n_paths: int, seed: int
                        ) -> tuple[np.ndarray, PathBundle]:
    """delta(t, S_t) along paths simulated under the risk-neutral measure.

    The drift is removed and the same seed is used, so the noise matches a
    physical-measure simulation path for path.  The result should be a
    martingale (exactly so, pre-discretization, for affine payoffs).
    """
    q_model = CompleteMarketModel(
        mu=lambda t, s: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s))),
        sigma=model.sigma, horizon=model.horizon, s0=model.s0,
    )
    q_bundle = simulate(q_model, grid, n_paths, seed)
    times = np.broadcast_to(grid.times, q_bundle.s.shape)
    return delta_solution.eval(times, q_bundle.s), q_bundle


def stock_over_delta_under_qtilde(model: CompleteMarketModel,
                                  delta_solution: PDESolution,
                                  grid: TimeGrid, n_paths: int, seed: int
                                  ) -> np.ndarray:
    """S_t / delta(t, S_t) along paths simulated under the tilted measure.

    Under that measure dS = sigma xi S dt + sigma S dW with
    xi = sigma S delta_S / delta, and the ratio is a martingale.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    dw = np.sqrt(grid.h) * rng.standard_normal((n_paths, grid.n_steps))
    times = grid.times
    s = np.empty((n_paths, grid.n_steps + 1))
    s[:, 0] = model.s0
    for j in range(grid.n_steps):
        sj = s[:, j]
        sig = np.asarray(model.sigma(times[j], sj), dtype=float)
        delta = delta_solution.eval(times[j], sj)
        delta_s = delta_solution.eval_x(times[j], sj)
        xi = sig * sj * delta_s / delta
        s[:, j + 1] = sj * (1.0 + sig * xi * grid.h + sig * dw[:, j])
    if not np.all(np.isfinite(s)):
        raise NumericsError("stock path became non-finite under the tilted measure")
    ratio = s / delta_solution.eval(np.broadcast_to(times, s.shape), s)
    return ratio


@dataclass(frozen=True)
class ConvergenceStudy:
    n_list: tuple[int, ...]
    mean_gaps: np.ndarray
    slope: float
    n_resamples: int

    def to_record(self) -> dict:
        return {"n_list": list(self.n_list), "mean_gaps": self.mean_gaps.tolist(),
                "slope": self.slope, "n_resamples": self.n_resamples}


def convergence_study(type_dist: TypeDistribution, model, bundle: PathBundle,
                      f_solution: PDESolution, n_list: Sequence[int],
                      n_resamples: int = 100, seed: int = 0,
                      tracked: Optional[PlayerType] = None) -> ConvergenceStudy:
    """Gap between the finite-game and mean-field strategies of one tracked
    type, as the number of players grows.

    For each resample, N types are drawn (the tracked type replaces the
    first), and the sup over the bundle's paths and steps of
    |pi_N - pi_MFG| is recorded; both strategies share the common process,
    so the gap is |coef_N - coef_MFG| times its sup.  Returns the per-N
    gaps averaged over resamples and the fitted log-log slope.

    When no ``tracked`` type is given, one is drawn from the distribution;
    a tracked type with c = 0 has no interaction term and a zero gap.
    """
    n_list = tuple(int(n) for n in n_list)
    if len(n_list) < 3 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ParamError("n_list must be increasing with at least 3 entries")
    if tracked is None:
        tracked = type_dist.sample(1, seed=seed + 999_983)[0]
    mean_c = type_dist.mean_c
    if mean_c >= 1.0:
        raise ParamError("type distribution must have E[c] < 1")
    coef_mfg = tracked.constant_delta() + type_dist.mean_delta * tracked.c / (1.0 - mean_c)
    common = incomplete_common_process(model, bundle, f_solution)
    sup_common = float(np.max(np.abs(common)))

    gaps = np.zeros((n_resamples, len(n_list)))
    draw = 0
    for r in range(n_resamples):
        for k, n in enumerate(n_list):
            _, d_sample, c_sample = type_dist.sample_arrays(n, seed=seed + draw)
            draw += 1
            d_sample = d_sample.copy()
            c_sample = c_sample.copy()
            d_sample[0] = tracked.constant_delta()
            c_sample[0] = tracked.c
            sample_mean_delta = float(np.mean(d_sample))
            sample_mean_c = float(np.mean(c_sample))
            if sample_mean_c >= 1.0:
                raise ParamError("resample produced an average weight of 1")
            coef_n = tracked.constant_delta() \
                + sample_mean_delta * tracked.c / (1.0 - sample_mean_c)
            gaps[r, k] = abs(coef_n - coef_mfg) * sup_common

    mean_gaps = gaps.mean(axis=0)
    if np.all(mean_gaps > 0.0):
        slope = float(np.polyfit(np.log(n_list), np.log(mean_gaps), 1)[0])
    else:
        slope = float("nan")
    return ConvergenceStudy(n_list=n_list, mean_gaps=mean_gaps, slope=slope,
                            n_resamples=n_resamples)


@dataclass(frozen=True)
class EntropyCheck:
    lhs: float
    rhs: float
    se: float

    @property
    def z(self) -> float:
        return (self.lhs - self.rhs) / self.se if self.se > 0.0 else 0.0

    def to_record(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "se": self.se, "z": self.z}


def entropy_identity_check(model, f_solution: PDESolution, bundle: PathBundle,
                           zeta_solution: Optional[PDESolution] = None) -> EntropyCheck:
    """Minimal-entropy identity: -H(Q^ME | P) = ln(M_0) / (1 - rho^2).

    The left side is estimated as -E_P[w ln w] with w the simulated
    minimal-entropy density; the right side comes from the solved
    discounting field at (0, Y_0).
    """
    _, log_density = me_chi(model, f_solution, bundle)
    w = np.exp(log_density)
    g = w * log_density
    lhs = -float(np.mean(g))
    se = float(np.std(g, ddof=1) / np.sqrt(g.size))
    if zeta_solution is not None:
        rhs = float(np.log(zeta_solution.at_origin(model.y0)) / (1.0 - model.rho**2))
    else:
        rhs = float(f_solution.at_origin(model.y0))
    return EntropyCheck(lhs=lhs, rhs=rhs, se=se)


def square_integrability(bundle: PathBundle, pi: np.ndarray) -> float:
    """Sample estimate of E[int sigma^2 pi^2 ds], the admissibility moment."""
    pi = np.broadcast_to(pi, bundle.lam.shape)
    return float(np.mean((bundle.sigma**2 * pi**2 * bundle.grid.h).sum(axis=1)))


def discount_factor_mc(model, bundle: PathBundle) -> tuple[float, float]:
    """Monte Carlo cross-estimate of the discount factor M_0 entering the
    factor-market values: the minimal-martingale-measure expectation of
    exp(-1/2 (1 - rho^2) int lam^2 ds), computed by reweighting the
    physical-measure paths.  Returns (estimate, standard error); the solved
    field gives the same number as zeta(0, Y_0).
    """
    from .paths import QMM, girsanov_logweight
    weight = np.exp(girsanov_logweight(bundle, QMM))
    payoff = np.exp(-0.5 * (1.0 - model.rho**2)
                    * (bundle.lam**2 * bundle.grid.h).sum(axis=1))
    g = weight * payoff
    return float(np.mean(g)), _safe_se(g)
