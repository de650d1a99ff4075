"""CARA portfolio games in Ito-diffusion markets: explicit equilibria for
N-player and mean-field games, with Monte Carlo verification."""

from .errors import (
    CaraGamesError, ConfigError, ConvergenceError, DomainError,
    ExtrapolationError, MeasureError, NoEquilibrium, NumericsError,
    ParamError, SampleError,
)
from .market import (
    CompleteMarketModel, Constant, IncompleteMarketModel, PlayerType,
    SolvableExampleParams, TypeDistribution, Uniform, aggregate_stats,
    build_solvable_example, constant_complete_model, validate_model,
)
from .paths import (
    PathBundle, Q, QMM, QTILDE, TimeGrid, coarsen, girsanov_logweight,
    integrate_wealth, shifted_increments, simulate,
)
from .analytic import (
    Grid2D, PDESolution, RiccatiSolution, default_grid, me_chi,
    solve_H, solve_delta_price, solve_f, solve_riccati, solve_zeta,
    xi_eta_complete, xi_incomplete,
)
from .games import (
    EquilibriumReport, ModifiedRiskTolerance, SinglePlayerSolution,
    StrategyPath, mfg_complete, mfg_incomplete, modified_risk_tolerance,
    nplayer_complete, nplayer_incomplete, reparameterize_interaction,
    single_player_complete,
)
from .verify import (
    ConvergenceStudy, DeviationTestResult, DriftTestResult, EntropyCheck,
    convergence_study, discount_factor_mc, drift_test, entropy_identity_check,
    estimate_utility, nash_deviation_test,
)

__version__ = "0.1.0"
