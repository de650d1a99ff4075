"""Exception hierarchy shared across the package."""


class CaraGamesError(Exception):
    """Base class for all errors raised by this package."""


class ParamError(CaraGamesError):
    """A parameter violates its documented constraint."""


class DomainError(CaraGamesError):
    """An evaluation grid lies outside a model's declared domain."""


class NumericsError(CaraGamesError):
    """A simulated or computed quantity became non-finite or overflowed."""


class MeasureError(CaraGamesError):
    """A measure change was requested without the inputs it needs."""


class ConvergenceError(CaraGamesError):
    """An iterative solver failed to contract within its iteration budget."""


class ExtrapolationError(CaraGamesError):
    """A path left the grid on which a solved field is defined."""


class NoEquilibrium(CaraGamesError):
    """The requested equilibrium does not exist for the given players."""


class SampleError(CaraGamesError):
    """Too few samples were supplied for an estimator to be defined."""


class ConfigError(CaraGamesError):
    """An experiment configuration failed to parse or validate."""
