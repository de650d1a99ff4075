"""Correlated Brownian paths, Euler-Maruyama state simulation, and Girsanov
log-weights for the supported measure changes.

All simulation happens under the physical measure; measure changes are
realized either as per-path log-weights (importance weighting) or as
drift-shifted Brownian increments that reuse the same noise.  The same seed
always reproduces the same increments, so comparisons across measures or
across strategies run on common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MeasureError, NumericsError, ParamError

# canonical measure labels
QMM = "qmm"        # minimal martingale measure (incomplete market)
Q = "q"            # risk-neutral measure (complete market); same density form
QTILDE = "qtilde"  # tilted measure driven by lambda - xi

_ALIASES = {
    "qmm": QMM, "q^mm": QMM, "q_mm": QMM,
    "q": Q,
    "qtilde": QTILDE, "q~": QTILDE, "q_tilde": QTILDE,
}


def _canonical_measure(measure: str) -> str:
    key = measure.strip().lower()
    if key not in _ALIASES:
        raise MeasureError(f"unsupported measure {measure!r}; "
                           f"expected one of {sorted(set(_ALIASES.values()))}")
    return _ALIASES[key]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n_steps steps on [t0, horizon]."""

    t0: float
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ParamError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.horizon > self.t0:
            raise ParamError(f"need horizon > t0, got [{self.t0}, {self.horizon}]")

    @property
    def h(self) -> float:
        return (self.horizon - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class PathBundle:
    """Simulated noise and state paths on a common time grid.

    Arrays are laid out (n_paths, n_steps) for increments and left-point
    coefficient paths, (n_paths, n_steps + 1) for states.  ``dw_perp`` and
    ``y`` are None for complete-market (single-driver) models.
    """

    grid: TimeGrid
    dw: np.ndarray
    dw_perp: Optional[np.ndarray]
    y: Optional[np.ndarray]
    s: np.ndarray
    lam: np.ndarray
    sigma: np.ndarray
    rho: Optional[float]
    seed: int

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    @property
    def dw_y(self) -> np.ndarray:
        """Increments of the factor driver W^Y = rho W + sqrt(1-rho^2) W_perp."""
        if self.dw_perp is None:
            raise MeasureError("bundle has a single Brownian driver; no W^Y exists")
        return self.rho * self.dw + np.sqrt(1.0 - self.rho**2) * self.dw_perp

    @property
    def w(self) -> np.ndarray:
        """Brownian path W at the grid nodes, W_0 = 0."""
        return _cum0(self.dw)

    def int_lam_ds(self) -> np.ndarray:
        """Running integral of lambda ds (left-point)."""
        return _cum0(self.lam * self.grid.h)

    def int_lam2_ds(self) -> np.ndarray:
        return _cum0(self.lam**2 * self.grid.h)

    def int_lam_dw(self) -> np.ndarray:
        return _cum0(self.lam * self.dw)


def _cum0(increments: np.ndarray) -> np.ndarray:
    n_paths = increments.shape[0]
    out = np.empty((n_paths, increments.shape[1] + 1))
    out[:, 0] = 0.0
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return out


def _draw_increments(seed: int, n_paths: int, n_steps: int, h: float, two_drivers: bool):
    # Philox is counter-based: one keyed stream, deterministic in the seed
    # no matter how the work is later split up.
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    z = rng.standard_normal((2 if two_drivers else 1, n_paths, n_steps))
    root_h = np.sqrt(h)
    dw = root_h * z[0]
    dw_perp = root_h * z[1] if two_drivers else None
    return dw, dw_perp


def simulate(model, grid: TimeGrid, n_paths: int, seed: int) -> PathBundle:
    """Euler-Maruyama paths of the model's state under the physical measure.

    Left-point coefficient evaluation throughout.  Factor paths are clamped
    at the model's ``y_clip`` (square-root coefficients cannot see negative
    arguments that the Euler step may produce).  Deterministic given
    ``seed``.
    """
    if n_paths < 1:
        raise ParamError(f"n_paths must be >= 1, got {n_paths}")
    h = grid.h
    times = grid.times
    complete = model.is_complete
    dw, dw_perp = _draw_increments(seed, n_paths, grid.n_steps, h, not complete)

    s = np.empty((n_paths, grid.n_steps + 1))
    s[:, 0] = model.s0
    lam = np.empty((n_paths, grid.n_steps))
    sig = np.empty((n_paths, grid.n_steps))

    # non-finite states are detected after the loop and raised as errors
    errstate = np.errstate(over="ignore", invalid="ignore")
    if complete:
        y = None
        with errstate:
            for j in range(grid.n_steps):
                sj = s[:, j]
                sig[:, j] = model.sigma(times[j], sj)
                mu_j = model.mu(times[j], sj)
                lam[:, j] = model.sharpe(times[j], sj)
                s[:, j + 1] = sj * (1.0 + mu_j * h + sig[:, j] * dw[:, j])
    else:
        rho = model.rho
        dw_y = rho * dw + np.sqrt(1.0 - rho**2) * dw_perp
        y = np.empty((n_paths, grid.n_steps + 1))
        y[:, 0] = max(model.y0, model.y_clip)
        with errstate:
            for j in range(grid.n_steps):
                yj = y[:, j]
                sig[:, j] = model.sigma(times[j], yj)
                mu_j = model.mu(times[j], yj)
                lam[:, j] = model.sharpe(times[j], yj)
                s[:, j + 1] = s[:, j] * (1.0 + mu_j * h + sig[:, j] * dw[:, j])
                y_next = yj + model.b(times[j], yj) * h + model.a(times[j], yj) * dw_y[:, j]
                y[:, j + 1] = np.maximum(y_next, model.y_clip)

    for name, arr in (("S", s), ("Y", y), ("lambda", lam), ("sigma", sig)):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericsError(f"{name} path became non-finite during simulation")

    return PathBundle(
        grid=grid, dw=dw, dw_perp=dw_perp, y=y, s=s, lam=lam, sigma=sig,
        rho=None if complete else model.rho, seed=seed,
    )


def girsanov_logweight(bundle: PathBundle, measure: str,
                       xi: Optional[np.ndarray] = None,
                       running: bool = False) -> np.ndarray:
    """Per-path log dQ/dP accumulated with left-point sums.

    For the minimal martingale / risk-neutral measures the exponent is
    -1/2 sum lam^2 h - sum lam dW; the tilted measure replaces lam with
    lam - xi and needs a per-path ``xi`` array of shape (n_paths, n_steps).
    ``running=True`` returns the cumulative (n_paths, n_steps + 1) array.
    """
    measure = _canonical_measure(measure)
    if measure == QTILDE:
        if xi is None:
            raise MeasureError("the tilted measure requires a xi path")
        kernel = bundle.lam - np.asarray(xi)
    else:
        kernel = bundle.lam
    incr = -0.5 * kernel**2 * bundle.grid.h - kernel * bundle.dw
    if running:
        return _cum0(incr)
    return incr.sum(axis=1)


def shifted_increments(bundle: PathBundle, measure: str,
                       xi: Optional[np.ndarray] = None,
                       driver: str = "W") -> np.ndarray:
    """Increments of the chosen driver as a Brownian motion under ``measure``.

    ``driver="W"`` gives dW + lam h (or dW + (lam - xi) h under the tilted
    measure); ``driver="WY"`` gives the factor driver's increments
    dW^Y + rho lam h, which are the ones shifted under the minimal
    martingale measure.  The underlying noise is reused, not redrawn.
    """
    measure = _canonical_measure(measure)
    h = bundle.grid.h
    if driver == "W":
        if measure == QTILDE:
            if xi is None:
                raise MeasureError("the tilted measure requires a xi path")
            return bundle.dw + (bundle.lam - np.asarray(xi)) * h
        return bundle.dw + bundle.lam * h
    if driver == "WY":
        if measure != QMM:
            raise MeasureError("the factor driver is only shifted under the "
                               "minimal martingale measure")
        return bundle.dw_y + bundle.rho * bundle.lam * h
    raise MeasureError(f"unknown driver {driver!r}; expected 'W' or 'WY'")


def integrate_wealth(bundle: PathBundle, pi: np.ndarray, x0) -> np.ndarray:
    """Left-point wealth integral dX = pi (mu dt + sigma dW) on the bundle.

    ``pi`` has shape (n_paths, n_steps) or broadcasts to it; returns
    (n_paths, n_steps + 1) with X_0 = x0.
    """
    pi = np.broadcast_to(pi, bundle.lam.shape)
    incr = pi * bundle.sigma * (bundle.lam * bundle.grid.h + bundle.dw)
    out = _cum0(incr)
    out += np.asarray(x0, dtype=float).reshape(-1, 1) if np.ndim(x0) else float(x0)
    return out


def coarsen(model, bundle: PathBundle, factor: int) -> PathBundle:
    """Re-simulate the bundle's model on a grid coarsened by ``factor``,
    driving it with the aggregated increments of the same Brownian paths.

    Used for strong-convergence studies: the coarse bundle sees the exact
    same underlying noise, so state differences isolate discretization
    error.
    """
    if factor < 1 or bundle.n_steps % factor != 0:
        raise ParamError(f"factor {factor} must divide n_steps {bundle.n_steps}")
    if factor == 1:
        return bundle
    n_coarse = bundle.n_steps // factor
    grid = TimeGrid(bundle.grid.t0, bundle.grid.horizon, n_coarse)

    def aggregate(incr):
        return incr.reshape(bundle.n_paths, n_coarse, factor).sum(axis=2)

    dw = aggregate(bundle.dw)
    dw_perp = None if bundle.dw_perp is None else aggregate(bundle.dw_perp)

    h = grid.h
    times = grid.times
    s = np.empty((bundle.n_paths, n_coarse + 1))
    s[:, 0] = model.s0
    lam = np.empty((bundle.n_paths, n_coarse))
    sig = np.empty((bundle.n_paths, n_coarse))
    if model.is_complete:
        y = None
        for j in range(n_coarse):
            sj = s[:, j]
            sig[:, j] = model.sigma(times[j], sj)
            mu_j = model.mu(times[j], sj)
            lam[:, j] = model.sharpe(times[j], sj)
            s[:, j + 1] = sj * (1.0 + mu_j * h + sig[:, j] * dw[:, j])
    else:
        dw_y = model.rho * dw + np.sqrt(1.0 - model.rho**2) * dw_perp
        y = np.empty((bundle.n_paths, n_coarse + 1))
        y[:, 0] = max(model.y0, model.y_clip)
        for j in range(n_coarse):
            yj = y[:, j]
            sig[:, j] = model.sigma(times[j], yj)
            mu_j = model.mu(times[j], yj)
            lam[:, j] = model.sharpe(times[j], yj)
            s[:, j + 1] = s[:, j] * (1.0 + mu_j * h + sig[:, j] * dw[:, j])
            y[:, j + 1] = np.maximum(
                yj + model.b(times[j], yj) * h + model.a(times[j], yj) * dw_y[:, j],
                model.y_clip,
            )
    return PathBundle(grid=grid, dw=dw, dw_perp=dw_perp, y=y, s=s, lam=lam,
                      sigma=sig, rho=bundle.rho, seed=bundle.seed)


def export_csv(bundle: PathBundle, destination, xi: Optional[np.ndarray] = None,
               digest: Optional[str] = None) -> None:
    """Write one row per (path, step): t, W, W_perp, Y, S, logw_QMM, logw_Qtilde.

    Missing quantities (factor columns of a single-driver bundle, or the
    tilted weight when no xi path is supplied) are written as nan.  Floats
    use shortest round-trip decimal formatting.
    """
    w = bundle.w
    w_perp = _cum0(bundle.dw_perp) if bundle.dw_perp is not None else None
    logw_qmm = girsanov_logweight(bundle, QMM, running=True)
    logw_qt = (girsanov_logweight(bundle, QTILDE, xi=xi, running=True)
               if xi is not None else None)
    times = bundle.grid.times

    def fmt(v) -> str:
        return repr(float(v))

    def write(fh):
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        fh.write("path,t,W,W_perp,Y,S,logw_QMM,logw_Qtilde\n")
        for p in range(bundle.n_paths):
            for j in range(bundle.n_steps + 1):
                row = [
                    str(p), fmt(times[j]), fmt(w[p, j]),
                    fmt(w_perp[p, j]) if w_perp is not None else "nan",
                    fmt(bundle.y[p, j]) if bundle.y is not None else "nan",
                    fmt(bundle.s[p, j]), fmt(logw_qmm[p, j]),
                    fmt(logw_qt[p, j]) if logw_qt is not None else "nan",
                ]
                fh.write(",".join(row) + "\n")

    if isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__"):
        with open(destination, "w", encoding="utf-8", newline="\n") as fh:
            write(fh)
    else:
        write(destination)
