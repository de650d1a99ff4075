"""Batch experiment runner.

Subcommands compose through files: ``solve`` writes the PDE/ODE fields,
``simulate`` the path bundle, ``nplayer``/``mfg``/``single`` the
equilibrium reports, ``verify`` the statistical test records, and
``figure1`` the interaction surface.  Every output file carries the config
digest; identical config and seed give byte-identical files.

Exit codes: 0 success, 1 a selected verification failed, 2 configuration
error, 3 numerical error.  Failures emit a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analytic import (Grid2D, default_grid, solve_H, solve_delta_price,
                       solve_f, solve_riccati, solve_zeta)
from .errors import CaraGamesError, ConfigError, ParamError
from .games import (mfg_complete, mfg_incomplete, nplayer_complete,
                    nplayer_incomplete, single_player_complete)
from .market import validate_model
from .paths import TimeGrid, export_csv, integrate_wealth, simulate
from .verify import (DEFAULT_DEVIATIONS, convergence_study, delta_price_under_q,
                     drift_test, entropy_identity_check, game_tilde_wealth,
                     incomplete_value_process, nash_deviation_test,
                     stock_over_delta_under_qtilde)

_NUMERIC_EXIT = 3
_CONFIG_EXIT = 2
_VERIFY_EXIT = 1


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: str, rows, digest: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_digest={digest}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _write_json(path: Path, obj: dict, digest: str) -> None:
    obj = dict(obj)
    obj["config_digest"] = digest
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_table(exp: "_Experiment", name: str, header: str, rows) -> None:
    """Tabular output as CSV, or as a JSON object under --format json."""
    if exp.format == "json":
        _write_json(exp.out_dir / f"{name}.json",
                    {"header": header.split(","),
                     "rows": [list(r) for r in rows]}, exp.digest)
    else:
        _write_csv(exp.out_dir / f"{name}.csv", header, rows, exp.digest)


class _Experiment:
    """Shared pipeline state: model, solved fields, simulated bundle."""

    def __init__(self, cfg: cfgmod.ExperimentConfig):
        self.cfg = cfg
        self.digest = cfg.digest()
        self.model, self.solvable_params = cfg.build_model()
        self.players = cfg.build_players()
        self.type_dist = cfg.build_type_distribution()
        self.seed = int(cfg.run_option("seed"))
        self.out_dir = Path(cfg.run_option("out_dir"))
        self.format = str(cfg.run_option("format"))
        self._bundle = None
        self._pde_grid = None
        self._fields = {}

    # -- grids and solves ---------------------------------------------------
    def pde_grid(self) -> Grid2D:
        if self._pde_grid is not None:
            return self._pde_grid
        cfg = self.cfg
        n_t = int(cfg.grids("pde_nt"))
        n_x = int(cfg.grids("pde_nx"))
        lo = cfg.grids("space_lo")
        hi = cfg.grids("space_hi")
        if lo is not None and hi is not None:
            grid = Grid2D(self.model.horizon, n_t, float(lo), float(hi), n_x)
        else:
            # pilot simulation fixes the spatial range from state quantiles;
            # the pad is generous because later runs draw fresh, larger
            # samples and fields fail hard on extrapolation
            pilot = simulate(self.model, TimeGrid(0.0, self.model.horizon, 64),
                             2000, seed=self.seed + 1)
            if self.model.is_complete:
                q_lo, q_hi = np.quantile(pilot.s.ravel(), [0.001, 0.999])
                grid = Grid2D(self.model.horizon, n_t, float(q_lo / 2.0),
                              float(q_hi * 2.0), n_x)
            else:
                grid = default_grid(self.model.horizon, pilot.y, n_t=n_t, n_x=n_x,
                                    pad=1.0, x_floor=self.model.y_clip)
        self._pde_grid = grid
        return grid

    def field(self, name: str, player_index: int = 0):
        key = (name, player_index)
        if key in self._fields:
            return self._fields[key]
        grid = self.pde_grid()
        if name == "f":
            sol = solve_f(self.model, grid)
        elif name == "zeta":
            sol = solve_zeta(self.model, grid)
        elif name == "delta":
            sol = solve_delta_price(self.model, self.players[player_index], grid)
        elif name == "H":
            sol = solve_H(self.model, self.field("delta", player_index), grid)
        else:
            raise ValueError(name)
        self._fields[key] = sol
        return sol

    def bundle(self):
        if self._bundle is None:
            grid = TimeGrid(0.0, self.model.horizon, int(self.cfg.grids("n_steps")))
            self._bundle = simulate(self.model, grid, int(self.cfg.grids("n_paths")),
                                    seed=self.seed)
        return self._bundle

    def require_players(self, at_least: int = 1):
        if len(self.players) < at_least:
            raise ConfigError(f"this command needs at least {at_least} "
                              "[[players]] entries")
        return self.players

    def complete_solutions(self):
        return [(self.field("delta", i), self.field("H", i))
                for i in range(len(self.players))]


def _report_rows(report):
    """Per (player, step) rows of path-averaged strategy and wealth."""
    times = report.times
    for i in range(report.n_players):
        pi_mean = report.pi(i).mean(axis=0)
        x_mean = report.wealth[i].mean(axis=0)
        for j in range(len(times) - 1):
            yield (i, times[j], pi_mean[j], x_mean[j])
        yield (i, times[-1], pi_mean[-1], x_mean[-1])


def _write_report(exp: _Experiment, report, name: str, extra: dict) -> None:
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(exp, name, "player,t,pi,X", _report_rows(report))
    summary = {
        "values": report.values,
        "value_components": report.value_components,
        "diagnostics": {k: v for k, v in report.diagnostics.items()
                        if np.ndim(v) <= 1},
    }
    summary.update(extra)
    _write_json(exp.out_dir / f"{name}_summary.json", summary, exp.digest)


# -- subcommands -------------------------------------------------------------


def _cmd_solve(exp: _Experiment, args) -> int:
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    grid = exp.pde_grid()
    summary = {"grid": {"n_t": grid.n_t, "n_x": grid.n_x,
                        "x_lo": grid.x_lo, "x_hi": grid.x_hi}}

    def pde_rows(sol):
        for i, t in enumerate(grid.t_nodes):
            for j, x in enumerate(grid.x_nodes):
                yield (t, x, sol.u[i, j], sol.u_x[i, j])

    if exp.model.is_complete:
        exp.require_players()
        for i in range(len(exp.players)):
            dsol = exp.field("delta", i)
            hsol = exp.field("H", i)
            _write_table(exp, f"pde_delta_{i}", "t,x,u,u_x", pde_rows(dsol))
            _write_table(exp, f"pde_H_{i}", "t,x,u,u_x", pde_rows(hsol))
            summary[f"player_{i}"] = {"delta0": dsol.at_origin(exp.model.s0),
                                      "H0": hsol.at_origin(exp.model.s0)}
    else:
        fsol = exp.field("f")
        zsol = exp.field("zeta")
        _write_table(exp, "pde_f", "t,x,u,u_x", pde_rows(fsol))
        _write_table(exp, "pde_zeta", "t,x,u,u_x", pde_rows(zsol))
        summary["f0"] = fsol.at_origin(exp.model.y0)
        summary["M0"] = zsol.at_origin(exp.model.y0)
        if exp.solvable_params is not None:
            ric = solve_riccati(exp.solvable_params)
            ts = np.linspace(0.0, exp.model.horizon, args.samples)
            _write_table(exp, "riccati", "t,p,q",
                         ((t, float(ric.p(t)), float(ric.q(t))) for t in ts))
            summary["riccati"] = {"delta": ric.delta, "p0": float(ric.p(0.0)),
                                  "q0": float(ric.q(0.0))}
    _write_json(exp.out_dir / "solve.json", summary, exp.digest)
    return 0


def _cmd_simulate(exp: _Experiment, args) -> int:
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    bundle = exp.bundle()
    xi = None
    if not exp.model.is_complete:
        from .analytic import xi_incomplete
        xi = xi_incomplete(exp.model, exp.field("f"),
                           bundle.grid.times[:-1], bundle.y[:, :-1])
    export_csv(bundle, exp.out_dir / "paths.csv", xi=xi, digest=exp.digest)
    terminal = bundle.s[:, -1]
    _write_json(exp.out_dir / "simulate.json", {
        "n_paths": bundle.n_paths, "n_steps": bundle.n_steps, "seed": exp.seed,
        "mean_S_T": float(np.mean(terminal)),
        "se_S_T": float(np.std(terminal, ddof=1) / np.sqrt(bundle.n_paths)),
        "validation": [c.__dict__ for c in validate_model(exp.model).checks],
    }, exp.digest)
    return 0


def _cmd_nplayer(exp: _Experiment, args) -> int:
    players = exp.require_players()
    if exp.model.is_complete:
        report = nplayer_complete(players, exp.model, exp.bundle(),
                                  exp.complete_solutions())
        _write_report(exp, report, "nplayer", {"market": "complete"})
    else:
        report = nplayer_incomplete(players, exp.model, exp.bundle(),
                                    exp.field("f"), zeta_solution=exp.field("zeta"))
        _write_report(exp, report, "nplayer", {"market": "incomplete"})
    return 0


def _cmd_mfg(exp: _Experiment, args) -> int:
    if exp.model.is_complete:
        players = exp.require_players(at_least=2)
        mean_c = float(np.mean([p.c for p in players]))
        mean_x = float(np.mean([p.x0 for p in players]))
        report = mfg_complete(players, exp.model, exp.bundle(),
                              exp.complete_solutions(), mean_c=mean_c, mean_x=mean_x)
        _write_report(exp, report, "mfg", {"market": "complete"})
        return 0
    dist = exp.cfg.build_type_distribution()
    if dist is None:
        raise ConfigError("mfg on a factor market needs a [types] section")
    report = mfg_incomplete(dist, exp.model, exp.bundle(), exp.field("f"),
                            zeta_solution=exp.field("zeta"),
                            n_types=int(exp.cfg.mfg_option("n_types")),
                            seed=int(exp.cfg.mfg_option("type_seed")))
    _write_report(exp, report, "mfg", {"market": "incomplete"})
    return 0


def _cmd_single(exp: _Experiment, args) -> int:
    if not exp.model.is_complete:
        raise ConfigError("single is the complete-market problem; the factor "
                          "market single player is nplayer with one player")
    player = exp.require_players()[0]
    sol = single_player_complete(player, exp.model, exp.bundle(),
                                 exp.field("delta", 0), exp.field("H", 0))
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    times = sol.times
    pi_mean = sol.pi.mean(axis=0)
    x_mean = sol.wealth.mean(axis=0)
    rows = [(0, times[j], pi_mean[min(j, len(pi_mean) - 1)], x_mean[j])
            for j in range(len(times))]
    _write_table(exp, "single", "player,t,pi,X", rows)
    _write_json(exp.out_dir / "single_summary.json", {
        "delta0": sol.delta0, "H0": sol.H0, "value": sol.value,
    }, exp.digest)
    return 0


def _verify_nash(exp: _Experiment) -> dict:
    players = exp.require_players()
    if exp.model.is_complete:
        report = nplayer_complete(players, exp.model, exp.bundle(),
                                  exp.complete_solutions())
        deviations = [d for d in DEFAULT_DEVIATIONS if not isinstance(d, str)]
    else:
        report = nplayer_incomplete(players, exp.model, exp.bundle(),
                                    exp.field("f"), zeta_solution=exp.field("zeta"))
        deviations = DEFAULT_DEVIATIONS
    result = nash_deviation_test(players, report, deviations, exp.bundle(),
                                 z_threshold=exp.cfg.tolerance("deviation_z"))
    rows = [(arm.label, i, arm.means[i], arm.ses[i], arm.z[i])
            for arm in result.arms for i in range(len(players))]
    _write_csv(exp.out_dir / "verify_nash_arms.csv", "arm,player,mean,se,z",
               rows, exp.digest)
    return result.to_record()


def _verify_drift(exp: _Experiment) -> dict:
    drift_z = exp.cfg.tolerance("drift_z")
    records = []
    ok = True
    bundle = exp.bundle()
    if exp.model.is_complete:
        players = exp.require_players()
        grid = bundle.grid
        for i in range(len(players)):
            dsol = exp.field("delta", i)
            dq, _ = delta_price_under_q(exp.model, dsol, grid, bundle.n_paths,
                                        exp.seed + 2)
            r = drift_test(dq, f"delta_{i} under Q", martingale_z=drift_z)
            records.append(r.to_record())
            ok &= r.classification == "martingale-consistent"
            ratio = stock_over_delta_under_qtilde(exp.model, dsol, grid,
                                                  bundle.n_paths, exp.seed + 2)
            r = drift_test(ratio, f"S/delta_{i} under Qtilde", martingale_z=drift_z)
            records.append(r.to_record())
            ok &= r.classification == "martingale-consistent"
    else:
        players = exp.require_players()
        fsol = exp.field("f")
        report = nplayer_incomplete(players, exp.model, bundle, fsol,
                                    zeta_solution=exp.field("zeta"))
        for i, p in enumerate(players):
            u = incomplete_value_process(game_tilde_wealth(report, i),
                                         p.constant_delta(), fsol, bundle)
            r = drift_test(u, f"u_{i} under pi*", martingale_z=drift_z)
            records.append(r.to_record())
            ok &= r.classification == "martingale-consistent"
        # zero strategy must drift down when the risk premium is nonzero
        u0 = incomplete_value_process(
            integrate_wealth(bundle, 0.0, players[0].x0),
            players[0].constant_delta(), fsol, bundle)
        r = drift_test(u0, "u_0 under zero strategy", martingale_z=drift_z)
        records.append(r.to_record())
        ok &= r.mean_increment < -2.0 * r.se
    return {"pass": ok, "records": records}


def _verify_entropy(exp: _Experiment) -> dict:
    if exp.model.is_complete:
        raise ConfigError("the entropy identity is a factor-market test")
    check = entropy_identity_check(exp.model, exp.field("f"), exp.bundle(),
                                   zeta_solution=exp.field("zeta"))
    rec = check.to_record()
    rec["pass"] = abs(check.z) <= exp.cfg.tolerance("identity_z")
    return rec


def _verify_convergence(exp: _Experiment) -> dict:
    if exp.model.is_complete:
        raise ConfigError("the convergence study is a factor-market test")
    dist = exp.cfg.build_type_distribution()
    if dist is None:
        raise ConfigError("convergence needs a [types] section")
    tracked = None
    if exp.cfg.mfg_option("tracked_delta") is not None:
        from .market import PlayerType
        tracked = PlayerType(x0=float(exp.cfg.mfg_option("tracked_x0") or dist.mean_x),
                             delta=float(exp.cfg.mfg_option("tracked_delta")),
                             c=float(exp.cfg.mfg_option("tracked_c")))
    study = convergence_study(dist, exp.model, exp.bundle(), exp.field("f"),
                              exp.cfg.mfg_option("n_list"),
                              n_resamples=int(exp.cfg.mfg_option("n_resamples")),
                              seed=int(exp.cfg.mfg_option("type_seed")),
                              tracked=tracked)
    rec = study.to_record()
    rec["pass"] = bool(np.isfinite(study.slope)) and -0.65 <= study.slope <= -0.35
    return rec


_VERIFIERS = {
    "nash": _verify_nash,
    "drift": _verify_drift,
    "entropy": _verify_entropy,
    "convergence": _verify_convergence,
}


def _cmd_verify(exp: _Experiment, args) -> int:
    tests = args.tests or exp.cfg.run_option("tests")
    if not tests:
        raise ConfigError("no tests selected; set run.tests or pass --tests")
    unknown = [t for t in tests if t not in _VERIFIERS]
    if unknown:
        raise ConfigError(f"unknown tests {unknown}; "
                          f"available: {sorted(_VERIFIERS)}")
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    all_ok = True
    for name in tests:
        record = _VERIFIERS[name](exp)
        record["test"] = name
        _write_json(exp.out_dir / f"verify_{name}.json", record, exp.digest)
        all_ok &= bool(record.get("pass", False))
    return 0 if all_ok else _VERIFY_EXIT


def figure1_rows(mean_delta: float, c_values, crowd_c_values):
    """Rows (c, crowd_c, delta_bar - delta) of the interaction surface.

    The tolerance shift is mean_delta * c / (1 - crowd_c): positive for
    competitive players (c > 0), negative for homophilous ones, blowing up
    as the crowd's average weight approaches 1.
    """
    for crowd_c in crowd_c_values:
        if crowd_c == 1.0:
            raise ParamError("crowd-average weight grid must exclude 1")
        for c in c_values:
            yield (float(c), float(crowd_c),
                   mean_delta * float(c) / (1.0 - float(crowd_c)))


def _parse_grid(spec: str) -> np.ndarray:
    try:
        lo, hi, count = spec.split(":")
        return np.linspace(float(lo), float(hi), int(count))
    except ValueError as exc:
        raise ConfigError(f"grid spec {spec!r} must look like lo:hi:count") from exc


def _cmd_figure1(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    c_values = _parse_grid(args.c_grid)
    crowd_values = _parse_grid(args.crowd_c_grid)
    digest = f"figure1-N{args.n}-meandelta{args.mean_delta:g}"
    _write_csv(out_dir / "figure1.csv", "c,crowd_c,delta_bar_minus_delta",
               figure1_rows(args.mean_delta, c_values, crowd_values), digest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caragames",
        description="Equilibria and verification for CARA portfolio games",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="override run.out_dir")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker threads (vectorized kernels ignore this)")
        p.add_argument("--format", choices=("csv", "json"), default=None)

    p = sub.add_parser("solve", help="solve the PDE/ODE fields only")
    add_common(p)
    p.add_argument("--samples", type=int, default=101,
                   help="rows in the sampled p/q table (solvable family)")
    for name in ("simulate", "nplayer", "mfg", "single"):
        add_common(sub.add_parser(name))
    p = sub.add_parser("verify", help="run the selected statistical checks")
    add_common(p)
    p.add_argument("--tests", nargs="*", default=None,
                   help=f"subset of {sorted(_VERIFIERS)}")

    p = sub.add_parser("figure1", help="interaction surface delta_bar - delta")
    p.add_argument("--n", type=int, default=25, help="player count (metadata)")
    p.add_argument("--mean-delta", type=float, default=6.0,
                   help="crowd-average risk tolerance")
    p.add_argument("--c-grid", default="-1:1:41", help="lo:hi:count")
    p.add_argument("--crowd-c-grid", default="-1:0.9:39", help="lo:hi:count")
    p.add_argument("--out", default="out")
    return parser


_COMMANDS = {
    "solve": _cmd_solve,
    "simulate": _cmd_simulate,
    "nplayer": _cmd_nplayer,
    "mfg": _cmd_mfg,
    "single": _cmd_single,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "figure1":
            return _cmd_figure1(args)
        cfg = cfgmod.load(args.config)
        raw = dict(cfg.raw)
        run = dict(raw.get("run", {}))
        if args.seed is not None:
            run["seed"] = args.seed
        if args.out is not None:
            run["out_dir"] = args.out
        if args.threads is not None:
            run["threads"] = args.threads
        if args.format is not None:
            run["format"] = args.format
        raw["run"] = run
        cfg = cfgmod.ExperimentConfig(raw=raw)
        exp = _Experiment(cfg)
        return _COMMANDS[args.command](exp, args)
    except ConfigError as exc:
        _emit_error(exc, args)
        return _CONFIG_EXIT
    except FileNotFoundError as exc:
        _emit_error(exc, args)
        return _CONFIG_EXIT
    except CaraGamesError as exc:
        _emit_error(exc, args)
        return _NUMERIC_EXIT


def _emit_error(exc: Exception, args) -> None:
    record = {"error": type(exc).__name__, "message": str(exc),
              "command": getattr(args, "command", None)}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
