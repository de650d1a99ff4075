import json

import numpy as np
import pytest

from caragames import config as cfgmod
from caragames.cli import main
from caragames.errors import ConfigError

SOLVABLE_TOML = """
[model]
family = "solvable"
mu = 0.5
beta = 0.3
ell = 1.0
m = 0.5
rho = -0.5
horizon = 1.0
y0 = 0.5
s0 = 1.0
y_lo = 0.002
y_hi = 4.0

[[players]]
x0 = 1.0
delta = 2.0
c = 0.5

[[players]]
x0 = 0.5
delta = 1.0
c = -0.1

[[players]]
x0 = 2.0
delta = 3.0
c = 0.6

[types]
x0 = {kind = "constant", value = 1.0}
delta = {kind = "uniform", lo = 1.0, hi = 3.0}
c = {kind = "uniform", lo = -0.5, hi = 0.5}

[grids]
n_steps = 64
n_paths = 2000
pde_nt = 200
pde_nx = 200
space_lo = 0.002
space_hi = 4.0

[run]
seed = 11
out_dir = "out"
tests = ["nash"]
"""

COMPLETE_TOML = """
[model]
family = "complete"
mu = 0.07
sigma = 0.2
horizon = 1.0
s0 = 1.0

[[players]]
x0 = 1.0
payoff = "2 + 0.1*S"
c = 0.0

[[players]]
x0 = 0.5
payoff = "1 + 0.05*S"
c = 0.3

[grids]
n_steps = 32
n_paths = 1500
pde_nt = 150
pde_nx = 200

[run]
seed = 3
out_dir = "out"
"""


# -- config parsing -----------------------------------------------------------


def test_parse_and_build_solvable():
    cfg = cfgmod.parse(SOLVABLE_TOML)
    model, params = cfg.build_model()
    assert not model.is_complete
    assert params.ell == 1.0
    players = cfg.build_players()
    assert len(players) == 3 and players[0].constant_delta() == 2.0
    dist = cfg.build_type_distribution()
    assert dist.mean_delta == 2.0


def test_parse_complete_with_expressions():
    cfg = cfgmod.parse(COMPLETE_TOML)
    model, params = cfg.build_model()
    assert model.is_complete and params is None
    assert model.sigma(0.0, 1.0) == 0.2
    players = cfg.build_players()
    np.testing.assert_allclose(players[0].terminal_delta(np.array([10.0])), [3.0])


def test_roundtrip_is_lossless():
    cfg = cfgmod.parse(SOLVABLE_TOML)
    text = cfgmod.to_toml(cfg)
    again = cfgmod.parse(text)
    assert again.raw == cfg.raw
    assert again.digest() == cfg.digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        cfgmod.parse(SOLVABLE_TOML + "\n[model_extra]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="unknown"):
        cfgmod.parse(SOLVABLE_TOML.replace("seed = 11", "seed = 11\nbogus = 2"))


def test_malformed_toml_rejected():
    with pytest.raises(ConfigError, match="parse"):
        cfgmod.parse("[model\nfamily =")


def test_player_needs_exactly_one_tolerance_spec():
    bad = COMPLETE_TOML.replace('payoff = "2 + 0.1*S"',
                                'payoff = "2 + 0.1*S"\ndelta = 1.0')
    with pytest.raises(ConfigError, match="either"):
        cfgmod.parse(bad)


def test_digest_tracks_seed():
    cfg = cfgmod.parse(SOLVABLE_TOML)
    other = cfgmod.parse(SOLVABLE_TOML.replace("seed = 11", "seed = 12"))
    assert cfg.digest() != other.digest()


# -- CLI ----------------------------------------------------------------------


@pytest.fixture()
def solvable_config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(SOLVABLE_TOML.replace('out_dir = "out"',
                                          f'out_dir = "{tmp_path}/out"'))
    return path


@pytest.fixture()
def complete_config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(COMPLETE_TOML.replace('out_dir = "out"',
                                          f'out_dir = "{tmp_path}/out"'))
    return path


def test_cli_verify_nash_exits_zero(solvable_config, tmp_path):
    assert main(["verify", "--config", str(solvable_config)]) == 0
    record = json.loads((tmp_path / "out" / "verify_nash.json").read_text())
    assert record["pass"] is True
    assert record["test"] == "nash"
    assert "config_digest" in record


def test_cli_rejects_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nfamily = \"solvable\"\nnonsense_key = 1\n")
    assert main(["solve", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_cli_no_equilibrium_exits_three(tmp_path, capsys):
    text = SOLVABLE_TOML.replace("c = 0.5", "c = 1.0") \
                        .replace("c = -0.1", "c = 1.0") \
                        .replace("c = 0.6", "c = 1.0") \
                        .replace('out_dir = "out"', f'out_dir = "{tmp_path}/out"')
    path = tmp_path / "ones.toml"
    path.write_text(text)
    assert main(["nplayer", "--config", str(path)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "NoEquilibrium"


def test_cli_outputs_are_reproducible(solvable_config, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["nplayer", "--config", str(solvable_config), "--out", str(out_a)]) == 0
    assert main(["nplayer", "--config", str(solvable_config), "--out", str(out_b)]) == 0
    for name in ("nplayer.csv", "nplayer_summary.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_cli_seed_changes_outputs(solvable_config, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["nplayer", "--config", str(solvable_config), "--out", str(out_a)]) == 0
    assert main(["nplayer", "--config", str(solvable_config), "--out", str(out_b),
                 "--seed", "999"]) == 0
    assert (out_a / "nplayer.csv").read_bytes() != (out_b / "nplayer.csv").read_bytes()


def test_cli_solve_emits_fields_and_riccati(solvable_config, tmp_path):
    assert main(["solve", "--config", str(solvable_config)]) == 0
    out = tmp_path / "out"
    for name in ("pde_f.csv", "pde_zeta.csv", "riccati.csv", "solve.json"):
        assert (out / name).exists()
    lines = (out / "pde_f.csv").read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    assert lines[1] == "t,x,u,u_x"
    summary = json.loads((out / "solve.json").read_text())
    assert summary["riccati"]["delta"] == pytest.approx(0.8725)


def test_cli_simulate_writes_paths(solvable_config, tmp_path):
    small = tmp_path / "small.toml"
    small.write_text(solvable_config.read_text()
                     .replace("n_paths = 2000", "n_paths = 20"))
    assert main(["simulate", "--config", str(small)]) == 0
    lines = (tmp_path / "out" / "paths.csv").read_text().splitlines()
    assert lines[1] == "path,t,W,W_perp,Y,S,logw_QMM,logw_Qtilde"
    assert len(lines) == 2 + 20 * 65


def test_cli_mfg_incomplete(solvable_config, tmp_path):
    assert main(["mfg", "--config", str(solvable_config)]) == 0
    summary = json.loads((tmp_path / "out" / "mfg_summary.json").read_text())
    assert summary["market"] == "incomplete"
    assert all(v < 0 for v in summary["values"])


def test_cli_single_and_nplayer_complete(complete_config, tmp_path):
    assert main(["single", "--config", str(complete_config)]) == 0
    summary = json.loads((tmp_path / "out" / "single_summary.json").read_text())
    assert summary["delta0"] == pytest.approx(2.1, rel=1e-6)
    assert summary["value"] < 0
    assert main(["nplayer", "--config", str(complete_config)]) == 0
    nsum = json.loads((tmp_path / "out" / "nplayer_summary.json").read_text())
    assert nsum["market"] == "complete"


def test_cli_single_rejects_factor_market(solvable_config):
    assert main(["single", "--config", str(solvable_config)]) == 2


def test_cli_verify_drift_complete(complete_config, tmp_path):
    assert main(["verify", "--config", str(complete_config),
                 "--tests", "drift"]) == 0
    record = json.loads((tmp_path / "out" / "verify_drift.json").read_text())
    assert record["pass"] is True
    assert len(record["records"]) == 4  # two players x two martingale checks


def test_cli_figure1(tmp_path):
    out = tmp_path / "fig"
    assert main(["figure1", "--mean-delta", "6", "--c-grid=-1:1:5",
                 "--crowd-c-grid=-1:0.5:4", "--out", str(out)]) == 0
    lines = (out / "figure1.csv").read_text().splitlines()
    assert lines[1] == "c,crowd_c,delta_bar_minus_delta"
    assert len(lines) == 2 + 5 * 4
    # spot value: c = 0.5, crowd 0.5 -> 6 * 0.5 / 0.5 = 6
    row = [l for l in lines if l.startswith("0.5,0.5,")]
    assert row and float(row[0].split(",")[2]) == 6.0


def test_cli_unknown_test_name(solvable_config, capsys):
    assert main(["verify", "--config", str(solvable_config),
                 "--tests", "nonsense"]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_cli_format_json_switches_tables(solvable_config, tmp_path):
    assert main(["nplayer", "--config", str(solvable_config),
                 "--format", "json"]) == 0
    out = tmp_path / "out"
    assert not (out / "nplayer.csv").exists()
    table = json.loads((out / "nplayer.json").read_text())
    assert table["header"] == ["player", "t", "pi", "X"]
    assert len(table["rows"]) == 3 * 65


def test_cli_verification_failure_exits_one(solvable_config, tmp_path):
    # an unreachable deviation threshold makes the nash check fail
    text = solvable_config.read_text() + "\n[tolerances]\ndeviation_z = -1e9\n"
    path = tmp_path / "strict.toml"
    path.write_text(text)
    assert main(["verify", "--config", str(path)]) == 1
    record = json.loads((tmp_path / "out" / "verify_nash.json").read_text())
    assert record["pass"] is False


def test_cli_verify_nash_complete_market(complete_config, tmp_path):
    assert main(["verify", "--config", str(complete_config),
                 "--tests", "nash"]) == 0
    record = json.loads((tmp_path / "out" / "verify_nash.json").read_text())
    assert record["pass"] is True
    # wealth-dependent games only get scaling deviations
    assert all(arm["label"].startswith("scale") for arm in record["arms"])
    arms_csv = (tmp_path / "out" / "verify_nash_arms.csv").read_text().splitlines()
    assert arms_csv[1] == "arm,player,mean,se,z"
    assert len(arms_csv) == 2 + 5 * 2


def test_cli_solve_complete_market(complete_config, tmp_path):
    assert main(["solve", "--config", str(complete_config)]) == 0
    out = tmp_path / "out"
    for name in ("pde_delta_0.csv", "pde_H_0.csv", "pde_delta_1.csv",
                 "pde_H_1.csv", "solve.json"):
        assert (out / name).exists()
    summary = json.loads((out / "solve.json").read_text())
    assert summary["player_0"]["delta0"] == pytest.approx(2.1, rel=1e-6)
