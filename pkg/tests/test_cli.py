import csv
import json
import os

import pytest

from qpot.cli import SchemaError, emit_plot_data, main, unreshape_plot_data

CONFIGS = {
    "qp_equilibrium": """
experiment = "quasipotential"
seed = 1
[quasipotential]
x_grid = [-1.0, 0.0]
T_grid = [1.0, 2.0]
dt = 0.05
cells = 4
""",
    "panel": """
experiment = "panel"
seed = 4
[panel]
n_list = [25, 100, 400]
x_grid = [0.5, 1.0]
gg_replications = 60
T_grid = [1.0, 2.0]
dt = 0.1
cells = 4
""",
    "simulate": """
experiment = "simulate"
seed = 11
[regime]
n = 10
beta = 1.0
[service]
family = "lognormal"
mean = 1.0
sigma_log = 0.5
[simulate]
horizon = 50.0
samples = 101
q0 = 12
""",
    "limit": """
experiment = "limit-solve"
[limit-solve]
T = 20.0
dt = 0.05
levels = [1.0, -1.0]
breaks = [1.0]
""",
    "bad_n": """
experiment = "simulate"
[regime]
n = -5
beta = 1.0
[simulate]
horizon = 1.0
""",
    "unknown_key": """
experiment = "limit-solve"
colour = "blue"
""",
}


def _cfg(tmp_path, name):
    p = tmp_path / f"{name}.toml"
    p.write_text(CONFIGS[name])
    return str(p)


def _run(tmp_path, name, out="out", *extra):
    out_dir = tmp_path / out
    code = main(["run", "--config", _cfg(tmp_path, name), "--out", str(out_dir), *extra])
    return code, out_dir


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(ln for ln in fh if not ln.startswith("#")))


def test_quasipotential_equilibrium_status_zero(tmp_path):
    code, out = _run(tmp_path, "qp_equilibrium")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["summary"]["I_s"]["-1.0"] == 0.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == 0 and manifest["config"]["experiment"] == "quasipotential"
    assert "curve.csv" in manifest["artifacts"] and manifest["seed_rule"]
    assert (out / "curve.csv").read_text().startswith(f"# config_hash={manifest['config_hash']}")


@pytest.mark.parametrize("name", ["bad_n", "unknown_key"])
def test_malformed_config_status_two(tmp_path, name):
    code, out = _run(tmp_path, name)
    assert code == 2
    assert os.listdir(out) == ["config_error.txt"]


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2


def test_panel_row_count_and_plot_round_trip(tmp_path):
    code, out = _run(tmp_path, "panel")
    assert code == 0
    rows = _rows(out / "panel.csv")
    body = rows[1:]
    assert len(body) >= 3 * 2 * 3
    assert len({r[3] for r in body}) >= 3
    plot = tmp_path / "plot.csv"
    assert main(["plot-data", str(out / "panel.csv"), "--out", str(plot)]) == 0
    back = tmp_path / "back.csv"
    assert main(["plot-data", str(plot), "--inverse", "--out", str(back)]) == 0
    assert back.read_text() == (out / "panel.csv").read_text()


def test_curve_plot_series(tmp_path):
    code, out = _run(tmp_path, "qp_equilibrium")
    text = emit_plot_data([str(out / "curve.csv")])
    series = {r[0] for r in csv.reader(ln for ln in text.splitlines() if not ln.startswith("#"))}
    assert series == {"series", "T=1.0", "T=2.0", "envelope"}
    with pytest.raises(SchemaError):
        unreshape_plot_data(_write(tmp_path / "p.csv", text))


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_plot_empty_input(tmp_path):
    empty = _write(tmp_path / "empty.csv", "")
    assert emit_plot_data([empty]) == "series,x,y,band_low,band_high\n"
    assert emit_plot_data([]) == "series,x,y,band_low,band_high\n"


def test_plot_schema_mismatch(tmp_path):
    bad = _write(tmp_path / "bad.csv", "a,b\n1,2\n")
    with pytest.raises(SchemaError):
        emit_plot_data([bad])
    assert main(["plot-data", bad]) == 2


@pytest.mark.parametrize("name", ["simulate", "limit", "qp_equilibrium"])
def test_rerun_is_byte_identical(tmp_path, name):
    _, a = _run(tmp_path, name, "a")
    _, b = _run(tmp_path, name, "b")
    csvs = sorted(f for f in os.listdir(a) if f.endswith(".csv"))
    assert csvs
    for f in csvs:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_override_changes_output(tmp_path):
    _, a = _run(tmp_path, "simulate", "a")
    _, b = _run(tmp_path, "simulate", "b", "--seed-override", "12")
    assert (a / "path.csv").read_bytes() != (b / "path.csv").read_bytes()


def test_limit_solve_summary(tmp_path):
    code, out = _run(tmp_path, "limit")
    assert code == 0
    rows = _rows(out / os.path.basename(sorted(f for f in os.listdir(out) if f.endswith(".csv"))[0]))
    assert abs(float(rows[-1][1]) + 1.0) < 1e-2
