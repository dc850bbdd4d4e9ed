import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from sphlgcp.cli import main
from sphlgcp.data_pipeline import GriddedField, load_columnar, write_columnar
from sphlgcp.sphere_geom import Region, build_grid
from sphlgcp.synthetic import write_raw_inputs

REGION = """
[region]
lon_min = -150
lon_max = -145
lat_min = -2.5
lat_max = 2.5
resolution_deg = 0.5
"""


def write_config(path, body):
    path.write_text(REGION + body)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def counts_of(directory):
    return np.column_stack([f.values for f in load_columnar(directory / "events.txt")])


SIM = """
[model]
seed = {seed}
[params]
eta = {eta}
sigma2 = {sigma2}
beta_km = {beta}
rho = {rho}
[simulate]
synthetic_covariates = {q}
[output]
dir = out
"""


def simulate(tmp_path, capsys, name="sim", seed=1, eta="[[-1, 0.5], [-1, 0.2]]", sigma2="[0.5, 0.5]",
             rho="[[1, 0.3], [0.3, 1]]", q=1, beta=800):
    cfg = write_config(tmp_path / f"{name}.ini",
                       SIM.format(seed=seed, eta=eta, sigma2=sigma2, rho=rho, q=q, beta=beta))
    code, out, err = run(capsys, "simulate", "--config", cfg, "--out", tmp_path / name)
    assert code == 0, err
    return tmp_path / name


def test_simulate_deterministic(tmp_path, capsys):
    a = simulate(tmp_path, capsys, "a")
    b = simulate(tmp_path, capsys, "b")
    for f in ("events.txt", "covariates.txt", "surface.txt"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    c = simulate(tmp_path, capsys, "c", seed=2)
    assert (a / "events.txt").read_bytes() != (c / "events.txt").read_bytes()


def test_simulate_mean_only_poisson_total(tmp_path, capsys):
    n_cells = len(build_grid(Region(-150, -145, -2.5, 2.5), 0.5))
    b0 = math.log(100 / n_cells)
    totals = []
    for seed in range(60):
        d = simulate(tmp_path, capsys, f"h{seed}", seed=seed, eta=f"[[{b0!r}]]", sigma2="[1e-12]",
                     rho="[[1]]", q=0)
        totals.append(counts_of(d).sum())
    # Poisson(100) totals: mean and variance 100, checked at 4 standard errors
    assert abs(np.mean(totals) - 100) < 4 * math.sqrt(100 / 60)
    assert abs(np.var(totals, ddof=1) / 100 - 1) < 4 * math.sqrt(2 / 59)


def test_simulate_strong_correlation_co_occurs(tmp_path, capsys):
    def corr(rho):
        # short range and high intensity so cells carry independent information
        d = simulate(tmp_path, capsys, f"r{rho}", seed=4, eta="[[1.5], [1.5]]", sigma2="[1, 1]",
                     rho=f"[[1, {rho}], [{rho}, 1]]", q=0, beta=50)
        c = counts_of(d)
        return np.corrcoef(np.log1p(c[:, 0]), np.log1p(c[:, 1]))[0, 1]

    hi, lo = corr(0.99), corr(0.0)
    assert hi > 0.6
    assert hi > lo + 0.3


FIT = """
[inputs]
events = {events}
covariates = {covariates}
[model]
s = 200
seed = 3
xatol = 1e-2
maxiter = 200
[output]
dir = fit
"""


@pytest.fixture
def simulated(tmp_path, capsys):
    return simulate(tmp_path, capsys, "data")


def fit_config(tmp_path, simulated, extra=""):
    return write_config(tmp_path / "fit.ini",
                        FIT.format(events=simulated / "events.txt",
                                   covariates=simulated / "covariates.txt") + extra)


def test_fit_writes_tables_and_holds_fixed_beta(tmp_path, capsys, simulated):
    cfg = fit_config(tmp_path, simulated)
    code, out, err = run(capsys, "fit", "--config", cfg, "--fix", "beta=1465.57",
                         "--out", tmp_path / "fit")
    assert code == 0, err
    eta = (tmp_path / "fit" / "eta_table.csv").read_text().splitlines()
    assert eta[0] == "predictor,type1,type2"
    assert [l.split(",")[0] for l in eta[1:]] == ["intercept", "x1"]
    cov = dict(l.split(",") for l in (tmp_path / "fit" / "cov_table.csv").read_text().splitlines()[1:])
    assert float(cov["beta_km"]) == 1465.57
    assert set(cov) == {"beta_km", "rho_12", "sigma2_1", "sigma2_2"}
    trace = (tmp_path / "fit" / "trace.csv").read_text().splitlines()
    vals = [float(l.split(",")[1]) for l in trace[1:]]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert "beta=1465.57" in (tmp_path / "fit" / "effective_config.ini").read_text()
    assert "final_mc_loglik" in (tmp_path / "fit" / "report.txt").read_text()


def test_fit_rerun_from_effective_config_is_identical(tmp_path, capsys, simulated):
    cfg = fit_config(tmp_path, simulated)
    assert run(capsys, "fit", "--config", cfg, "--fix", "beta=900", "--out", tmp_path / "a")[0] == 0
    eff = tmp_path / "a" / "effective_config.ini"
    assert run(capsys, "fit", "--config", eff, "--out", tmp_path / "b")[0] == 0
    for f in ("eta_table.csv", "cov_table.csv", "trace.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_loglik_repeatable(tmp_path, capsys, simulated):
    cfg = fit_config(tmp_path, simulated, "[params]\nsigma2 = [0.5, 0.5]\nbeta_km = 800\n"
                                          "rho = [[1, 0.3], [0.3, 1]]\neta = [[-1, 0.5], [-1, 0.2]]\n")
    first = run(capsys, "loglik", "--config", cfg)
    second = run(capsys, "loglik", "--config", cfg)
    assert first[0] == second[0] == 0
    assert first[1].splitlines()[0] == second[1].splitlines()[0]
    assert first[1].startswith("mc_loglik = ")


def test_profile_writes_csv(tmp_path, capsys, simulated):
    cfg = fit_config(tmp_path, simulated, "[profile]\nwhich = beta\nvalues = [400, 800, 1600]\n")
    code, out, err = run(capsys, "profile", "--config", cfg, "--out", tmp_path / "prof")
    assert code == 0, err
    lines = (tmp_path / "prof" / "profile.csv").read_text().splitlines()
    assert lines[0] == "beta,mc_loglik,error" and len(lines) == 4


def test_missing_covariate_column_is_named(tmp_path, capsys):
    grid = build_grid(Region(-150, -145, -2.5, 2.5), 0.5)
    fields, rain = write_raw_inputs(tmp_path / "raw", grid, seed=1)
    good = [f for f in load_columnar(fields[0]) if f.name != "lh"]
    write_columnar(fields[0], good)
    cfg = write_config(tmp_path / "raw.ini", f"""
[inputs]
field_files = {fields[0]}
rain_files = {", ".join(str(r) for r in rain)}
[model]
s = 50
""")
    code, out, err = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2
    assert err.startswith("error: ") and "'lh'" in err


def test_missing_config_and_bad_fix(tmp_path, capsys, simulated):
    code, _, err = run(capsys, "loglik", "--config", tmp_path / "nope.ini")
    assert code == 2 and err.startswith("error: ")
    cfg = fit_config(tmp_path, simulated)
    code, _, err = run(capsys, "fit", "--config", cfg, "--fix", "gamma=1")
    assert code == 2 and "gamma" in err


def test_validate_fsa_fixture(tmp_path, capsys):
    cfg = write_config(tmp_path / "v.ini", "[validate_fsa]\nn = 40\nm = 5\nblock_size = 10\n"
                                           "[output]\ndir = v\n")
    code, out, err = run(capsys, "validate-fsa", "--config", cfg)
    assert code == 0, err
    vals = dict(l.split(" = ", 1) for l in out.splitlines()[:2])
    assert 0.0 < float(vals["relative_frobenius_error"]) < 0.05
    assert float(vals["diagonal_max_error"]) <= 1e-12


def test_eof_rank_one(tmp_path, capsys):
    grid = build_grid(Region(-150, -145, -2.5, 2.5), 0.5)
    a = np.random.default_rng(0).normal(size=len(grid))
    fields = [GriddedField("t", grid.locs, 280 + k * a, lev)
              for k, lev in zip((1.0, 2.0, -1.0), (900.0, 700.0, 300.0))]
    write_columnar(tmp_path / "prof.txt", fields)
    cfg = write_config(tmp_path / "e.ini", f"[eof]\ninput = {tmp_path / 'prof.txt'}\nvariables = t\n"
                                           "k = 1\n[output]\ndir = e\n")
    code, out, err = run(capsys, "eof", "--config", cfg)
    assert code == 0, err
    assert out.strip() == "t EOF-1: explained variance 100.000%"
    assert (tmp_path / "e" / "eof_loadings.csv").exists()


def test_shear_command(tmp_path, capsys):
    locs = np.array([[-149.75, -2.25], [-149.25, -2.25]])
    wind = {("u", 900.0): [3.0, 1.5], ("u", 700.0): [0.0, 1.5], ("u", 300.0): [0.0, 0.0],
            ("v", 900.0): [4.0, 2.0], ("v", 700.0): [0.0, 2.0], ("v", 300.0): [0.0, 0.0]}
    write_columnar(tmp_path / "w.txt", [GriddedField(c, locs, np.array(v), lev)
                                        for (c, lev), v in wind.items()])
    cfg = write_config(tmp_path / "s.ini", f"[shear]\ninput = {tmp_path / 'w.txt'}\n"
                                           "[output]\ndir = s\n")
    code, out, err = run(capsys, "shear", "--config", cfg)
    assert code == 0, err
    got = {f.name: f.values for f in load_columnar(tmp_path / "s" / "shear.txt")}
    assert got["dp"][0] == 5.0
    assert got["ls"][1] == 0.0


@pytest.mark.skipif(shutil.which("sphlgcp") is None, reason="console script not installed")
def test_console_script_usage_error():
    res = subprocess.run(["sphlgcp", "bogus", "--config", "x.ini"], capture_output=True, text=True)
    assert res.returncode != 0 and "invalid choice" in res.stderr


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sphlgcp.cli", "loglik", "--config",
                          str(tmp_path / "missing.ini")], capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.startswith("error: ")
