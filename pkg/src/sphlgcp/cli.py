"""
Command-line entry point::

    sphlgcp <simulate|fit|loglik|profile|eof|shear|validate-fsa> --config run.ini
            [--seed N] [--fix name=value ...] [--out DIR]

Every command echoes its effective configuration into the output directory.
Failures print one line ``error: <kind>: <message>`` on stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cov_approx, data_pipeline as dp, estimation, lgcp
from .config import ConfigError, RunConfig, format_params, parse_fix
from .covariance import exponential_cov, validate_params
from .sphere_geom import build_grid, place_knots
from .synthetic import simulate_dataset, smooth_fields

log = logging.getLogger("sphlgcp")


def _prepare_out(cfg: RunConfig, args) -> Path:
    out = cfg.output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(cfg.effective_text())
    return out


def _load_dataset(cfg: RunConfig):
    inp = cfg.section("inputs")
    if "events" in inp:
        cov_path = cfg.path_of("inputs", "covariates") if "covariates" in inp else None
        types = [t.strip() for t in inp.get("type_names", "").split(",") if t.strip()] or None
        return dp.load_prepared_dataset(cfg.region(), cfg.resolution_deg,
                                        cfg.path_of("inputs", "events"), cov_path, types)
    return dp.assemble_dataset(cfg.dataset_config())


def _params_for(cfg: RunConfig, data):
    if cfg.parser.has_section("params"):
        params = cfg.model_params(p=data.p, q=data.q)
        if params.q != data.q:
            raise ConfigError(f"[params] eta has {params.q} slopes but the dataset has "
                              f"{data.q} covariates")
        return params
    return estimation.initial_params(data)


def cmd_simulate(cfg: RunConfig, args) -> int:
    fc = cfg.fit_config()
    grid = build_grid(cfg.region(), cfg.resolution_deg)
    sim = cfg.parser["simulate"] if cfg.parser.has_section("simulate") else {}
    q = int(sim.get("synthetic_covariates", 0))
    params = cfg.model_params(q=q)
    q = params.q
    problems = validate_params(params.cov)
    if problems:
        raise ConfigError("invalid [params]: " + "; ".join(problems))
    length = float(sim.get("covariate_length_km", 300.0))
    x = smooth_fields(grid.locs, q, fc.seed, length_km=length) if q else None
    if fc.simulator == "fsa":
        simulator = cov_approx.FsaFieldSimulator(grid.locs, place_knots(grid.region, fc.m),
                                                 fc.block_size)
    else:
        simulator = cov_approx.DenseFieldSimulator(grid.locs)
    presence = str(sim.get("presence_only", "false")).lower() in ("1", "true", "yes")
    data, surface = simulate_dataset(grid, params, x, fc.seed, simulator=simulator,
                                     presence_only=presence)
    out = _prepare_out(cfg, args)
    paths = data.write(out)
    dp.write_columnar(out / "surface.txt",
                      [dp.GriddedField(f"loglambda_{i + 1}", grid.locs, surface.log_lambda[i])
                       for i in range(params.p)],
                      comment="latent log-intensity (unit-cell convention)")
    for i, pat in enumerate(data.patterns):
        print(f"type {i + 1}: {pat.n} events")
    print(f"wrote {', '.join(str(p) for p in paths.values())}, {out / 'surface.txt'}")
    return 0


def _write_fit(out: Path, data, result: estimation.FitResult):
    params = result.params
    names = ["intercept"] + list(data.covariate_names)
    types = list(data.type_names)
    with open(out / "eta_table.csv", "w") as fh:
        fh.write(",".join(["predictor"] + types) + "\n")
        for k, name in enumerate(names):
            fh.write(",".join([name] + [repr(float(params.eta[i, k])) for i in range(params.p)]) + "\n")
    cov = params.cov
    with open(out / "cov_table.csv", "w") as fh:
        fh.write("parameter,value\n")
        fh.write(f"beta_km,{cov.beta!r}\n")
        for i in range(cov.p):
            for j in range(i + 1, cov.p):
                fh.write(f"rho_{i + 1}{j + 1},{float(cov.rho[i, j])!r}\n")
        for i in range(cov.p):
            fh.write(f"sigma2_{i + 1},{float(cov.sigma2[i])!r}\n")
    with open(out / "trace.csv", "w") as fh:
        fh.write("iteration,mc_loglik," + ",".join(estimation.param_names(params.p, params.q)) + "\n")
        for it, x, v in result.trace:
            fh.write(f"{it},{float(v)!r}," + ",".join(repr(float(t)) for t in x) + "\n")
    report = [
        f"final_mc_loglik = {result.final_mc_loglik!r}",
        f"iterations = {result.iterations}",
        f"function_evaluations = {result.nfev}",
        f"converged = {str(result.converged).lower()}",
        f"message = {result.message}",
        f"seconds = {result.seconds:.3f}",
        f"settings = {json.dumps(result.settings, sort_keys=True)}",
        "intensity_units = events per mean cell area (unit-cell convention)",
        format_params(params),
    ]
    (out / "report.txt").write_text("\n".join(report) + "\n")


def cmd_fit(cfg: RunConfig, args) -> int:
    data = _load_dataset(cfg)
    fc = cfg.fit_config()
    init = _params_for(cfg, data)
    result = estimation.fit(data, init, fc)
    out = _prepare_out(cfg, args)
    _write_fit(out, data, result)
    print(f"final_mc_loglik = {result.final_mc_loglik!r}")
    print(f"iterations = {result.iterations}, converged = {str(result.converged).lower()}")
    print(f"beta_km = {result.params.cov.beta!r}")
    if not result.converged:
        print(f"warning: optimizer did not converge ({result.message}); partial result written",
              file=sys.stderr)
    return 0


def cmd_loglik(cfg: RunConfig, args) -> int:
    data = _load_dataset(cfg)
    fc = cfg.fit_config()
    params = _params_for(cfg, data)
    obj = estimation.Objective(data, fc, params)
    t0 = time.perf_counter()
    value = obj.loglik(params)
    dt = time.perf_counter() - t0
    _prepare_out(cfg, args)
    print(f"mc_loglik = {value!r}")
    print(f"s = {fc.s}, seed = {fc.seed}, simulator = {fc.simulator}, seconds = {dt:.3f}")
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    data = _load_dataset(cfg)
    fc = cfg.fit_config()
    params = _params_for(cfg, data)
    sec = cfg.section("profile")
    which = sec.get("which", "beta").strip()
    if "values" in sec:
        values = json.loads(sec["values"])
    else:
        values = np.linspace(float(sec["start"]), float(sec["stop"]), int(sec.get("num", 11))).tolist()
    points = estimation.profile(data, params, which, values, fc)
    out = _prepare_out(cfg, args)
    with open(out / "profile.csv", "w") as fh:
        fh.write(f"{which},mc_loglik,error\n")
        for pt in points:
            ll = "" if pt.loglik is None else repr(pt.loglik)
            fh.write(f"{pt.value!r},{ll},{pt.error or ''}\n")
            print(f"{which} = {pt.value!r}  mc_loglik = {ll or 'error: ' + str(pt.error)}")
    return 0


def cmd_eof(cfg: RunConfig, args) -> int:
    sec = cfg.section("eof")
    fields = dp.load_columnar(cfg.path_of("eof", "input"))
    variables = [v.strip() for v in sec.get("variables", "t,q,u,v").split(",") if v.strip()]
    k = int(sec.get("k", dp.N_EOFS))
    out = _prepare_out(cfg, args)
    pcs, rows = [], []
    for var in variables:
        eof = dp.compute_eofs(dp.profile_stack(fields, var), k)
        pcs += eof.pcs
        for j in range(k):
            pct = 100.0 * eof.explained_variance[j]
            print(f"{var} EOF-{j + 1}: explained variance {pct:.3f}%")
            rows.append((var, j + 1, eof.explained_variance[j], eof.loadings[:, j],
                         dp.profile_stack(fields, var).levels))
    dp.write_columnar(out / "eof_pcs.txt", pcs, comment="EOF principal components")
    with open(out / "eof_loadings.csv", "w") as fh:
        fh.write("variable,eof,explained_variance,level_mb,loading\n")
        for var, j, ev, load, levels in rows:
            for lev, a in zip(levels, load):
                fh.write(f"{var},{j},{ev!r},{lev!r},{a!r}\n")
    return 0


def cmd_shear(cfg: RunConfig, args) -> int:
    fields = dp.load_columnar(cfg.path_of("shear", "input"))
    w = {(c, lev): dp.find_field(fields, c, lev) for c in ("u", "v") for lev in dp.SHEAR_LEVELS}
    ls, dpf, dds = dp.shear_fields(w["u", 900.0], w["u", 700.0], w["u", 300.0],
                                   w["v", 900.0], w["v", 700.0], w["v", 300.0])
    out = _prepare_out(cfg, args)
    dp.write_columnar(out / "shear.txt", [ls, dpf, dds], comment="ls, dp, dds shear variables")
    print(f"wrote {out / 'shear.txt'} ({ls.values.size} cells)")
    return 0


def cmd_validate_fsa(cfg: RunConfig, args) -> int:
    sec = cfg.section("validate_fsa")
    n = int(sec.get("n", 40))
    m = int(sec.get("m", 5))
    block = int(sec.get("block_size", 10))
    beta = float(sec.get("beta_km", 1465.57))
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    region = cfg.region()
    rng = np.random.default_rng(seed)
    lon = region.west + region.lon_width * rng.random(n)
    lat = np.degrees(np.arcsin(rng.uniform(np.sin(np.radians(region.lat_min)),
                                           np.sin(np.radians(region.lat_max)), n)))
    locs = np.column_stack([(lon + 180.0) % 360.0 - 180.0, lat])
    knots = place_knots(region, m)
    covfn = exponential_cov(beta)
    t0 = time.perf_counter()
    fsa = cov_approx.build_fsa(locs, knots, block, covfn)
    dt = time.perf_counter() - t0
    sigma = covfn(locs)
    w = cov_approx.implied_cov(fsa)
    frob = float(np.linalg.norm(w - sigma) / np.linalg.norm(sigma))
    diag = float(np.max(np.abs(np.diag(w) - np.diag(sigma))))
    _prepare_out(cfg, args)
    print(f"relative_frobenius_error = {frob!r}")
    print(f"diagonal_max_error = {diag!r}")
    print(f"n = {n}, m = {m}, block_size = {block}, blocks = {len(fsa.blocks)}, "
          f"build_seconds = {dt:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "loglik": cmd_loglik,
    "profile": cmd_profile,
    "eof": cmd_eof,
    "shear": cmd_shear,
    "validate-fsa": cmd_validate_fsa,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sphlgcp", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="run configuration file")
    ap.add_argument("--seed", type=int, default=None, help="override [model] seed")
    ap.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE",
                    help="hold a parameter fixed while fitting (repeatable)")
    ap.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        cfg.fix_overrides = parse_fix(args.fix)
        if args.seed is not None:
            cfg.parser["model"]["seed"] = str(args.seed)
        if args.out is not None:
            cfg.parser["output"]["dir"] = str(Path(args.out).resolve())
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
