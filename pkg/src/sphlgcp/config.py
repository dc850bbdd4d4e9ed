"""
Run configuration: an INI-style key/value file with sections.

Example::

    [region]
    lon_min = -180
    lon_max = -100.25
    lat_min = -15.25
    lat_max = 15.25
    resolution_deg = 0.5

    [inputs]
    events = data/events.txt
    covariates = data/covariates.txt

    [model]
    s = 10000
    seed = 1
    fix = beta=1465.57

    [params]
    sigma2 = [1, 1, 1]
    beta_km = 1465.57
    rho = [[1, 0.95, -0.11], [0.95, 1, 0.18], [-0.11, 0.18, 1]]

Relative paths are resolved against the directory of the config file.
Defaults follow the regional analysis settings (s = 10000, m = 100 knots,
100-point blocks, 0.5 degree cells).
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import MultiMaternParams
from .data_pipeline import RAIN_TYPES, DatasetConfig
from .estimation import FitConfig
from .lgcp import ModelParams
from .sphere_geom import Region

DEFAULTS = {
    "region": {"resolution_deg": "0.5"},
    "model": {
        "s": "10000", "seed": "0", "simulator": "dense", "m": "100", "block_size": "100",
        "xatol": "1e-4", "maxiter": "2000", "unit_cell": "true",
    },
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    pass


def parse_fix(items) -> dict:
    """``["beta=1465.57", "rho_12=0.9"]`` or ``"beta=1, rho_12=0.9"`` -> dict."""
    if isinstance(items, str):
        items = [t for t in items.replace(";", ",").split(",") if t.strip()]
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--fix expects name=value, got '{item}'")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--fix value for '{name.strip()}' is not a number") from None
    return out


def _json(section, key):
    try:
        return json.loads(section[key])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    base_dir: Path
    path: Path | None = None
    fix_overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        with open(path) as fh:
            cp.read_file(fh)
        return cls(cp, path.resolve().parent, path)

    @classmethod
    def from_string(cls, text: str, base_dir=".") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        cp.read_string(text)
        return cls(cp, Path(base_dir).resolve())

    # -- accessors ---------------------------------------------------------
    def section(self, name: str):
        if not self.parser.has_section(name):
            raise ConfigError(f"missing [{name}] section")
        return self.parser[name]

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def get_float(self, section: str, key: str) -> float:
        try:
            return self.section(section).getfloat(key) if self.has(section, key) else _missing(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None

    def get_int(self, section: str, key: str) -> int:
        try:
            return self.section(section).getint(key) if self.has(section, key) else _missing(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer") from None

    def path_of(self, section: str, key: str) -> Path:
        raw = self.section(section)[key] if self.has(section, key) else _missing(section, key)
        p = Path(raw.strip())
        return p if p.is_absolute() else (self.base_dir / p)

    def paths_of(self, section: str, key: str) -> list[Path]:
        raw = self.section(section)[key] if self.has(section, key) else _missing(section, key)
        out = []
        for tok in raw.replace("\n", ",").split(","):
            tok = tok.strip()
            if tok:
                p = Path(tok)
                out.append(p if p.is_absolute() else self.base_dir / p)
        return out

    # -- typed views -------------------------------------------------------
    def region(self) -> Region:
        return Region(*(self.get_float("region", k) for k in ("lon_min", "lon_max", "lat_min", "lat_max")))

    @property
    def resolution_deg(self) -> float:
        res = self.get_float("region", "resolution_deg")
        if not res > 0:
            raise ConfigError("[region] resolution_deg must be positive")
        return res

    def fit_config(self) -> FitConfig:
        m = self.section("model")
        fix = parse_fix(m.get("fix", ""))
        fix.update(self.fix_overrides)
        cfg = FitConfig(
            s=self.get_int("model", "s"),
            seed=self.get_int("model", "seed"),
            simulator=m.get("simulator").strip(),
            m=self.get_int("model", "m"),
            block_size=self.get_int("model", "block_size"),
            xatol=self.get_float("model", "xatol"),
            maxiter=self.get_int("model", "maxiter"),
            fix=fix,
            riemann_terms=self.get_int("model", "riemann_terms") if self.has("model", "riemann_terms") else None,
            unit_cell=m.getboolean("unit_cell"),
        )
        for name in ("s", "m", "block_size", "maxiter"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"[model] {name} must be positive")
        if not cfg.xatol > 0:
            raise ConfigError("[model] xatol must be positive")
        return cfg

    def dataset_config(self) -> DatasetConfig:
        inp = self.section("inputs")
        cols = tuple(t.strip() for t in inp.get("rain_columns", ",".join(RAIN_TYPES)).split(",") if t.strip())
        return DatasetConfig(
            region=self.region(),
            resolution_deg=self.resolution_deg,
            field_files=self.paths_of("inputs", "field_files"),
            rain_files=self.paths_of("inputs", "rain_files"),
            rain_columns=cols,
            mask_column=inp.get("mask_column", None),
        )

    def model_params(self, p: int | None = None, q: int | None = None) -> ModelParams:
        """Parameters from [params]; ``eta`` may be omitted when ``p``/``q`` are given."""
        sec = self.section("params")
        sigma2 = np.asarray(_json(sec, "sigma2"), dtype=float) if "sigma2" in sec else None
        if sigma2 is None:
            if p is None:
                _missing("params", "sigma2")
            sigma2 = np.ones(p)
        beta = self.get_float("params", "beta_km")
        rho = np.asarray(_json(sec, "rho"), dtype=float) if "rho" in sec else np.eye(sigma2.size)
        if "eta" in sec:
            eta = np.asarray(_json(sec, "eta"), dtype=float)
        elif q is not None:
            eta = np.zeros((sigma2.size, q + 1))
        else:
            _missing("params", "eta")
        cov = MultiMaternParams(sigma2, beta, rho)
        return ModelParams(eta, cov)

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        return self.path_of("output", "dir")

    def effective_text(self) -> str:
        """The config with defaults applied, overrides merged and paths absolute."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict({s: dict(self.parser[s]) for s in self.parser.sections()})
        path_keys = {("inputs", "field_files"), ("inputs", "rain_files"), ("inputs", "events"),
                     ("inputs", "covariates"), ("eof", "input"), ("shear", "input"),
                     ("output", "dir")}
        for sec, key in path_keys:
            if cp.has_option(sec, key):
                cp[sec][key] = ", ".join(str(p.resolve()) for p in self.paths_of(sec, key))
        if self.fix_overrides and cp.has_section("model"):
            fix = parse_fix(cp["model"].get("fix", ""))
            fix.update(self.fix_overrides)
            cp["model"]["fix"] = ", ".join(f"{k}={v!r}" for k, v in fix.items())
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _missing(section, key):
    raise ConfigError(f"missing required key '{key}' in [{section}]")


def format_params(params: ModelParams) -> str:
    """Serialize covariance/mean parameters in the [params] syntax."""
    cov = params.cov
    return "\n".join([
        f"sigma2 = {json.dumps(cov.sigma2.tolist())}",
        f"beta_km = {cov.beta!r}",
        f"rho = {json.dumps(cov.rho.tolist())}",
        f"eta = {json.dumps(params.eta.tolist())}",
    ])
