"""
Maximum Monte Carlo likelihood fitting of the multivariate LGCP.

The objective is `mc_loglik` evaluated with one fixed set of standard
normals (common random numbers), which makes it a deterministic, continuous
function of the parameters.  Parameters are optimized in an unconstrained
packed vector:

    [eta (p x (q+1), row-major) | log beta | log sigma2 (p) | z (p(p-1)/2)]

where ``z`` maps through ``tanh`` to canonical partial correlations, which
build a Cholesky factor of the correlation matrix.  Every vector therefore
unpacks to a positive definite ``rho``.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .cov_approx import DenseFieldSimulator, FsaFieldSimulator
from .covariance import MultiMaternParams, validate_params
from .lgcp import (LikelihoodError, ModelParams, integration_weights, mc_loglik,
                   mean_surface, _count_matrix)
from .sphere_geom import place_knots

log = logging.getLogger(__name__)

DEFAULT_BETA_KM = 1000.0
S_REGIONAL = 10000
S_GLOBAL = 400


class FitError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# correlation matrix <-> unconstrained vector

def corr_to_unconstrained(rho: np.ndarray) -> np.ndarray:
    """Inverse of `unconstrained_to_corr`; strictly PD input required."""
    p = rho.shape[0]
    lf = np.linalg.cholesky(rho)
    z = []
    for i in range(1, p):
        acc = 0.0
        for j in range(i):
            cpc = lf[i, j] / np.sqrt(1.0 - acc)
            z.append(np.arctanh(np.clip(cpc, -1.0, 1.0)))
            acc += lf[i, j] ** 2
    return np.array(z)


def unconstrained_to_corr(z, p: int) -> np.ndarray:
    """Correlation matrix from ``p(p-1)/2`` reals via canonical partial correlations."""
    z = np.asarray(z, dtype=float)
    if z.size != p * (p - 1) // 2:
        raise ValueError(f"expected {p * (p - 1) // 2} correlation coordinates, got {z.size}")
    cpc = np.tanh(z)
    lf = np.zeros((p, p))
    lf[0, 0] = 1.0
    t = 0
    for i in range(1, p):
        acc = 0.0
        for j in range(i):
            lf[i, j] = cpc[t] * np.sqrt(1.0 - acc)
            acc += lf[i, j] ** 2
            t += 1
        lf[i, i] = np.sqrt(max(1.0 - acc, 0.0))
    rho = lf @ lf.T
    rho = 0.5 * (rho + rho.T)
    np.fill_diagonal(rho, 1.0)
    return rho


# ----------------------------------------------------------------------------
# packing and parameter names

def packed_size(p: int, q: int) -> int:
    return p * (q + 1) + 1 + p + p * (p - 1) // 2


def pack(params: ModelParams) -> np.ndarray:
    """Unconstrained vector for `params` (see module docstring for layout)."""
    cov = params.cov
    return np.concatenate([
        params.eta.ravel(),
        [np.log(cov.beta)],
        np.log(cov.sigma2),
        corr_to_unconstrained(cov.rho),
    ])


def unpack(x, p: int, q: int) -> ModelParams:
    x = np.asarray(x, dtype=float)
    if x.size != packed_size(p, q):
        raise ValueError(f"packed vector has length {x.size}, expected {packed_size(p, q)}")
    ne = p * (q + 1)
    eta = x[:ne].reshape(p, q + 1).copy()
    beta = float(np.exp(x[ne]))
    sigma2 = np.exp(x[ne + 1:ne + 1 + p])
    rho = unconstrained_to_corr(x[ne + 1 + p:], p)
    return ModelParams(eta, MultiMaternParams(sigma2, beta, rho))


def param_names(p: int, q: int, predictors=None) -> list[str]:
    """
    Names of the packed coordinates.

    Types are numbered from 1.  ``eta_<k>_<i>`` is the coefficient of
    predictor ``k`` (0 = intercept) for type ``i``; ``rho_<i><j>`` names the
    correlation coordinate attached to that pair.
    """
    names = [f"eta_{k}_{i + 1}" for i in range(p) for k in range(q + 1)]
    names.append("beta")
    names += [f"sigma2_{i + 1}" for i in range(p)]
    names += [f"rho_{j + 1}{i + 1}" for i in range(1, p) for j in range(i)]
    return names


_ETA = re.compile(r"eta_(\w+?)_(\d+)$")
_RHO = re.compile(r"rho_(\d)(\d)$")
_SIG = re.compile(r"sigma2_(\d+)$")


def _eta_index(token: str, q: int, predictors) -> int:
    if token.isdigit():
        k = int(token)
    elif token == "intercept":
        k = 0
    elif predictors is not None and token in predictors:
        k = list(predictors).index(token) + 1
    else:
        raise KeyError(f"unknown predictor '{token}'")
    if not 0 <= k <= q:
        raise KeyError(f"predictor index {k} outside 0..{q}")
    return k


def set_param(params: ModelParams, name: str, value: float, predictors=None) -> ModelParams:
    """Copy of `params` with one named scalar replaced."""
    out = params.copy()
    p, q = out.p, out.q
    value = float(value)
    if name in ("beta", "beta_km"):
        out.cov.beta = value
    elif m := _SIG.match(name):
        i = int(m.group(1)) - 1
        if not 0 <= i < p:
            raise KeyError(f"no type {i + 1}")
        out.cov.sigma2[i] = value
    elif m := _RHO.match(name):
        i, j = sorted((int(m.group(1)) - 1, int(m.group(2)) - 1))
        if not (0 <= i < j < p):
            raise KeyError(f"bad correlation name '{name}'")
        out.cov.rho[i, j] = out.cov.rho[j, i] = value
    elif m := _ETA.match(name):
        i = int(m.group(2)) - 1
        if not 0 <= i < p:
            raise KeyError(f"no type {i + 1}")
        out.eta[i, _eta_index(m.group(1), q, predictors)] = value
    else:
        raise KeyError(f"unknown parameter '{name}'")
    return out


def _packed_index(name: str, p: int, q: int, predictors=None) -> int:
    ne = p * (q + 1)
    if name in ("beta", "beta_km"):
        return ne
    if m := _SIG.match(name):
        return ne + int(m.group(1))
    if m := _RHO.match(name):
        i, j = sorted((int(m.group(1)) - 1, int(m.group(2)) - 1))
        return ne + 1 + p + j * (j - 1) // 2 + i
    if m := _ETA.match(name):
        i = int(m.group(2)) - 1
        return i * (q + 1) + _eta_index(m.group(1), q, predictors)
    raise KeyError(f"unknown parameter '{name}'")


def _check_rho_fix(fixed: set, p: int):
    # with the Cholesky construction, rho_ij for i > 1 is a fixed coordinate
    # only when the correlations feeding its row are fixed too
    for name in fixed:
        if m := _RHO.match(name):
            i, j = sorted((int(m.group(1)), int(m.group(2))))
            if i == 1:
                continue
            needed = {f"rho_{k}{i}" for k in range(1, i)} | {f"rho_{k}{j}" for k in range(1, i)}
            missing = sorted(n for n in needed if n not in fixed)
            if missing:
                raise FitError(f"fixing {name} also requires fixing {', '.join(missing)}")


# ----------------------------------------------------------------------------
# initial values

def poisson_glm(counts, covariates, offset, n_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """
    Poisson regression ``counts ~ exp(offset + [1, X] b)`` by damped Newton.

    Returns the coefficient vector (intercept first).
    """
    y = np.asarray(counts, dtype=float)
    x = np.column_stack([np.ones(y.size), np.asarray(covariates, dtype=float).reshape(y.size, -1)])
    b = np.zeros(x.shape[1])
    b[0] = np.log(max(y.sum(), 0.5) / np.exp(offset).sum())

    def nll(bb):
        eta = offset + x @ bb
        return float(np.sum(np.exp(eta) - y * eta))

    f = nll(b)
    for _ in range(n_iter):
        mu = np.exp(offset + x @ b)
        grad = x.T @ (mu - y)
        hess = (x * mu[:, None]).T @ x + 1e-10 * np.eye(x.shape[1])
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-8:
            cand = b - t * step
            fc = nll(cand)
            if fc <= f:
                break
            t *= 0.5
        if abs(f - fc) < tol * (1.0 + abs(f)):
            b, f = cand, fc
            break
        b, f = cand, fc
    return b


def initial_params(data, beta: float = DEFAULT_BETA_KM, unit_cell: bool = True) -> ModelParams:
    """Poisson-regression mean, range 1000 km, unit variances, zero correlation."""
    p = len(data.patterns)
    n = len(data.cells)
    x = data.covariates if data.covariates is not None else np.zeros((n, 0))
    counts = _count_matrix(data.patterns, p, n)
    offset = np.log(integration_weights(data.cells, unit_cell))
    eta = np.vstack([poisson_glm(counts[i], x, offset) for i in range(p)])
    return ModelParams(eta, MultiMaternParams(np.ones(p), beta, np.eye(p)))


# ----------------------------------------------------------------------------
# fitting

@dataclass
class FitConfig:
    s: int = S_REGIONAL
    seed: int = 0
    simulator: str = "dense"
    m: int = 100
    block_size: int = 100
    xatol: float = 1e-4
    maxiter: int = 2000
    fix: dict = field(default_factory=dict)
    riemann_terms: int | None = None
    unit_cell: bool = True
    init_step: dict = field(default_factory=lambda: {"eta": 0.1, "beta": 0.3, "sigma2": 0.3, "rho": 0.3})

    def settings(self) -> dict:
        return {
            "s": self.s, "seed": self.seed, "simulator": self.simulator, "m": self.m,
            "block_size": self.block_size, "xatol": self.xatol, "maxiter": self.maxiter,
            "fix": dict(self.fix), "riemann_terms": self.riemann_terms,
            "unit_cell": self.unit_cell,
        }


@dataclass
class FitResult:
    params: ModelParams
    final_mc_loglik: float
    iterations: int
    converged: bool
    trace: list
    settings: dict
    nfev: int = 0
    message: str = ""
    seconds: float = 0.0


def make_simulator(data, config: FitConfig):
    """Field simulator for the dataset cells according to `config`."""
    if config.simulator == "dense":
        return DenseFieldSimulator(data.cells.locs)
    if config.simulator == "fsa":
        knots = place_knots(data.region, config.m)
        return FsaFieldSimulator(data.cells.locs, knots, config.block_size)
    raise ValueError(f"unknown simulator '{config.simulator}' (use 'dense' or 'fsa')")


class Objective:
    """
    ``theta -> mc_loglik`` on one dataset with frozen random numbers.

    Call with a full `ModelParams` via `loglik`, or with the free packed
    coordinates via `__call__` (which returns the negative value for
    minimization).
    """

    def __init__(self, data, config: FitConfig, template: ModelParams, simulator=None):
        self.data = data
        self.config = config
        self.p, self.q = template.p, template.q
        self.predictors = getattr(data, "covariate_names", None)
        self.simulator = simulator if simulator is not None else make_simulator(data, config)
        fixed = {}
        for name, value in config.fix.items():
            template = set_param(template, name, value, self.predictors)
            fixed[_packed_index(name, self.p, self.q, self.predictors)] = name
        _check_rho_fix(set(config.fix), self.p)
        self.template = template
        self.x0_full = pack(template)
        self.free = np.array([k for k in range(self.x0_full.size) if k not in fixed], dtype=np.int64)
        self.nfev = 0

    def full_vector(self, x_free) -> np.ndarray:
        x = self.x0_full.copy()
        x[self.free] = x_free
        return x

    def params(self, x_free) -> ModelParams:
        params = unpack(self.full_vector(x_free), self.p, self.q)
        # fixed values exactly as given, not through the log/angle round trip
        for name, value in self.config.fix.items():
            if not name.startswith("rho"):
                params = set_param(params, name, value, self.predictors)
        return params

    def loglik(self, params: ModelParams) -> float:
        c = self.config
        return mc_loglik(params, self.data.patterns, self.data.cells, self.data.covariates,
                         s=c.s, seed=c.seed, simulator=self.simulator, unit_cell=c.unit_cell,
                         riemann_terms=c.riemann_terms)

    def __call__(self, x_free) -> float:
        self.nfev += 1
        try:
            value = self.loglik(self.params(x_free))
        except (LikelihoodError, np.linalg.LinAlgError):
            return np.inf
        return -value if np.isfinite(value) else np.inf

    def initial_simplex(self) -> np.ndarray:
        x0 = self.x0_full[self.free]
        names = param_names(self.p, self.q)
        steps = []
        for k in self.free:
            kind = names[k].split("_")[0]
            steps.append(self.config.init_step.get(kind, 0.1))
        sim = np.tile(x0, (x0.size + 1, 1))
        sim[1:] += np.diag(steps)
        return sim


def _surface_summary(data, params: ModelParams) -> str:
    mu = mean_surface(data.covariates if data.covariates is not None
                      else np.zeros((len(data.cells), 0)), params.eta)
    parts = [f"type {i + 1}: mean log-intensity in [{mu[i].min():.3g}, {mu[i].max():.3g}], "
             f"{data.patterns[i].n} events" for i in range(params.p)]
    return "; ".join(parts)


def fit(data, init: ModelParams, config: FitConfig | None = None, simulator=None) -> FitResult:
    """
    Maximize the Monte Carlo log-likelihood with Nelder-Mead.

    Parameters
    ----------
    data : PointPatternDataset
        Needs ``cells``, ``covariates``, ``patterns`` and (for FSA) ``region``.
    init : ModelParams
    config : FitConfig
        ``config.fix`` maps parameter names (see `param_names`) to values
        held constant.

    Returns
    -------
    FitResult
    """
    config = config or FitConfig()
    problems = validate_params(init.cov)
    if problems:
        raise FitError("invalid initial parameters: " + "; ".join(problems))
    t0 = time.perf_counter()
    obj = Objective(data, config, init, simulator)
    x0 = obj.x0_full[obj.free]
    f0 = obj(x0)
    if not np.isfinite(f0):
        raise FitError("non-finite Monte Carlo log-likelihood at the initial parameters; "
                       + _surface_summary(data, obj.template))

    trace = [(0, obj.full_vector(x0), -f0)]

    def callback(intermediate_result):
        trace.append((len(trace), obj.full_vector(intermediate_result.x), -intermediate_result.fun))

    if x0.size == 0:
        res = optimize.OptimizeResult(x=x0, fun=f0, nit=0, success=True, message="nothing to fit")
    else:
        res = optimize.minimize(
            obj, x0, method="Nelder-Mead", callback=callback,
            options={"xatol": config.xatol, "fatol": np.inf, "maxiter": config.maxiter,
                     "maxfev": 50 * config.maxiter, "initial_simplex": obj.initial_simplex(),
                     "adaptive": x0.size > 5},
        )
    params = obj.params(res.x)
    final = -obj(res.x)
    converged = bool(res.success)
    if not converged:
        log.warning("Nelder-Mead stopped without converging: %s", res.message)
    return FitResult(params, final, int(res.nit), converged, trace, config.settings(),
                     obj.nfev, str(res.message), time.perf_counter() - t0)


@dataclass
class ProfilePoint:
    value: float
    loglik: float | None
    error: str | None = None


def profile(data, params: ModelParams, which: str, values, config: FitConfig | None = None,
            simulator=None) -> list[ProfilePoint]:
    """
    Monte Carlo log-likelihood along one parameter, others held at `params`.

    The same random numbers are used at every grid value.  Values that give
    invalid parameters produce an entry with `error` set instead of raising.
    """
    config = config or FitConfig()
    obj = Objective(data, FitConfig(**{**config.__dict__, "fix": {}}), params, simulator)
    predictors = getattr(data, "covariate_names", None)
    out = []
    for v in values:
        try:
            cand = set_param(params, which, v, predictors)
            problems = validate_params(cand.cov)
            if problems:
                raise ValueError("; ".join(problems))
            out.append(ProfilePoint(float(v), obj.loglik(cand)))
        except (ValueError, KeyError, LikelihoodError, np.linalg.LinAlgError) as exc:
            out.append(ProfilePoint(float(v), None, str(exc)))
    return out
