"""
Log-Gaussian Cox process likelihood on a gridded sphere.

Conditional on the log-intensity ``Y`` the events of type ``i`` form a
Poisson process with intensity ``exp(Y_i)``, so for gridded data

    l*(Y; X) = sum_i [ sum_{events} Y_i(cell) - sum_cells exp(Y_i) w_cell ]

where ``w`` are integration weights.  By default the weights follow the
unit-cell convention (cell areas rescaled to average 1, so the window
measure ``|W|`` equals the number of cells) and intensities are in events
per mean cell.  The Monte Carlo likelihood averages ``exp(l*)`` over
simulated Gaussian fields and is returned on the log scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cov_approx import DenseFieldSimulator
from .covariance import MultiMaternParams
from .sphere_geom import Cells

MAX_CELL_MEAN = 1e12


class LikelihoodError(ValueError):
    pass


@dataclass
class PointPattern:
    """
    Events of one type, snapped to cell indices.

    ``type_id`` is 0-based.  A cell index may repeat (several events in
    one cell).
    """

    type_id: int
    events: np.ndarray

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=np.int64).ravel()

    @property
    def n(self) -> int:
        return self.events.size

    def counts(self, n_cells: int) -> np.ndarray:
        if self.n and (self.events.min() < 0 or self.events.max() >= n_cells):
            raise LikelihoodError(f"type {self.type_id}: event cell index outside 0..{n_cells - 1}")
        return np.bincount(self.events, minlength=n_cells).astype(float)

    @classmethod
    def from_counts(cls, type_id: int, counts) -> "PointPattern":
        counts = np.asarray(counts)
        return cls(type_id, np.repeat(np.arange(counts.size), counts.astype(np.int64)))


@dataclass
class IntensitySurface:
    """Log-intensities ``(p, N)`` on a set of cells."""

    cells: Cells
    log_lambda: np.ndarray
    unit_cell: bool = True

    def __post_init__(self):
        self.log_lambda = np.atleast_2d(np.asarray(self.log_lambda, dtype=float))
        if self.log_lambda.shape[1] != len(self.cells):
            raise LikelihoodError("log_lambda must have one column per cell")

    @property
    def p(self) -> int:
        return self.log_lambda.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return integration_weights(self.cells, self.unit_cell)


@dataclass
class ModelParams:
    """Mean coefficients ``eta`` (p x (q+1), intercept first) and covariance."""

    eta: np.ndarray
    cov: MultiMaternParams

    def __post_init__(self):
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        if self.eta.shape[0] != self.cov.p:
            raise LikelihoodError(
                f"eta has {self.eta.shape[0]} rows but the covariance has {self.cov.p} types"
            )

    @property
    def p(self) -> int:
        return self.cov.p

    @property
    def q(self) -> int:
        return self.eta.shape[1] - 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.eta.copy(), self.cov.copy())


def integration_weights(cells: Cells, unit_cell: bool = True, riemann_terms: int | None = None):
    """
    Riemann-sum weights for the intensity integral.

    With `riemann_terms` only that many evenly spaced cells carry weight;
    they are rescaled so the total measure is preserved.
    """
    w = cells.cell_weights if unit_cell else np.asarray(cells.area, dtype=float)
    if riemann_terms is None or riemann_terms >= w.size:
        return w
    if riemann_terms < 1:
        raise LikelihoodError("riemann_terms must be positive")
    keep = np.unique(np.linspace(0, w.size - 1, riemann_terms).round().astype(np.int64))
    sub = np.zeros_like(w)
    sub[keep] = w[keep] * (w.sum() / w[keep].sum())
    return sub


def mean_surface(covariates, eta) -> np.ndarray:
    """
    Linear predictor ``eta[:, 0] + covariates @ eta[:, 1:].T`` as ``(p, N)``.

    Parameters
    ----------
    covariates : (N, q) array-like
    eta : (p, q + 1) array-like
        Intercept in column 0.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != eta.shape[1] - 1:
        raise LikelihoodError(
            f"{x.shape[1]} covariate columns but eta has {eta.shape[1] - 1} slopes"
        )
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
    if bad.size:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if bad.size > 20 else "")
        raise LikelihoodError(f"missing covariate values in {bad.size} cell(s): {shown}")
    return eta[:, :1] + eta[:, 1:] @ x.T


def _count_matrix(patterns, p: int, n_cells: int) -> np.ndarray:
    counts = np.zeros((p, n_cells))
    for pat in patterns:
        if not 0 <= pat.type_id < p:
            raise LikelihoodError(f"pattern type {pat.type_id} outside 0..{p - 1}")
        counts[pat.type_id] += pat.counts(n_cells)
    return counts


def _as_patterns(patterns):
    return [patterns] if isinstance(patterns, PointPattern) else list(patterns)


def loglik_given_lambda(patterns, surface: IntensitySurface, weights=None) -> float:
    """
    ``sum log lambda(events) - integral of lambda`` for each pattern's type,
    summed over the patterns.
    """
    patterns = _as_patterns(patterns)
    w = surface.weights if weights is None else np.asarray(weights, dtype=float)
    y = surface.log_lambda
    counts = _count_matrix(patterns, surface.p, y.shape[1])
    types = sorted({pat.type_id for pat in patterns})
    cols = np.flatnonzero(w)
    event_term = float(np.sum(counts[types] * y[types]))
    integral = _integral(np.exp(y[types][:, cols])[None], w[cols])[0]
    return event_term - float(integral)


def _integral(lam: np.ndarray, w: np.ndarray) -> np.ndarray:
    # row-wise reductions so a replicate's value does not depend on its batch
    return np.sum(lam * w, axis=-1).sum(axis=-1)


def log_mean_exp(values) -> float:
    """
    ``log(mean(exp(values)))``, invariant to the order of `values`.

    The values are sorted before reduction so permuting them gives a
    bit-identical result; identical values return that value exactly.
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0 or np.isnan(v).any():
        raise LikelihoodError("log-likelihood replicates contain NaN or are empty")
    top = v[-1]
    if top == -np.inf:
        raise LikelihoodError("every replicate has zero likelihood (degenerate surface)")
    if top == np.inf:
        return np.inf
    return float(top + np.log(np.mean(np.exp(v - top))))


def replicate_logliks(theta: ModelParams, patterns, cells: Cells, covariates, s: int, seed: int,
                      simulator=None, unit_cell: bool = True, riemann_terms: int | None = None):
    """
    Per-replicate ``l*_j`` for ``Y = mean_surface + field_j``.

    Returns
    -------
    l : (s,) ndarray
    """
    patterns = _as_patterns(patterns)
    n_cells = len(cells)
    p = theta.p
    if simulator is None:
        simulator = DenseFieldSimulator(cells.locs)
    if simulator.n != n_cells:
        raise LikelihoodError("simulator locations do not match the cells")
    if covariates is None:
        covariates = np.zeros((n_cells, theta.q))
    mu = mean_surface(covariates, theta.eta)
    counts = _count_matrix(patterns, p, n_cells)
    types = np.array(sorted({pat.type_id for pat in patterns}), dtype=np.int64)
    w = integration_weights(cells, unit_cell, riemann_terms)
    cols = np.flatnonzero(w)
    mu_t, w_t = mu[types][:, cols], w[cols]
    counts_t = counts[types]
    base_events = float(np.sum(counts_t * mu[types]))

    out = np.empty(s)
    pos = 0
    with np.errstate(over="ignore"):
        for f in simulator.chunks(theta.cov, s, seed):
            f = f[:, types]
            k = f.shape[0]
            ev = base_events + np.einsum("kpn,pn->k", f, counts_t)
            lam = np.exp(mu_t + f[:, :, cols])
            out[pos:pos + k] = ev - _integral(lam, w_t)
            pos += k
    return out


def mc_loglik(theta: ModelParams, patterns, cells: Cells, covariates=None, s: int = 10000,
              seed: int = 0, simulator=None, unit_cell: bool = True,
              riemann_terms: int | None = None) -> float:
    """
    Monte Carlo log-likelihood ``log((1/s) sum_j exp(l*_j))``.

    Parameters
    ----------
    theta : ModelParams
    patterns : list of PointPattern
    cells : Cells
        Integration cells; also the simulation locations.
    covariates : (N, q) array-like, optional
        Omitted means an intercept-only mean.
    s, seed : int
        Replicate count and key of the common random numbers.
    simulator : DenseFieldSimulator or FsaFieldSimulator, optional
        Defaults to exact dense simulation on ``cells.locs``.
    riemann_terms : int, optional
        Number of cells used in the Riemann sum of the integral.
    """
    l = replicate_logliks(theta, patterns, cells, covariates, s, seed, simulator,
                          unit_cell, riemann_terms)
    return log_mean_exp(l)


def simulate_pattern(surface: IntensitySurface, seed: int, presence_only: bool = False):
    """
    Poisson counts per cell and type with mean ``exp(Y) w``.

    ``presence_only`` keeps at most one event per cell and type, like the
    rain-occurrence data.
    """
    y = surface.log_lambda
    with np.errstate(over="ignore"):
        mean = np.exp(y) * surface.weights[None, :]
    if not np.all(np.isfinite(mean)) or mean.max(initial=0.0) > MAX_CELL_MEAN:
        raise LikelihoodError(f"cell intensity mean exceeds {MAX_CELL_MEAN:g}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    counts = rng.poisson(mean)
    if presence_only:
        counts = np.minimum(counts, 1)
    return [PointPattern.from_counts(i, counts[i]) for i in range(surface.p)]
