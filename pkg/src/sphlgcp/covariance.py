"""
Parsimonious multivariate Matern cross-covariance on the sphere.

All types share one range ``beta`` (km of great-circle distance) and the
smoothness is fixed at 0.5, so the joint covariance of ``p`` processes at
``N`` locations is the Kronecker product ``P (x) K`` with
``P = diag(sigma) rho diag(sigma)`` and ``K[k, l] = exp(-d(s_k, s_l) / beta)``.
Joint vectors are ordered type-major: all locations of type 1, then type 2...
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .sphere_geom import as_locs, distance_matrix

SPHERE_NU = 0.5
RHO_PSD_TOL = 1e-10


class CovarianceError(ValueError):
    pass


def matern_corr(d, beta: float, nu: float = SPHERE_NU):
    """
    Matern correlation ``2^(1-nu)/Gamma(nu) (d/beta)^nu K_nu(d/beta)``.

    ``nu = 0.5`` is evaluated in closed form as ``exp(-d / beta)``.  Other
    smoothness values are only valid in Euclidean space and are kept for
    testing; `validate_params` rejects them for sphere use.
    """
    if not beta > 0:
        raise CovarianceError(f"range beta must be positive, got {beta}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise CovarianceError("distances must be nonnegative")
    t = d / beta
    if nu == 0.5:
        out = np.exp(-t)
    else:
        with np.errstate(invalid="ignore"):
            out = 2.0 ** (1.0 - nu) / special.gamma(nu) * t**nu * special.kv(nu, t)
        out = np.where(t == 0.0, 1.0, out)
        out = np.where(np.isfinite(out), out, 0.0)
    return out if out.ndim else float(out)


@dataclass
class MultiMaternParams:
    """
    Parameters of the p-variate exponential (Matern, nu = 0.5) model.

    Attributes
    ----------
    sigma2 : (p,) array
        Marginal variances.
    beta : float
        Common range in km.
    rho : (p, p) array
        Cross-correlation matrix (unit diagonal).
    nu : float
        Smoothness; must stay 0.5 on the sphere.
    """

    sigma2: np.ndarray
    beta: float
    rho: np.ndarray = None
    nu: float = SPHERE_NU

    def __post_init__(self):
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.beta = float(self.beta)
        if self.rho is None:
            self.rho = np.eye(self.sigma2.size)
        self.rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        if self.rho.shape != (self.p, self.p):
            raise CovarianceError(
                f"rho must be {self.p}x{self.p} to match sigma2, got {self.rho.shape}"
            )

    @property
    def p(self) -> int:
        return self.sigma2.size

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def type_cov(self) -> np.ndarray:
        """Zero-lag cross-covariance ``P = diag(sigma) rho diag(sigma)``."""
        s = self.sigma
        return s[:, None] * self.rho * s[None, :]

    def type_factor(self) -> np.ndarray:
        """Lower-triangular ``L`` with ``L L^T = P``; tolerates zero variances."""
        lr = _psd_cholesky(self.rho)
        return self.sigma[:, None] * lr

    def corrfn(self):
        """Univariate correlation function ``(locs_a, locs_b) -> K``."""
        return exponential_cov(self.beta)

    def copy(self) -> "MultiMaternParams":
        return MultiMaternParams(self.sigma2.copy(), self.beta, self.rho.copy(), self.nu)


def _psd_cholesky(c: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        # singular but PSD correlation (e.g. rho_12 = 1): eigen square root,
        # re-triangularized through QR so the factor stays lower-triangular
        w, q = np.linalg.eigh(c)
        root = q * np.sqrt(np.clip(w, 0.0, None))
        r = np.linalg.qr(root.T, mode="r")
        r = r * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))[:, None]
        return r.T


def exponential_cov(beta: float, sigma2: float = 1.0):
    """Return ``covfn(locs_a, locs_b=None)`` for ``sigma2 * exp(-d / beta)``."""
    if not beta > 0:
        raise CovarianceError(f"range beta must be positive, got {beta}")

    def covfn(locs_a, locs_b=None):
        return sigma2 * np.exp(-distance_matrix(locs_a, locs_b) / beta)

    covfn.beta = beta
    covfn.sigma2 = sigma2
    return covfn


def cross_cov(i: int, j: int, d, params: MultiMaternParams):
    """
    Cross-covariance between types `i` and `j` (0-based) at distance `d` km:
    ``rho_ij sigma_i sigma_j exp(-d / beta)``.
    """
    p = params.p
    if not (0 <= i < p and 0 <= j < p):
        raise IndexError(f"type indices ({i}, {j}) out of range for p = {p}")
    rij = 1.0 if i == j else params.rho[i, j]
    return rij * np.sqrt(params.sigma2[i] * params.sigma2[j]) * matern_corr(d, params.beta, params.nu)


@dataclass
class JointCovInfo:
    duplicate_pairs: list = field(default_factory=list)

    @property
    def rank_deficient(self) -> bool:
        return bool(self.duplicate_pairs)


def assemble_joint_cov(locs, params: MultiMaternParams, return_info: bool = False):
    """
    Dense ``(p N) x (p N)`` joint covariance ``P (x) K`` in type-major order.

    Duplicate locations are allowed; they make the matrix singular, which
    is reported through a warning and, with ``return_info=True``, through
    the returned `JointCovInfo`.
    """
    locs = as_locs(locs)
    d = distance_matrix(locs)
    k = matern_corr(d, params.beta, params.nu)
    joint = np.kron(params.type_cov(), k)
    n = locs.shape[0]
    iu = np.triu_indices(n, 1)
    dup = np.flatnonzero(d[iu] == 0.0)
    info = JointCovInfo([(int(iu[0][t]), int(iu[1][t])) for t in dup])
    if info.rank_deficient:
        warnings.warn(f"{len(dup)} duplicate location pair(s); joint covariance is singular",
                      stacklevel=2)
    return (joint, info) if return_info else joint


def validate_params(params: MultiMaternParams) -> list[str]:
    """
    List the ways `params` fails to define a valid covariance on the sphere.

    An empty list means the parameters are usable.
    """
    problems = []
    rho = params.rho
    sigma2 = params.sigma2
    if not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
        problems.append(f"marginal variances must be positive, got {sigma2.tolist()}")
    if not (np.isfinite(params.beta) and params.beta > 0):
        problems.append(f"range beta must be positive, got {params.beta}")
    if params.nu != SPHERE_NU:
        problems.append(f"smoothness must be 0.5 on the sphere, got {params.nu}")
    if not np.all(np.isfinite(rho)):
        problems.append("rho has non-finite entries")
        return problems
    if not np.array_equal(rho, rho.T):
        problems.append("rho is not symmetric")
    if not np.all(np.diag(rho) == 1.0):
        problems.append(f"rho diagonal must be 1, got {np.diag(rho).tolist()}")
    if np.any(np.abs(rho) > 1.0):
        problems.append("rho has entries with |rho_ij| > 1")
    min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.T)).min())
    if min_eig < -RHO_PSD_TOL:
        problems.append(f"rho is not positive semidefinite (min eigenvalue {min_eig:.6g})")
    return problems
