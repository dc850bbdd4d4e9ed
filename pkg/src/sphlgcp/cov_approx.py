"""
Full-scale approximation (FSA) of a large covariance matrix and the matched
fast Gaussian field simulator.

The covariance ``Sigma`` of a field at N locations is approximated by

    W = A R^{-1} A^T + V

where ``R`` is the covariance at m knots, ``A`` the location/knot
cross-covariance and ``V`` the block-diagonal part of the remainder
``Sigma - A R^{-1} A^T``.  With ``R = U_R^T U_R``, ``B`` solving
``U_R^T B = A^T`` and ``V = U_V^T U_V`` blockwise, rows of

    S = S0 B + S1 U_V,   S0 ~ iid N(0, 1) (s x m),  S1 ~ iid N(0, 1) (s x N)

are independent draws from N(0, W).

Random numbers come from a counter-style keyed generator: the normals of
replicate chunk ``c`` in stream ``k`` only depend on ``(seed, k, c)``, so the
same draws can be replayed for any covariance parameters (common random
numbers).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy import linalg

from .covariance import MultiMaternParams, exponential_cov
from .sphere_geom import as_locs, distance_matrix

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
REMAINDER_CLIP_TOL = 1e-8
REPLICATE_CHUNK = 256
MATERIALIZE_CAP = 6000
FIELD_CACHE_BYTES = 512 * 2**20

STREAM_KNOTS = 0
STREAM_LOCAL = 1

CovFn = Callable[..., np.ndarray]


class FactorizationError(np.linalg.LinAlgError):
    pass


# ----------------------------------------------------------------------------
# random numbers

def crn_normals(seed: int, stream: int, chunk: int, shape) -> np.ndarray:
    """Standard normals for one replicate chunk, keyed by (seed, stream, chunk)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, chunk])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def replicate_chunks(s: int, chunk: int = REPLICATE_CHUNK) -> Iterator[tuple[int, int]]:
    """Yield ``(chunk_index, n_in_chunk)`` covering `s` replicates."""
    if s < 1:
        raise ValueError("need at least one replicate")
    for c in range(math.ceil(s / chunk)):
        yield c, min(chunk, s - c * chunk)


# ----------------------------------------------------------------------------
# factorization helpers

def cholesky_upper(m: np.ndarray, scale: float | None = None, what: str = "matrix"):
    """
    Upper Cholesky factor ``U`` (``m = U^T U``) with an escalating jitter.

    Jitter multiples of ``scale`` (default: mean diagonal) from
    `JITTER_LADDER` are tried in turn.

    Returns
    -------
    u : ndarray
    jitter : float
        Absolute amount added to the diagonal.
    """
    if scale is None:
        scale = float(np.mean(np.diag(m))) if m.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(m.shape[0])
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            return linalg.cholesky(m + jitter * eye if jitter else m, lower=False), jitter
        except linalg.LinAlgError:
            continue
    raise FactorizationError(f"{what} is not positive definite even with jitter {jitter:g}")


def _clip_remainder(v: np.ndarray, scale: float) -> np.ndarray:
    w, q = np.linalg.eigh(v)
    if w[0] < -REMAINDER_CLIP_TOL * scale:
        raise FactorizationError(
            f"remainder block has eigenvalue {w[0]:.3g}, below -{REMAINDER_CLIP_TOL:g} x {scale:.3g}"
        )
    return (q * np.clip(w, 0.0, None)) @ q.T


def block_partition(locs, block_size: int) -> list[np.ndarray]:
    """
    Split locations into spatially coherent contiguous blocks.

    Points are cut into ``round(sqrt(N / block_size))`` latitude bands of
    equal count; inside each band they are ordered by longitude (unwrapped
    eastward from the westernmost gap, so date-line regions stay contiguous)
    and the concatenated order is chopped into runs of `block_size`.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    locs = as_locs(locs)
    n = locs.shape[0]
    if block_size >= n:
        return [np.arange(n)]
    lon = _unwrap_lon(locs[:, 0])
    by_lat = np.lexsort((lon, locs[:, 1]))
    n_bands = max(1, round(math.sqrt(n / block_size)))
    order = []
    for band in np.array_split(by_lat, n_bands):
        order.append(band[np.lexsort((locs[band, 1], lon[band]))])
    order = np.concatenate(order)
    return [np.sort(order[i:i + block_size]) for i in range(0, n, block_size)]


def _unwrap_lon(lon: np.ndarray) -> np.ndarray:
    u = np.sort(np.mod(lon, 360.0))
    if u.size < 2:
        return np.mod(lon, 360.0)
    gaps = np.diff(np.concatenate([u, [u[0] + 360.0]]))
    start = u[(np.argmax(gaps) + 1) % u.size]
    return np.mod(lon - start, 360.0)


# ----------------------------------------------------------------------------
# the decomposition

@dataclass
class FsaDecomposition:
    """
    Attributes
    ----------
    knots : (m, 2) ndarray
    A : (N, m) ndarray
        Location/knot cross-covariance.
    R_chol : (m, m) ndarray
        Upper factor ``U_R`` with ``R = U_R^T U_R``.
    B : (m, N) ndarray
        Solution of ``U_R^T B = A^T``.
    blocks : list of index arrays
        Partition of ``0..N-1``.
    V_blocks : list of ndarray
        Upper factors ``U_V`` of the remainder restricted to each block.
    """

    knots: np.ndarray
    A: np.ndarray
    R_chol: np.ndarray
    B: np.ndarray
    blocks: list
    V_blocks: list
    r_jitter: float = 0.0
    v_jitter: list = field(default_factory=list)
    clipped_blocks: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def block_index(self) -> np.ndarray:
        """Block id of every location."""
        out = np.empty(self.n, dtype=np.int64)
        for b, idx in enumerate(self.blocks):
            out[idx] = b
        return out

    def apply_local(self, s1: np.ndarray) -> np.ndarray:
        """``S1 U_V`` for normals `s1` with trailing dimension N."""
        out = np.empty_like(s1)
        for idx, u in zip(self.blocks, self.V_blocks):
            out[..., idx] = s1[..., idx] @ u
        return out


def build_fsa(locs, knots, block_size: int, covfn: CovFn) -> FsaDecomposition:
    """
    Build the full-scale approximation of ``covfn`` at `locs`.

    Parameters
    ----------
    locs : (N, 2) array-like
    knots : (m, 2) array-like, m <= N, distinct
    block_size : int
        Target size of the diagonal blocks kept from the remainder.
    covfn : callable
        ``covfn(locs_a, locs_b=None)`` returning a covariance matrix.
    """
    t0 = time.perf_counter()
    locs = as_locs(locs)
    knots = as_locs(knots)
    n, m = locs.shape[0], knots.shape[0]
    if m > n:
        raise ValueError(f"more knots ({m}) than locations ({n})")
    dk = distance_matrix(knots)
    iu = np.triu_indices(m, 1)
    if m > 1 and np.min(dk[iu]) == 0.0:
        t = int(np.argmin(dk[iu]))
        raise ValueError(f"knots {iu[0][t]} and {iu[1][t]} coincide")

    r = covfn(knots)
    try:
        u_r, r_jitter = cholesky_upper(r, what="knot covariance R")
    except FactorizationError as exc:
        off = dk + np.diag(np.full(m, np.inf))
        i, j = np.unravel_index(np.argmin(off), off.shape)
        raise FactorizationError(
            f"{exc}; closest knots are {i} and {j}, {off[i, j]:.6g} km apart"
        ) from None
    a = covfn(locs, knots)
    b = linalg.solve_triangular(u_r, a.T, trans="T", lower=False)

    blocks = block_partition(locs, block_size)
    v_factors, v_jitter = [], []
    clipped = 0
    for idx in blocks:
        sig = covfn(locs[idx])
        bb = b[:, idx]
        v = sig - bb.T @ bb
        v = 0.5 * (v + v.T)
        scale = float(np.mean(np.diag(sig)))
        try:
            u_v, jit = cholesky_upper(v, scale=scale, what="remainder block")
        except FactorizationError:
            v = _clip_remainder(v, scale)
            clipped += 1
            u_v, jit = cholesky_upper(v, scale=scale, what="clipped remainder block")
        v_factors.append(u_v)
        v_jitter.append(jit)

    meta = {
        "n": n,
        "m": m,
        "block_size": block_size,
        "n_blocks": len(blocks),
        "block_order": "latitude bands, then longitude",
        "build_seconds": time.perf_counter() - t0,
    }
    log.debug("built FSA: %s", meta)
    return FsaDecomposition(knots, a, u_r, b, blocks, v_factors, r_jitter, v_jitter, clipped, meta)


def implied_cov(fsa: FsaDecomposition, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Dense ``W = B^T B + U_V^T U_V``, the covariance the simulator targets."""
    if fsa.n > cap:
        raise MemoryError(f"refusing to materialize a {fsa.n} x {fsa.n} matrix (cap {cap})")
    w = fsa.B.T @ fsa.B
    for idx, u in zip(fsa.blocks, fsa.V_blocks):
        w[np.ix_(idx, idx)] += u.T @ u
    return w


def simulate_fields(fsa: FsaDecomposition, s: int, seed: int, normals=None) -> np.ndarray:
    """
    Draw `s` zero-mean fields with covariance ``implied_cov(fsa)``.

    Parameters
    ----------
    normals : tuple (S0, S1), optional
        Explicit ``(s, m)`` and ``(s, N)`` standard normals replacing the
        seeded ones.

    Returns
    -------
    fields : (s, N) ndarray
    """
    if normals is not None:
        s0, s1 = normals
        return s0 @ fsa.B + fsa.apply_local(s1)
    out = np.empty((s, fsa.n))
    for c, k in replicate_chunks(s):
        s0 = crn_normals(seed, STREAM_KNOTS, c, (k, fsa.m))
        s1 = crn_normals(seed, STREAM_LOCAL, c, (k, fsa.n))
        lo = c * REPLICATE_CHUNK
        out[lo:lo + k] = s0 @ fsa.B + fsa.apply_local(s1)
    return out


def exact_simulate(locs, covfn: CovFn, s: int, seed: int) -> np.ndarray:
    """Draw `s` fields from ``N(0, Sigma)`` through a dense Cholesky factor."""
    locs = as_locs(locs)
    u, _ = cholesky_upper(covfn(locs), what="covariance")
    out = np.empty((s, locs.shape[0]))
    for c, k in replicate_chunks(s):
        lo = c * REPLICATE_CHUNK
        out[lo:lo + k] = crn_normals(seed, STREAM_LOCAL, c, (k, locs.shape[0])) @ u
    return out


# ----------------------------------------------------------------------------
# multivariate field simulators used by the Monte Carlo likelihood

class DenseFieldSimulator:
    """
    Exact joint fields ``Y = L_P Z`` with rows of ``Z`` drawn as ``S1 U_K``.

    The factor of the spatial correlation is cached per range value, and so
    are the correlated replicates ``Z`` when they fit in `cache_bytes`;
    changing only variances or cross-correlations then skips the spatial
    part entirely.
    """

    kind = "dense"

    def __init__(self, locs, cache_bytes: int = FIELD_CACHE_BYTES):
        self.locs = as_locs(locs)
        self._d = distance_matrix(self.locs)
        self._cache: tuple[float, np.ndarray] | None = None
        self.cache_bytes = cache_bytes
        self._zcache: tuple | None = None

    @property
    def n(self) -> int:
        return self.locs.shape[0]

    def _factor(self, beta: float) -> np.ndarray:
        if self._cache is None or self._cache[0] != beta:
            u, _ = cholesky_upper(np.exp(-self._d / beta), scale=1.0, what="spatial correlation")
            self._cache = (beta, u)
        return self._cache[1]

    def correlated(self, beta: float, seed: int, c: int, k: int, p: int) -> np.ndarray:
        s1 = crn_normals(seed, STREAM_LOCAL, c, (k, p, self.n))
        return s1 @ self._factor(beta)

    def chunks(self, params: MultiMaternParams, s: int, seed: int) -> Iterator[np.ndarray]:
        """Yield ``(k, p, N)`` zero-mean joint field replicates."""
        lp = params.type_factor()
        key = (params.beta, int(seed), s, params.p)
        if self._zcache is not None and self._zcache[0] == key:
            for z in self._zcache[1]:
                yield np.matmul(lp, z)
            return
        keep = s * params.p * self.n * 8 <= self.cache_bytes
        stored = []
        for c, k in replicate_chunks(s):
            z = self.correlated(params.beta, seed, c, k, params.p)
            if keep:
                stored.append(z)
            yield np.matmul(lp, z)
        if keep:
            self._zcache = (key, stored)


class FsaFieldSimulator(DenseFieldSimulator):
    """Joint fields whose spatial part uses the full-scale approximation."""

    kind = "fsa"

    def __init__(self, locs, knots, block_size: int, cache_bytes: int = FIELD_CACHE_BYTES):
        self.locs = as_locs(locs)
        self.knots = as_locs(knots)
        self.block_size = block_size
        self._cache: tuple[float, FsaDecomposition] | None = None
        self.cache_bytes = cache_bytes
        self._zcache: tuple | None = None

    def decomposition(self, beta: float) -> FsaDecomposition:
        if self._cache is None or self._cache[0] != beta:
            fsa = build_fsa(self.locs, self.knots, self.block_size, exponential_cov(beta))
            self._cache = (beta, fsa)
        return self._cache[1]

    def correlated(self, beta: float, seed: int, c: int, k: int, p: int) -> np.ndarray:
        fsa = self.decomposition(beta)
        s0 = crn_normals(seed, STREAM_KNOTS, c, (k, p, fsa.m))
        s1 = crn_normals(seed, STREAM_LOCAL, c, (k, p, fsa.n))
        return s0 @ fsa.B + fsa.apply_local(s1)
