"""
Synthetic inputs: smooth covariate fields, simulated LGCP datasets and raw
input files shaped like the reanalysis/radar products.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cov_approx import DenseFieldSimulator
from .data_pipeline import (COVARIATE_NAMES, GriddedField, PointPatternDataset, RAIN_TYPES,
                            write_columnar)
from .lgcp import IntensitySurface, ModelParams, mean_surface, simulate_pattern
from .sphere_geom import EARTH_RADIUS_KM, Grid, as_locs


def _unit_vectors(locs) -> np.ndarray:
    lon, lat = np.radians(as_locs(locs)).T
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def smooth_fields(locs, q: int, seed: int, length_km: float = 800.0, n_features: int = 200):
    """
    ``q`` smooth random fields (random Fourier features of a squared
    exponential kernel in chordal distance), each standardized to mean 0
    and sd 1 over `locs`.

    Returns
    -------
    x : (N, q) ndarray
    """
    xyz = _unit_vectors(locs) * EARTH_RADIUS_KM
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    out = np.empty((xyz.shape[0], q))
    for j in range(q):
        w = rng.standard_normal((3, n_features)) / length_km
        b = rng.uniform(0.0, 2 * np.pi, n_features)
        a = rng.standard_normal(n_features)
        f = np.cos(xyz @ w + b) @ a
        out[:, j] = (f - f.mean()) / f.std()
    return out


def simulate_dataset(grid: Grid, theta: ModelParams, covariates, seed: int, simulator=None,
                     presence_only: bool = False, covariate_names=None, type_names=None):
    """
    One LGCP realization on all cells of `grid`.

    Returns
    -------
    dataset : PointPatternDataset
    surface : IntensitySurface
        The latent log-intensity ``mean + field``.
    """
    n = len(grid)
    if covariates is None:
        covariates = np.zeros((n, theta.q))
    if simulator is None:
        simulator = DenseFieldSimulator(grid.locs)
    # keyed apart from the likelihood's random numbers so a fit using the
    # same seed does not replay the generating field
    field_seed = int(np.random.SeedSequence([int(seed), 99]).generate_state(1, np.uint64)[0])
    field = next(simulator.chunks(theta.cov, 1, field_seed))[0]
    surface = IntensitySurface(grid, mean_surface(covariates, theta.eta) + field)
    patterns = simulate_pattern(surface, seed, presence_only=presence_only)
    names = tuple(covariate_names) if covariate_names else tuple(
        f"x{j + 1}" for j in range(theta.q))
    types = tuple(type_names) if type_names else tuple(f"type{i + 1}" for i in range(theta.p))
    data = PointPatternDataset(grid.region, grid, np.arange(n), covariates, names, patterns, types)
    return data, surface


def write_raw_inputs(directory, grid: Grid, seed: int, n_snapshots: int = 2,
                     levels=(1000.0, 900.0, 850.0, 700.0, 500.0, 300.0, 200.0)):
    """
    Write a synthetic ``fields.txt`` (t, q, u, v on `levels`, lh, ocean mask)
    and ``rain_<k>.txt`` snapshots with columns ``str, dc, sc``.

    Returns ``(field_files, rain_files)``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    locs = grid.locs
    n = len(grid)
    r = len(levels)
    base = smooth_fields(locs, 12, seed)
    out = []
    for v, (mean, spread) in zip("tquv", [(280.0, 5.0), (8.0, 2.0), (0.0, 6.0), (0.0, 4.0)]):
        modes = base[:, :3] if v in "tq" else base[:, 3:6]
        modes = modes + 0.3 * base[:, {"t": 6, "q": 7, "u": 8, "v": 9}[v]][:, None]
        shapes = rng.standard_normal((3, r)) * np.linspace(1.0, 0.4, 3)[:, None]
        vals = mean + spread * (modes @ shapes) + 0.05 * spread * rng.standard_normal((n, r))
        for j, lev in enumerate(levels):
            out.append(GriddedField(v, locs, vals[:, j], lev))
    out.append(GriddedField("lh", locs, 100.0 + 30.0 * base[:, 10]))
    mask = (base[:, 11] > -1.5).astype(float)
    out.append(GriddedField("ocean", locs, mask))
    q_idx = next(i for i, f in enumerate(out) if f.name == "q")
    wet = (out[q_idx].values - 8.0) / 2.0
    field_files = [directory / "fields.txt"]
    write_columnar(field_files[0], out, comment="synthetic atmospheric state")
    rain_files = []
    for k in range(n_snapshots):
        cols = []
        for i, name in enumerate(RAIN_TYPES):
            z = wet * (1.0 - 0.6 * i) + rng.standard_normal(n) - 0.8
            cols.append(GriddedField(name, locs, np.where(z > 0, np.exp(z) - 1.0 + 0.01, 0.0)))
        path = directory / f"rain_{k + 1}.txt"
        write_columnar(path, cols, comment=f"synthetic rain rates mm/hr, snapshot {k + 1}")
        rain_files.append(path)
    return field_files, rain_files


__all__ = ["smooth_fields", "simulate_dataset", "write_raw_inputs", "COVARIATE_NAMES"]
