"""
Ingestion of gridded rain-occurrence and atmospheric-covariate fields.

Files use a plain columnar text format, one row per grid cell::

    # comment lines start with '#'
    lon,lat,t@level=900,t@level=700,lh,rain_str
    -179.75,-15.0,299.1,287.4,112.0,0.0
    ...

The first two columns are the cell-center coordinates in degrees.  Value
columns are named ``<variable>`` or ``<variable>@level=<mb>``; ``NA`` marks a
missing value.  Floats are written with ``repr`` so a write/read cycle is
bit-identical.
"""

from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lgcp import PointPattern
from .sphere_geom import Cells, Grid, Region, as_locs, build_grid

log = logging.getLogger(__name__)

NA = "NA"
PROFILE_VARIABLES = ("t", "q", "u", "v")
N_EOFS = 3
SHEAR_LEVELS = (900.0, 700.0, 300.0)
COVARIATE_NAMES = (
    "t1", "t2", "t3", "q1", "q2", "q3", "u1", "u2", "u3", "v1", "v2", "v3",
    "ls", "dp", "dds", "lh", "lat",
)
RAIN_TYPES = ("str", "dc", "sc")

_COLUMN = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:@level=([0-9]+(?:\.[0-9]+)?))?$")


class DataError(ValueError):
    pass


class ColumnarFormatError(DataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


@dataclass
class GriddedField:
    name: str
    locs: np.ndarray
    values: np.ndarray
    level: float | None = None
    units: str | None = None

    def __post_init__(self):
        self.locs = as_locs(self.locs)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.locs.shape[0]:
            raise DataError(f"field '{self.name}': {self.values.size} values for "
                            f"{self.locs.shape[0]} cells")

    @property
    def column(self) -> str:
        if self.level is None:
            return self.name
        return f"{self.name}@level={_fmt_level(self.level)}"

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    def with_values(self, values, name: str | None = None, level=None) -> "GriddedField":
        return GriddedField(name or self.name, self.locs, values, level, self.units)


def _fmt_level(level: float) -> str:
    return str(int(level)) if float(level).is_integer() else repr(float(level))


@dataclass
class ProfileStack:
    """One variable on ``r`` pressure levels, ordered from high to low pressure."""

    variable: str
    levels: np.ndarray
    fields: list

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        if len(self.fields) != self.levels.size:
            raise DataError("one field per level required")
        ref = self.fields[0].locs
        for f in self.fields[1:]:
            if f.locs.shape != ref.shape or not np.array_equal(f.locs, ref):
                raise DataError(f"profile '{self.variable}': levels are on different grids")

    @property
    def r(self) -> int:
        return self.levels.size

    @property
    def locs(self) -> np.ndarray:
        return self.fields[0].locs

    def matrix(self) -> np.ndarray:
        """``(N, r)`` values, one column per level."""
        return np.column_stack([f.values for f in self.fields])


@dataclass
class EofResult:
    loadings: np.ndarray
    pcs: list
    explained_variance: np.ndarray
    eigenvalues: np.ndarray
    ties: bool = False


# ----------------------------------------------------------------------------
# columnar files

def load_columnar(path, expected=None, grid: Grid | None = None) -> list[GriddedField]:
    """
    Read a columnar file.

    Parameters
    ----------
    expected : iterable of str, optional
        Allowed column names (with level suffix); anything else is an error.
    grid : Grid, optional
        If given, every row must sit on a cell center of this grid.

    Returns
    -------
    fields : list of GriddedField, in column order
    """
    path = Path(path)
    header, rows, row_lines = None, [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [t.strip() for t in line.split(",")]
            if header is None:
                header = parts
                _check_header(path, lineno, header, expected)
                continue
            if len(parts) != len(header):
                raise ColumnarFormatError(path, lineno, f"expected {len(header)} columns, "
                                                        f"found {len(parts)}")
            try:
                rows.append([math.nan if t == NA else float(t) for t in parts])
                row_lines.append(lineno)
            except ValueError:
                bad = next(t for t in parts if t != NA and not _is_float(t))
                raise ColumnarFormatError(path, lineno, f"cannot parse value '{bad}'") from None
            if math.isnan(rows[-1][0]) or math.isnan(rows[-1][1]):
                raise ColumnarFormatError(path, lineno, "coordinates may not be missing")
    if header is None:
        raise ColumnarFormatError(path, 1, "no header line")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    locs = data[:, :2]
    _check_locs(path, row_lines, locs, grid)
    fields = []
    for j, col in enumerate(header[2:], start=2):
        name, level = _COLUMN.match(col).groups()
        fields.append(GriddedField(name, locs, data[:, j], None if level is None else float(level)))
    n_missing = sum(int(f.missing.sum()) for f in fields)
    if n_missing:
        log.info("%s: %d missing value(s)", path, n_missing)
    return fields


def _is_float(t: str) -> bool:
    try:
        float(t)
        return True
    except ValueError:
        return False


def _check_header(path, lineno, header, expected):
    if len(header) < 3 or header[0] != "lon" or header[1] != "lat":
        raise ColumnarFormatError(path, lineno, "header must start with 'lon,lat' and name "
                                                "at least one value column")
    seen = set()
    for col in header[2:]:
        if not _COLUMN.match(col):
            raise ColumnarFormatError(path, lineno, f"malformed column name '{col}'")
        if col in seen:
            raise ColumnarFormatError(path, lineno, f"duplicate column '{col}'")
        seen.add(col)
        if expected is not None and col not in set(expected):
            raise ColumnarFormatError(path, lineno, f"unknown column '{col}'")


def _check_locs(path, row_lines, locs, grid):
    keys = np.round(locs, 9)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    seen = np.zeros(inverse.max(initial=-1) + 1, dtype=bool)
    for row, key in enumerate(inverse):
        if seen[key]:
            raise ColumnarFormatError(path, row_lines[row], "duplicate cell coordinates")
        seen[key] = True
    if grid is not None:
        idx = grid.cell_index(locs)
        if np.any(idx < 0):
            row = int(np.argmax(idx < 0))
            raise ColumnarFormatError(path, row_lines[row],
                                      f"({locs[row, 0]}, {locs[row, 1]}) is not a cell center "
                                      "of the configured grid")


def write_columnar(path, fields, comment: str | None = None) -> None:
    """Write fields that share one set of cells."""
    fields = list(fields)
    if not fields:
        raise DataError("nothing to write")
    locs = fields[0].locs
    for f in fields[1:]:
        if f.locs.shape != locs.shape or not np.array_equal(f.locs, locs):
            raise DataError(f"field '{f.name}' is on a different grid")
    cols = np.column_stack([locs] + [f.values for f in fields])
    with open(path, "w") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        fh.write(",".join(["lon", "lat"] + [f.column for f in fields]) + "\n")
        for row in cols:
            fh.write(",".join(NA if math.isnan(v) else repr(float(v)) for v in row) + "\n")


def profile_stack(fields, variable: str) -> ProfileStack:
    """Collect the levels of one variable, highest pressure first."""
    found = [f for f in fields if f.name == variable and f.level is not None]
    if not found:
        raise DataError(f"no levels found for profile variable '{variable}'")
    found.sort(key=lambda f: -f.level)
    return ProfileStack(variable, [f.level for f in found], found)


def find_field(fields, name: str, level: float | None = None) -> GriddedField:
    for f in fields:
        if f.name == name and (level is None or (f.level is not None and f.level == level)):
            return f
    what = name if level is None else f"{name}@level={_fmt_level(level)}"
    raise DataError(f"required variable '{what}' not found")


# ----------------------------------------------------------------------------
# transformations

def standardize(field: GriddedField, mask=None) -> GriddedField:
    """
    Shift and scale to mean 0, population sd 1 over the valid cells.

    Valid cells are those allowed by `mask` with a finite value; the same
    affine map is applied to every cell.
    """
    v = field.values
    ok = np.isfinite(v)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    if ok.sum() < 2:
        raise DataError(f"field '{field.name}': fewer than two valid cells to standardize")
    mean = v[ok].mean()
    sd = v[ok].std()
    if not sd > 0:
        raise DataError(f"field '{field.name}' is constant over the valid cells")
    return field.with_values((v - mean) / sd)


def compute_eofs(stack: ProfileStack, k: int = N_EOFS, mask=None) -> EofResult:
    """
    Leading empirical orthogonal functions of a vertical profile.

    Levels are centered over the cells with complete profiles (and allowed
    by `mask`); the loadings are the top-`k` eigenvectors of the ``r x r``
    level covariance, obtained from an SVD of the centered data.  Each
    loading is signed so its largest-magnitude entry is positive.  PCs are
    the centered profiles projected on the loadings (NaN on dropped cells).
    """
    x = stack.matrix()
    r = stack.r
    if k > r:
        raise DataError(f"profile '{stack.variable}': {k} EOFs requested from {r} levels")
    ok = np.all(np.isfinite(x), axis=1)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    n = int(ok.sum())
    if n < 2:
        raise DataError(f"profile '{stack.variable}': fewer than two complete cells")
    xc = x[ok] - x[ok].mean(axis=0)
    _, sv, vt = np.linalg.svd(xc / math.sqrt(n), full_matrices=False)
    eig = np.zeros(r)
    eig[:sv.size] = sv**2
    total = eig.sum()
    if not total > 0:
        raise DataError(f"profile '{stack.variable}' has zero variance")
    loadings = vt.T[:, :k].copy()
    for j in range(k):
        pivot = np.argmax(np.abs(loadings[:, j]))
        if loadings[pivot, j] < 0:
            loadings[:, j] *= -1
    ties = bool(np.any(np.abs(np.diff(eig[:min(k + 1, r)])) <= 1e-10 * eig[0]))
    if ties:
        warnings.warn(f"profile '{stack.variable}': tied EOF eigenvalues; "
                      "loadings within a tie are not unique", stacklevel=2)
    scores = np.full((x.shape[0], k), np.nan)
    scores[ok] = xc @ loadings
    pcs = [GriddedField(f"{stack.variable}{j + 1}", stack.locs, scores[:, j]) for j in range(k)]
    return EofResult(loadings, pcs, eig[:k] / total, eig, ties)


def shear_fields(u900, u700, u300, v900, v700, v300):
    """
    Low-level shear ``ls``, deep shear ``dp`` and deep directional shear ``dds``.

    Accepts six `GriddedField` on one grid (returns fields) or six arrays
    (returns arrays).
    """
    args = [u900, u700, u300, v900, v700, v300]
    if all(isinstance(a, GriddedField) for a in args):
        ref = u900.locs
        for a in args[1:]:
            if a.locs.shape != ref.shape or not np.array_equal(a.locs, ref):
                raise DataError(f"shear input '{a.column}' is on a different grid")
        ls, dp, dds = shear_fields(*(a.values for a in args))
        return (GriddedField("ls", ref, ls), GriddedField("dp", ref, dp),
                GriddedField("dds", ref, dds))
    u9, u7, u3, v9, v7, v3 = (np.asarray(a, dtype=float) for a in args)
    if len({a.shape for a in (u9, u7, u3, v9, v7, v3)}) != 1:
        raise DataError("shear inputs have different shapes")
    ls = np.sqrt((u9 - u7) ** 2 + (v9 - v7) ** 2)
    dp = np.sqrt((u9 - u3) ** 2 + (v9 - v3) ** 2)
    dds = u3 - u9
    return ls, dp, dds


def extract_events(rain_fields, mask=None) -> list[PointPattern]:
    """
    Occurrence events: a cell is an event of type ``i`` if its rain rate is
    strictly positive (in any snapshot) and the mask allows it.

    Parameters
    ----------
    rain_fields : list
        One entry per type; each a `GriddedField`/array, or a list of them
        (snapshots pooled by union).
    mask : array of bool, optional
    """
    patterns = []
    for i, entry in enumerate(rain_fields):
        snaps = entry if isinstance(entry, (list, tuple)) else [entry]
        hit = None
        for snap in snaps:
            v = snap.values if isinstance(snap, GriddedField) else np.asarray(snap, dtype=float)
            if np.any(v[np.isfinite(v)] < 0):
                raise DataError(f"type {i + 1}: negative rain rates")
            rained = np.isfinite(v) & (v > 0)
            hit = rained if hit is None else (hit | rained)
        if mask is not None:
            hit &= np.asarray(mask, dtype=bool)
        patterns.append(PointPattern(i, np.flatnonzero(hit)))
    return patterns


# ----------------------------------------------------------------------------
# datasets

@dataclass
class PointPatternDataset:
    """
    Analysis-ready data: valid cells, standardized covariates, events.

    ``cells`` holds only the valid cells of ``grid``; ``cell_ids`` maps them
    back to grid indices and event indices refer to positions in ``cells``.
    """

    region: Region
    grid: Grid
    cell_ids: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    patterns: list
    type_names: tuple = RAIN_TYPES
    mask: np.ndarray | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        self.cells = self.grid.subset(self.cell_ids)
        if self.covariates is None:
            self.covariates = np.zeros((len(self.cell_ids), 0))
        self.covariates = np.asarray(self.covariates, dtype=float).reshape(len(self.cell_ids), -1)
        if self.covariates.shape[1] != len(self.covariate_names):
            raise DataError("one name per covariate column required")
        if self.mask is None:
            self.mask = np.zeros(len(self.grid), dtype=bool)
            self.mask[self.cell_ids] = True

    @property
    def p(self) -> int:
        return len(self.patterns)

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    def covariate(self, name: str) -> np.ndarray:
        return self.covariates[:, list(self.covariate_names).index(name)]

    def write(self, directory) -> dict:
        """Write ``covariates.txt`` and ``events.txt``; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        locs = self.cells.locs
        paths = {"events": directory / "events.txt"}
        counts = [np.bincount(pat.events, minlength=len(self.cells)) for pat in self.patterns]
        write_columnar(paths["events"], [GriddedField(f"events_{i + 1}", locs, c)
                                         for i, c in enumerate(counts)],
                       comment="event counts per cell; types " + ",".join(self.type_names))
        if self.q:
            paths["covariates"] = directory / "covariates.txt"
            write_columnar(paths["covariates"],
                           [GriddedField(n, locs, self.covariates[:, j])
                            for j, n in enumerate(self.covariate_names)],
                           comment="standardized covariates")
        return paths


@dataclass
class DatasetConfig:
    """
    Inputs for `assemble_dataset`.

    ``field_files`` hold the profile variables ``t, q, u, v`` on levels plus
    ``lh`` (and optionally the mask column); ``rain_files`` hold one column per
    rain type, one file per 6-hourly snapshot.
    """

    region: Region
    resolution_deg: float = 0.5
    field_files: list = field(default_factory=list)
    rain_files: list = field(default_factory=list)
    rain_columns: tuple = RAIN_TYPES
    mask_column: str | None = None
    n_eofs: int = N_EOFS


def _on_grid(f: GriddedField, grid: Grid, source) -> GriddedField:
    idx = grid.cell_index(f.locs)
    if np.any(idx < 0):
        raise DataError(f"{source}: '{f.column}' has cells off the configured grid")
    v = np.full(len(grid), np.nan)
    v[idx] = f.values
    return GriddedField(f.name, grid.locs, v, f.level, f.units)


def _load_all(paths, grid, kind):
    out = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise DataError(f"{kind} file not found: {p}")
        out += [(_on_grid(f, grid, p), p) for f in load_columnar(p)]
    return out


def assemble_dataset(config: DatasetConfig) -> PointPatternDataset:
    """
    Load inputs, derive the 17 covariates and extract rain-type events.

    Covariates are the first three EOF PCs of t, q, u and v, the shears
    ls/dp/dds, surface latent heat flux lh and latitude, each standardized
    over the valid cells.  Valid cells are those allowed by the mask column
    (if any) with every input present.
    """
    grid = build_grid(config.region, config.resolution_deg)
    if not config.field_files:
        raise DataError("no covariate field files configured")
    if not config.rain_files:
        raise DataError("no rain files configured")
    loaded = _load_all(config.field_files, grid, "covariate")
    fields = [f for f, _ in loaded]
    source = {f.column: p for f, p in loaded}

    valid = np.ones(len(grid), dtype=bool)
    if config.mask_column:
        valid &= find_field(fields, config.mask_column).values > 0

    def need(name, level=None):
        try:
            f = find_field(fields, name, level)
        except DataError as exc:
            raise DataError(f"{exc} in {', '.join(map(str, config.field_files))}") from None
        return f

    stacks = {}
    for var in PROFILE_VARIABLES:
        try:
            stacks[var] = profile_stack(fields, var)
        except DataError as exc:
            raise DataError(f"{exc} in {', '.join(map(str, config.field_files))}") from None
        if stacks[var].r < config.n_eofs:
            raise DataError(f"profile '{var}' has {stacks[var].r} levels, "
                            f"need at least {config.n_eofs}")
        valid &= np.all(np.isfinite(stacks[var].matrix()), axis=1)
    winds = {(c, lev): need(c, lev) for c in ("u", "v") for lev in SHEAR_LEVELS}
    lh = need("lh")
    valid &= np.isfinite(lh.values)

    rain = [[] for _ in config.rain_columns]
    for path in config.rain_files:
        path = Path(path)
        if not path.exists():
            raise DataError(f"rain file not found: {path}")
        snap = [_on_grid(f, grid, path) for f in load_columnar(path)]
        for i, col in enumerate(config.rain_columns):
            try:
                rain[i].append(find_field(snap, col))
            except DataError:
                raise DataError(f"{path}: rain column '{col}' not found") from None

    if valid.sum() < 2:
        raise DataError("fewer than two valid cells after masking")

    columns = {}
    for var in PROFILE_VARIABLES:
        eof = compute_eofs(stacks[var], config.n_eofs, mask=valid)
        for pc in eof.pcs:
            columns[pc.name] = pc
    ls, dp, dds = shear_fields(winds["u", 900.0], winds["u", 700.0], winds["u", 300.0],
                               winds["v", 900.0], winds["v", 700.0], winds["v", 300.0])
    columns.update(ls=ls, dp=dp, dds=dds, lh=lh,
                   lat=GriddedField("lat", grid.locs, grid.locs[:, 1]))
    x = np.column_stack([standardize(columns[name], valid).values[valid]
                         for name in COVARIATE_NAMES])

    ids = np.flatnonzero(valid)
    patterns = extract_events([[f.values[valid] for f in snaps] for snaps in rain])
    log.info("assembled %d valid cells of %d, events per type %s", ids.size, len(grid),
             [pat.n for pat in patterns])
    return PointPatternDataset(config.region, grid, ids, x, COVARIATE_NAMES, patterns,
                               tuple(config.rain_columns), valid,
                               {"sources": {k: str(v) for k, v in source.items()}})


def load_prepared_dataset(region: Region, resolution_deg: float, events_path,
                          covariates_path=None, type_names=None) -> PointPatternDataset:
    """
    Dataset from an ``events.txt`` (columns ``events_1..p``, counts per cell)
    and optional ``covariates.txt``, as written by `PointPatternDataset.write`.
    """
    grid = build_grid(region, resolution_deg)
    ev = load_columnar(events_path, grid=grid)
    ids = grid.cell_index(ev[0].locs)
    patterns = []
    for i, f in enumerate(ev):
        if f.name != f"events_{i + 1}":
            raise DataError(f"{events_path}: expected column events_{i + 1}, found '{f.column}'")
        counts = f.values
        if np.any(~np.isfinite(counts)) or np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise DataError(f"{events_path}: '{f.name}' must hold nonnegative integer counts")
        patterns.append(PointPattern.from_counts(i, counts))
    names, x = (), None
    if covariates_path is not None:
        cov = load_columnar(covariates_path, grid=grid)
        if not np.array_equal(np.round(cov[0].locs, 9), np.round(ev[0].locs, 9)):
            raise DataError(f"{covariates_path}: cells differ from {events_path}")
        names = tuple(f.column for f in cov)
        x = np.column_stack([f.values for f in cov])
    type_names = tuple(type_names) if type_names else tuple(f"type{i + 1}" for i in range(len(ev)))
    return PointPatternDataset(region, grid, ids, x, names, patterns, type_names)
