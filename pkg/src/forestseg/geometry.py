"""Eigenvalue shape features and per-point feature tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numba as nb
import numpy as np

from .model import CHANNEL_ORDER, Channel, CloudError, MultispectralCloud
from .preprocess import center_planimetric, robust_minmax_scale
from .spatial import SpatialIndex, build_spatial_index  # noqa: F401  (re-export)
from .spectral import VegetationIndexKind, cloud_index

DEFAULT_RADIUS_M = 1.0

GEOMETRIC_COLUMNS = (
    "linearity",
    "planarity",
    "sphericity",
    "verticality",
    "eigenentropy",
    "surface_variation",
    "anisotropy",
    "omnivariance",
    "eigenvalue_sum",
    "second_eigenvalue",
    "pca1",
    "pca2",
    "curvature",
    "neighbor_count",
    "degenerate_flag",
)

# Verticality of near-linear neighbourhoods is taken from the main axis.
_LINE_PLANARITY = 0.01
_LINE_LINEARITY = 0.9


@dataclass(frozen=True)
class GeometricFeatureVector:
    linearity: float
    planarity: float
    sphericity: float
    verticality: float
    eigenentropy: float
    surface_variation: float
    anisotropy: float
    omnivariance: float
    eigenvalue_sum: float
    second_eigenvalue: float
    pca1: float
    pca2: float
    curvature: float
    neighbor_count: int
    degenerate_flag: bool

    def as_array(self) -> np.ndarray:
        return np.array([float(getattr(self, f.name)) for f in fields(self)])


def features_from_eigen(evals: np.ndarray, evecs: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Feature rows from ascending eigenvalues (m, 3) and eigenvectors (m, 3, 3).

    Column order is `GEOMETRIC_COLUMNS`.
    """
    lam = np.maximum(evals, 0.0)
    l1, l2, l3 = lam[:, 2], lam[:, 1], lam[:, 0]
    total = l1 + l2 + l3
    degenerate = l1 <= 0.0
    safe1 = np.where(degenerate, 1.0, l1)
    safe_t = np.where(degenerate, 1.0, total)
    lin = (l1 - l2) / safe1
    pla = (l2 - l3) / safe1
    sph = l3 / safe1
    e = lam[:, ::-1] / safe_t[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(e > 0, e * np.log(np.where(e > 0, e, 1.0)), 0.0), axis=1)
    normal_z = np.abs(evecs[:, 2, 0])
    axis_z = np.abs(evecs[:, 2, 2])
    line_like = (pla < _LINE_PLANARITY) & (lin > _LINE_LINEARITY)
    vert = np.where(line_like, axis_z, 1.0 - normal_z)
    surf = l3 / safe_t
    out = np.column_stack([
        lin,
        pla,
        sph,
        np.clip(vert, 0.0, 1.0),
        np.clip(ent, 0.0, math.log(3.0)),
        surf,
        (l1 - l3) / safe1,
        np.cbrt(l1 * l2 * l3),
        total,
        l2,
        e[:, 0],
        e[:, 1],
        surf,
        counts.astype(np.float64),
        degenerate.astype(np.float64),
    ])
    # Coincident points: every shape feature is 0, only the count and flag remain.
    out[degenerate, :13] = 0.0
    return out


def eigen_features(neighborhood) -> GeometricFeatureVector:
    """Shape features of one neighbourhood of at least three points."""
    pts = np.asarray(neighborhood, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("neighbourhood must be an (n, 3) array")
    if len(pts) < 3:
        raise ValueError(f"eigen features need at least 3 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    row = features_from_eigen(evals[None], evecs[None], np.array([len(pts)]))[0]
    values = [float(v) for v in row[:13]] + [len(pts), bool(row[14])]
    return GeometricFeatureVector(*values)


# ---------------------------------------------------------------------------
# batched neighbourhood moments


@nb.njit(cache=True, parallel=True)
def _grid_moments(xyz, order, cell_keys, starts, ends, dims, r2):
    """Per point: neighbour count, first and second moments of offsets within r."""
    n = xyz.shape[0]
    out = np.zeros((n, 10))
    n_cells = cell_keys.shape[0]
    ny = dims[1]
    nz = dims[2]
    for c in nb.prange(n_cells):
        key = cell_keys[c]
        ix = key // (ny * nz)
        iy = (key // nz) % ny
        iz = key % nz
        nb_start = np.empty(27, np.int64)
        nb_end = np.empty(27, np.int64)
        m = 0
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    k = ((ix + dx) * ny + (iy + dy)) * nz + (iz + dz)
                    pos = np.searchsorted(cell_keys, k)
                    if pos < n_cells and cell_keys[pos] == k:
                        nb_start[m] = starts[pos]
                        nb_end[m] = ends[pos]
                        m += 1
        for q in range(starts[c], ends[c]):
            i = order[q]
            px = xyz[i, 0]
            py = xyz[i, 1]
            pz = xyz[i, 2]
            cnt = 0.0
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            sxx = 0.0
            sxy = 0.0
            sxz = 0.0
            syy = 0.0
            syz = 0.0
            szz = 0.0
            for b in range(m):
                for t in range(nb_start[b], nb_end[b]):
                    j = order[t]
                    dx_ = xyz[j, 0] - px
                    dy_ = xyz[j, 1] - py
                    dz_ = xyz[j, 2] - pz
                    if (dx_ * dx_ + dy_ * dy_) + dz_ * dz_ <= r2:
                        cnt += 1.0
                        s0 += dx_
                        s1 += dy_
                        s2 += dz_
                        sxx += dx_ * dx_
                        sxy += dx_ * dy_
                        sxz += dx_ * dz_
                        syy += dy_ * dy_
                        syz += dy_ * dz_
                        szz += dz_ * dz_
            out[i, 0] = cnt
            out[i, 1] = s0
            out[i, 2] = s1
            out[i, 3] = s2
            out[i, 4] = sxx
            out[i, 5] = sxy
            out[i, 6] = sxz
            out[i, 7] = syy
            out[i, 8] = syz
            out[i, 9] = szz
    return out


def neighborhood_moments(xyz: np.ndarray, radius_m: float) -> np.ndarray:
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    cell = radius_m * (1.0 + 1e-9)
    ijk = np.floor((xyz - xyz.min(axis=0)) / cell).astype(np.int64) + 1
    dims = ijk.max(axis=0) + 2
    keys = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    cell_keys, starts = np.unique(sorted_keys, return_index=True)
    ends = np.append(starts[1:], len(keys))
    return _grid_moments(xyz, order, cell_keys, starts.astype(np.int64), ends.astype(np.int64),
                         dims.astype(np.int64), radius_m * radius_m)


def geometric_block(xyz: np.ndarray, radius_m: float = DEFAULT_RADIUS_M) -> np.ndarray:
    """Geometric feature rows for every point over its radius neighbourhood.

    The neighbourhood includes the point itself. Fewer than three neighbours
    yields the fallback row: shape features 0, count kept, degenerate flag 1.
    """
    mom = neighborhood_moments(xyz, radius_m)
    counts = mom[:, 0]
    mean = mom[:, 1:4] / counts[:, None]
    cov = np.empty((len(mom), 3, 3))
    second = mom[:, 4:10] / counts[:, None]
    for k, (a, b) in enumerate([(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]):
        cov[:, a, b] = second[:, k] - mean[:, a] * mean[:, b]
        cov[:, b, a] = cov[:, a, b]
    evals, evecs = np.linalg.eigh(cov)
    out = features_from_eigen(evals, evecs, counts)
    sparse = counts < 3
    out[sparse, :13] = 0.0
    out[sparse, 14] = 1.0
    return out


# ---------------------------------------------------------------------------
# feature tables

_CHANNEL_COLUMN = {Channel.SWIR: "r_swir", Channel.NIR: "r_nir", Channel.GREEN: "r_green"}
_CHANNEL_TOKEN = {"swir": Channel.SWIR, "nir": Channel.NIR, "green": Channel.GREEN}
_CHANNEL_LABEL = {Channel.SWIR: "SWIR", Channel.NIR: "NIR", Channel.GREEN: "Green"}


@dataclass(frozen=True)
class FeatureMask:
    """Which column blocks a feature table carries."""

    coordinates: bool = True
    channels: tuple = ()
    vi: bool = False
    geometric: bool = False

    def __post_init__(self):
        chans = tuple(ch for ch in CHANNEL_ORDER if ch in set(self.channels))
        object.__setattr__(self, "channels", chans)

    @property
    def columns(self) -> tuple:
        cols = []
        if self.coordinates:
            cols += ["x", "y", "z_norm"]
        cols += [_CHANNEL_COLUMN[ch] for ch in self.channels]
        if self.vi:
            cols.append("ndvi_nir_swir")
        if self.geometric:
            cols += GEOMETRIC_COLUMNS
        return tuple(cols)

    @property
    def needs_spectra(self) -> bool:
        return bool(self.channels) or self.vi

    def to_string(self) -> str:
        parts = (["coords"] if self.coordinates else []) + [ch.name.lower() for ch in self.channels]
        parts += (["vi"] if self.vi else []) + (["geom"] if self.geometric else [])
        return "+".join(parts)

    @classmethod
    def parse(cls, text: str) -> "FeatureMask":
        """Parse tokens like ``coords+swir+nir+green+vi+geom``."""
        tokens = [t.strip().lower() for t in text.replace(",", "+").split("+") if t.strip()]
        unknown = [t for t in tokens if t not in {"coords", "vi", "geom", *_CHANNEL_TOKEN}]
        if unknown or not tokens:
            raise ValueError(f"bad feature mask {text!r}; tokens: coords, swir, nir, green, vi, geom")
        return cls("coords" in tokens, tuple(_CHANNEL_TOKEN[t] for t in tokens if t in _CHANNEL_TOKEN),
                   "vi" in tokens, "geom" in tokens)

    def with_geometric(self, on: bool = True) -> "FeatureMask":
        return FeatureMask(self.coordinates, self.channels, self.vi, on)

    @property
    def scenario_name(self) -> str:
        if not (self.channels or self.vi):
            name = "Coordinates"
        else:
            name = " + ".join("+" + _CHANNEL_LABEL[ch] if i == 0 else _CHANNEL_LABEL[ch]
                              for i, ch in enumerate(self.channels))
            if self.vi:
                name += " + VI"
        return name + (" + Geometry" if self.geometric else "")


def _scenario(*tokens, vi=False) -> FeatureMask:
    return FeatureMask(True, tuple(_CHANNEL_TOKEN[t] for t in tokens), vi)


# Feature-vector rows of the spectral ablation, in table order.
ABLATION_SCENARIOS = {
    "Coordinates": _scenario(),
    "+SWIR": _scenario("swir"),
    "+NIR": _scenario("nir"),
    "+Green": _scenario("green"),
    "+SWIR + NIR": _scenario("swir", "nir"),
    "+SWIR + Green": _scenario("swir", "green"),
    "+NIR + Green": _scenario("nir", "green"),
    "+SWIR + NIR + Green": _scenario("swir", "nir", "green"),
    "+SWIR + NIR + Green + VI": _scenario("swir", "nir", "green", vi=True),
}

# Classifier input: coordinates, three reflectances, NDVI_NIR-SWIR and shape features.
FULL_MASK = FeatureMask(True, CHANNEL_ORDER, True, True)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    columns: tuple
    values: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ValueError(f"values shape {values.shape} does not match {len(self.columns)} columns")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature table contains non-finite values")
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.values)


def stack_tables(tables) -> FeatureTable:
    tables = list(tables)
    if not tables:
        raise ValueError("no feature tables to stack")
    cols = tables[0].columns
    for t in tables[1:]:
        if t.columns != cols:
            raise ValueError("feature tables have different column schemas")
    labels = None
    if all(t.labels is not None for t in tables):
        labels = np.concatenate([t.labels for t in tables])
    return FeatureTable(cols, np.concatenate([t.values for t in tables]), labels)


def compute_feature_table(cloud, radius_m: float = DEFAULT_RADIUS_M, mask: FeatureMask = FULL_MASK,
                          geometric: Optional[np.ndarray] = None) -> FeatureTable:
    """Assemble the per-point feature table of one plot.

    Coordinate, reflectance and index columns are robust/min-max scaled within
    this cloud; shape features keep their natural ranges. ``geometric`` may
    carry a precomputed `geometric_block` for the same cloud and radius.
    """
    if len(cloud) == 0:
        raise CloudError("cannot build features for an empty cloud")
    blocks = []
    if mask.coordinates:
        if getattr(cloud, "z_normalized", None) is None:
            raise CloudError("coordinate features need z_normalized; run height normalisation first")
        centered = center_planimetric(cloud)
        blocks += [robust_minmax_scale(centered.xyz[:, 0]),
                   robust_minmax_scale(centered.xyz[:, 1]),
                   robust_minmax_scale(cloud.z_normalized)]
    if mask.needs_spectra and not isinstance(cloud, MultispectralCloud):
        raise CloudError("spectral features need a multispectral cloud")
    for ch in mask.channels:
        blocks.append(robust_minmax_scale(cloud.channel_reflectance(ch).astype(np.float64)))
    if mask.vi:
        blocks.append(robust_minmax_scale(cloud_index(cloud, VegetationIndexKind.NDVI_NIR_SWIR)))
    values = np.column_stack(blocks) if blocks else np.empty((len(cloud), 0))
    if mask.geometric:
        if geometric is None:
            geometric = geometric_block(cloud.xyz, radius_m)
        values = np.hstack([values, geometric])
    return FeatureTable(mask.columns, values, cloud.labels)


# ---------------------------------------------------------------------------
# serialisation


def write_feature_table(table: FeatureTable, path) -> None:
    """Write ``.npz`` (binary) or, for any other suffix, a headered text table.

    The text form has one line of column names (plus ``label`` when labels are
    attached) followed by one row per point.
    """
    path = Path(path)
    if path.suffix == ".npz":
        extra = {} if table.labels is None else {"labels": table.labels}
        with open(path, "wb") as fh:
            np.savez(fh, columns=np.array(table.columns), values=table.values, **extra)
        return
    header = list(table.columns) + (["label"] if table.labels is not None else [])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(header) + "\n")
        for i, row in enumerate(table.values):
            cells = [repr(float(v)) for v in row]
            if table.labels is not None:
                cells.append(str(int(table.labels[i])))
            fh.write(" ".join(cells) + "\n")


def read_feature_table(path) -> FeatureTable:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            labels = data["labels"] if "labels" in data.files else None
            return FeatureTable(tuple(str(c) for c in data["columns"]), data["values"], labels)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    has_labels = header[-1:] == ["label"]
    cols = header[:-1] if has_labels else header
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:] if ln.strip()]).reshape(-1, len(header))
    labels = rows[:, -1].astype(np.int8) if has_labels else None
    return FeatureTable(tuple(cols), rows[:, :len(cols)], labels)
