"""Outlier removal, channel fusion, height normalisation and feature scaling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import (
    CHANNEL_ORDER,
    UNLABELED,
    ChannelCloud,
    CloudError,
    MultispectralCloud,
)
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SorParams:
    """Statistical outlier removal settings (CloudCompare defaults)."""

    k_neighbors: int = 6
    sigma_multiplier: float = 1.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not self.sigma_multiplier > 0:
            raise ValueError("sigma_multiplier must be > 0")


@dataclass(frozen=True)
class MergeParams:
    radius_m: float = 0.25
    neighbors: int = 1

    def __post_init__(self):
        if not (self.radius_m > 0 and math.isfinite(self.radius_m)):
            raise ValueError("radius_m must be finite and > 0")
        if self.neighbors != 1:
            raise ValueError("channel merge supports exactly one neighbour")


@dataclass(frozen=True)
class HeightNormParams:
    cell_size_m: float = 1.0

    def __post_init__(self):
        if not (self.cell_size_m > 0 and math.isfinite(self.cell_size_m)):
            raise ValueError("cell_size_m must be finite and > 0")


def mean_knn_distance(xyz: np.ndarray, k: int, workers: int = 1) -> np.ndarray:
    """Mean distance of every point to its k nearest other points."""
    index = SpatialIndex(xyz, workers=workers)
    _, d2 = index.knn_many(xyz, k, exclude=np.arange(len(xyz)))
    return np.sqrt(d2).mean(axis=1)


def sor_filter(cloud, params: SorParams = SorParams(), workers: int = 1):
    """Drop points whose mean k-NN distance exceeds mean + multiplier * std.

    The neighbourhood excludes the point itself. Statistics use the population
    standard deviation. Returns ``(filtered_cloud, removed_indices)``; survivors
    keep their relative order.
    """
    n = len(cloud)
    k = params.k_neighbors
    if n <= k:
        raise CloudError(f"SOR needs more than k={k} points, cloud has {n}")
    mean_d = mean_knn_distance(cloud.xyz, k, workers)
    if np.all(mean_d == mean_d[0]):
        keep = np.ones(n, dtype=bool)
    else:
        mu = math.fsum(mean_d) / n
        sigma = math.sqrt(math.fsum((mean_d - mu) ** 2) / n)
        keep = mean_d <= mu + params.sigma_multiplier * sigma
    removed = np.flatnonzero(~keep)
    logger.info("SOR removed %d of %d points", removed.size, n)
    return cloud.subset(np.flatnonzero(keep)), removed


class MergeSources(NamedTuple):
    """Bookkeeping of a channel merge.

    ``candidate_channel`` and ``candidate_index`` identify every emitted point's
    own channel point; ``sources[:, c]`` holds the index of the point in channel
    ``CHANNEL_ORDER[c]`` that supplied its reflectance.
    """

    candidate_channel: np.ndarray
    candidate_index: np.ndarray
    sources: np.ndarray


def merge_sources(swir: ChannelCloud, nir: ChannelCloud, green: ChannelCloud,
                  params: MergeParams = MergeParams(), workers: int = 1) -> MergeSources:
    clouds = (swir, nir, green)
    for cloud, expected in zip(clouds, CHANNEL_ORDER):
        if cloud.channel is not expected:
            raise CloudError(f"expected a {expected.name} cloud, got {cloud.channel.name}")
        if len(cloud) == 0:
            raise CloudError(f"{expected.name} cloud is empty")
    cand_xyz = np.concatenate([c.xyz for c in clouds])
    cand_channel = np.concatenate([np.full(len(c), i, dtype=np.int8) for i, c in enumerate(clouds)])
    cand_index = np.concatenate([np.arange(len(c), dtype=np.int64) for c in clouds])
    sources = np.empty((len(cand_xyz), len(clouds)), dtype=np.int64)
    for c, cloud in enumerate(clouds):
        sources[:, c], _ = SpatialIndex(cloud.xyz, workers).nearest_within(cand_xyz, params.radius_m)
    keep = np.all(sources >= 0, axis=1)
    return MergeSources(cand_channel[keep], cand_index[keep], sources[keep])


def merge_channels(swir: ChannelCloud, nir: ChannelCloud, green: ChannelCloud,
                   params: MergeParams = MergeParams(), workers: int = 1) -> MultispectralCloud:
    """Fuse three channel clouds into one multispectral cloud.

    Every input point is a candidate. A candidate survives when each channel
    has a point within ``radius_m``; it keeps its own coordinates and label and
    takes each channel's reflectance from that channel's nearest point.
    """
    clouds = (swir, nir, green)
    src = merge_sources(swir, nir, green, params, workers)
    xyz = np.empty((len(src.candidate_index), 3))
    labels = np.full(len(src.candidate_index), UNLABELED, dtype=np.int8)
    labeled = any(c.labels is not None for c in clouds)
    for c, cloud in enumerate(clouds):
        mine = src.candidate_channel == c
        xyz[mine] = cloud.xyz[src.candidate_index[mine]]
        if cloud.labels is not None:
            labels[mine] = cloud.labels[src.candidate_index[mine]]
    refl = np.column_stack([cloud.reflectance_db[src.sources[:, c]] for c, cloud in enumerate(clouds)])
    n_in = sum(len(c) for c in clouds)
    logger.info("merge kept %d of %d candidates", len(xyz), n_in)
    provenance = {
        "merge_radius_m": repr(params.radius_m),
        "merge_inputs": ",".join(str(len(c)) for c in clouds),
        "merge_discarded": str(n_in - len(xyz)),
    }
    return MultispectralCloud(xyz, refl, labels if labeled else None, None, provenance)


def _window_min(grid: np.ndarray) -> np.ndarray:
    """Minimum over each cell's 3x3 neighbourhood (inf outside the grid)."""
    padded = np.pad(grid, 1, constant_values=np.inf)
    nx, ny = grid.shape
    out = np.full_like(grid, np.inf)
    for dx in range(3):
        for dy in range(3):
            np.minimum(out, padded[dx:dx + nx, dy:dy + ny], out=out)
    return out


def local_minimum_terrain(xyz: np.ndarray, params: HeightNormParams = HeightNormParams()) -> np.ndarray:
    """Per-point terrain estimate from the lowest point of its XY grid cell.

    Cells holding fewer than three points fall back to the lowest point of the
    surrounding 3x3 block of cells.
    """
    cell = params.cell_size_m
    ix = np.floor((xyz[:, 0] - xyz[:, 0].min()) / cell).astype(np.int64)
    iy = np.floor((xyz[:, 1] - xyz[:, 1].min()) / cell).astype(np.int64)
    nx, ny = ix.max() + 1, iy.max() + 1
    flat = ix * ny + iy
    counts = np.bincount(flat, minlength=nx * ny).reshape(nx, ny)
    mins = np.full(nx * ny, np.inf)
    np.minimum.at(mins, flat, xyz[:, 2])
    mins = mins.reshape(nx, ny)
    local = np.where(counts >= 3, mins, _window_min(mins))
    return local[ix, iy]


def normalize_height(cloud: MultispectralCloud, params: HeightNormParams = HeightNormParams()) -> MultispectralCloud:
    """Height above the local terrain minimum, shifted so the lowest value is 0."""
    if len(cloud) == 0:
        raise CloudError("cannot normalise the height of an empty cloud")
    provisional = cloud.xyz[:, 2] - local_minimum_terrain(cloud.xyz, params)
    z_norm = provisional - provisional.min()
    provenance = dict(cloud.provenance, height_cell_size_m=repr(params.cell_size_m))
    return cloud.replace(z_normalized=z_norm, provenance=provenance)


def center_planimetric(cloud):
    """Subtract the mean X and mean Y; Z is left alone."""
    if len(cloud) == 0:
        raise CloudError("cannot centre an empty cloud")
    xyz = np.array(cloud.xyz)
    xyz[:, 0] -= xyz[:, 0].mean()
    xyz[:, 1] -= xyz[:, 1].mean()
    if isinstance(cloud, MultispectralCloud):
        return cloud.replace(xyz=xyz)
    return ChannelCloud(cloud.channel, xyz, cloud.reflectance_db, cloud.labels)


def robust_minmax_scale(values) -> np.ndarray:
    """Median/IQR robust scaling followed by min-max scaling to [0, 1].

    Zero IQR skips the robust stage; a constant input maps to 0.5 everywhere.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("robust_minmax_scale needs at least one value")
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    iqr = q75 - q25
    if iqr > 0:
        v = (v - med) / iqr
    lo, hi = v.min(), v.max()
    if hi > lo:
        return (v - lo) / (hi - lo)
    return np.full(v.shape, 0.5)
