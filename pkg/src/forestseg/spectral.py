"""Reflectance units, vegetation indices and per-class index separability."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import combinations

import numpy as np

from .model import CLASS_NAMES, Channel, SemanticClass, UNLABELED

SEPARABILITY_EPS = 1e-12
MIN_CLASS_POINTS = 10


class SpectralError(ValueError):
    pass


class VegetationIndexKind(Enum):
    NDVI_NIR_GREEN = "NDVI_NIR_GREEN"
    NDVI_NIR_SWIR = "NDVI_NIR_SWIR"
    CVI = "CVI"
    GRVI = "GRVI"
    GDVI = "GDVI"


def db_to_linear(r_db):
    """Convert reflectance from decibels to linear units, 10 ** (dB / 10)."""
    r = np.asarray(r_db, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise SpectralError("reflectance in dB must be finite")
    out = np.power(10.0, r / 10.0)
    return float(out) if out.ndim == 0 else out


def vegetation_index(kind: VegetationIndexKind, swir_lin, nir_lin, green_lin):
    """Evaluate one index on linear reflectances (scalars or arrays).

    Inputs must be strictly positive; convert dB values with `db_to_linear`.
    """
    swir = np.asarray(swir_lin, dtype=np.float64)
    nir = np.asarray(nir_lin, dtype=np.float64)
    green = np.asarray(green_lin, dtype=np.float64)
    for name, band in (("SWIR", swir), ("NIR", nir), ("Green", green)):
        if not np.all(band > 0):
            raise SpectralError(f"{name} reflectance must be > 0 in linear units")
    kind = VegetationIndexKind(kind)
    if kind is VegetationIndexKind.NDVI_NIR_GREEN:
        out = (nir - green) / (nir + green)
    elif kind is VegetationIndexKind.NDVI_NIR_SWIR:
        out = (nir - swir) / (nir + swir)
    elif kind is VegetationIndexKind.CVI:
        out = nir * green / (swir * swir)
    elif kind is VegetationIndexKind.GRVI:
        out = nir / green
    else:
        out = nir - green
    return float(out) if out.ndim == 0 else out


def cloud_index(cloud, kind: VegetationIndexKind) -> np.ndarray:
    """Per-point index of a multispectral cloud, computed from linear reflectance."""
    lin = db_to_linear(cloud.reflectance_db.astype(np.float64))
    return vegetation_index(
        kind,
        lin[:, Channel.SWIR.column],
        lin[:, Channel.NIR.column],
        lin[:, Channel.GREEN.column],
    )


@dataclass(frozen=True)
class ClassStats:
    median: float
    q25: float
    q75: float

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25


@dataclass(frozen=True)
class SeparabilityReport:
    kind: VegetationIndexKind
    per_class_stats: dict
    score: float

    def to_text(self) -> str:
        lines = [f"# vegetation index {self.kind.value}",
                 f"{'class':<16}{'q25':>12}{'median':>12}{'q75':>12}"]
        for cls, st in sorted(self.per_class_stats.items()):
            lines.append(f"{CLASS_NAMES[cls]:<16}{st.q25:>12.6f}{st.median:>12.6f}{st.q75:>12.6f}")
        lines.append(f"score {self.score:.6f}")
        return "\n".join(lines) + "\n"


def separability_from_values(values: np.ndarray, labels: np.ndarray,
                             kind: VegetationIndexKind) -> SeparabilityReport:
    """Median gap over pooled IQR, averaged over all pairs of present classes.

    The pooled IQR of a pair is the mean of the two class IQRs.
    """
    labels = np.asarray(labels)
    if np.any(labels == UNLABELED):
        raise SpectralError("separability needs a fully labeled cloud")
    counts = np.bincount(labels.astype(np.int64), minlength=len(SemanticClass))
    present = [SemanticClass(c) for c in np.flatnonzero(counts)]
    small = [c for c in present if counts[c] < MIN_CLASS_POINTS]
    if small:
        names = ", ".join(f"{CLASS_NAMES[c]} ({counts[c]})" for c in small)
        raise SpectralError(f"classes with fewer than {MIN_CLASS_POINTS} points: {names}")
    if len(present) < 2:
        raise SpectralError("separability needs at least two classes")
    stats = {}
    for c in present:
        q25, med, q75 = np.percentile(values[labels == c], [25, 50, 75])
        stats[c] = ClassStats(float(med), float(q25), float(q75))
    gaps = [
        abs(stats[a].median - stats[b].median) / (0.5 * (stats[a].iqr + stats[b].iqr) + SEPARABILITY_EPS)
        for a, b in combinations(present, 2)
    ]
    return SeparabilityReport(kind, stats, float(np.mean(gaps)))


def vi_separability(cloud, kind: VegetationIndexKind) -> SeparabilityReport:
    if cloud.labels is None:
        raise SpectralError("separability needs a labeled cloud")
    return separability_from_values(cloud_index(cloud, kind), cloud.labels, kind)
