"""Shared data model: channels, semantic classes and point clouds.

Clouds are stored column-wise as numpy arrays and frozen after construction,
so they can be handed to worker threads without copying. Per-point views
(`ChannelPoint`, `MultispectralPoint`) are produced on demand for callers
that want record-style access.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterator, NamedTuple, Optional

import numpy as np

UNLABELED = -1


class Channel(Enum):
    SWIR = "SWIR"
    NIR = "NIR"
    GREEN = "GREEN"

    @property
    def wavelength_nm(self) -> int:
        return WAVELENGTH_NM[self]

    @property
    def column(self) -> int:
        """Position of this channel in a multispectral reflectance row."""
        return CHANNEL_ORDER.index(self)


CHANNEL_ORDER = (Channel.SWIR, Channel.NIR, Channel.GREEN)
WAVELENGTH_NM = {Channel.SWIR: 1550, Channel.NIR: 905, Channel.GREEN: 532}

# Average per-scanner point densities (points/m^2) of the reference survey.
CHANNEL_DENSITY = {Channel.SWIR: 530.0, Channel.NIR: 163.0, Channel.GREEN: 604.0}


class SemanticClass(IntEnum):
    GROUND = 0
    LOW_VEGETATION = 1
    TRUNK = 2
    BRANCHES = 3
    FOLIAGE = 4
    WOODY_DEBRIS = 5

    @property
    def display_name(self) -> str:
        return CLASS_NAMES[self]


N_CLASSES = len(SemanticClass)
CLASS_NAMES = {
    SemanticClass.GROUND: "Ground",
    SemanticClass.LOW_VEGETATION: "Low vegetation",
    SemanticClass.TRUNK: "Trunk",
    SemanticClass.BRANCHES: "Branches",
    SemanticClass.FOLIAGE: "Foliage",
    SemanticClass.WOODY_DEBRIS: "Woody debris",
}


class CloudError(ValueError):
    """Raised when a cloud violates one of its invariants."""


class ChannelPoint(NamedTuple):
    x: float
    y: float
    z: float
    reflectance_db: float
    channel: Channel
    label: Optional[SemanticClass]


class MultispectralPoint(NamedTuple):
    x: float
    y: float
    z: float
    z_normalized: Optional[float]
    reflectance_db: dict
    label: Optional[SemanticClass]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_xyz(xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise CloudError(f"coordinates must have shape (n, 3), got {xyz.shape}")
    bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
    if bad.size:
        raise CloudError(f"non-finite coordinate at point {bad[0]}")
    return xyz


def _check_labels(labels, n: int) -> Optional[np.ndarray]:
    if labels is None:
        return None
    labels = np.asarray(labels, dtype=np.int8)
    if labels.shape != (n,):
        raise CloudError(f"labels must have shape ({n},), got {labels.shape}")
    bad = np.flatnonzero((labels < UNLABELED) | (labels >= N_CLASSES))
    if bad.size:
        raise CloudError(f"invalid class code {labels[bad[0]]} at point {bad[0]}")
    return labels


def _label_or_none(labels: Optional[np.ndarray], i: int) -> Optional[SemanticClass]:
    if labels is None or labels[i] == UNLABELED:
        return None
    return SemanticClass(int(labels[i]))


@dataclass(frozen=True, eq=False)
class ChannelCloud:
    """Points of one monochromatic scanner.

    ``reflectance_db`` is float32, matching the on-disk precision, so that a
    cloud survives a binary round trip bit for bit.
    """

    channel: Channel
    xyz: np.ndarray
    reflectance_db: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = _check_xyz(self.xyz)
        refl = np.asarray(self.reflectance_db, dtype=np.float32)
        if refl.shape != (len(xyz),):
            raise CloudError(f"reflectance must have shape ({len(xyz)},), got {refl.shape}")
        bad = np.flatnonzero(~np.isfinite(refl))
        if bad.size:
            raise CloudError(f"non-finite reflectance at point {bad[0]}")
        object.__setattr__(self, "xyz", _freeze(xyz))
        object.__setattr__(self, "reflectance_db", _freeze(refl))
        labels = _check_labels(self.labels, len(xyz))
        object.__setattr__(self, "labels", None if labels is None else _freeze(labels))

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> ChannelPoint:
        x, y, z = (float(v) for v in self.xyz[i])
        return ChannelPoint(x, y, z, float(self.reflectance_db[i]), self.channel,
                            _label_or_none(self.labels, i))

    def __iter__(self) -> Iterator[ChannelPoint]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "ChannelCloud":
        index = np.asarray(index)
        return ChannelCloud(
            self.channel,
            self.xyz[index],
            self.reflectance_db[index],
            None if self.labels is None else self.labels[index],
        )

    @classmethod
    def from_points(cls, channel: Channel, points) -> "ChannelCloud":
        points = list(points)
        for i, p in enumerate(points):
            if p.channel is not channel:
                raise CloudError(f"point {i} belongs to {p.channel.name}, cloud is {channel.name}")
        xyz = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64).reshape(-1, 3)
        refl = np.array([p.reflectance_db for p in points], dtype=np.float32)
        labels = None
        if any(p.label is not None for p in points):
            labels = np.array([UNLABELED if p.label is None else int(p.label) for p in points])
        return cls(channel, xyz, refl, labels)


@dataclass(frozen=True, eq=False)
class MultispectralCloud:
    """Fused points carrying one reflectance per channel.

    ``reflectance_db`` has one column per channel in ``CHANNEL_ORDER``.
    A point without all three values cannot be represented.
    """

    xyz: np.ndarray
    reflectance_db: np.ndarray
    labels: Optional[np.ndarray] = None
    z_normalized: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        xyz = _check_xyz(self.xyz)
        n = len(xyz)
        refl = np.asarray(self.reflectance_db, dtype=np.float32)
        if refl.size == 0:
            refl = refl.reshape(0, len(CHANNEL_ORDER))
        if refl.shape != (n, len(CHANNEL_ORDER)):
            raise CloudError(f"reflectance must have shape ({n}, 3), got {refl.shape}")
        bad = np.flatnonzero(~np.isfinite(refl).all(axis=1))
        if bad.size:
            raise CloudError(f"non-finite reflectance at point {bad[0]}")
        object.__setattr__(self, "xyz", _freeze(xyz))
        object.__setattr__(self, "reflectance_db", _freeze(refl))
        labels = _check_labels(self.labels, n)
        object.__setattr__(self, "labels", None if labels is None else _freeze(labels))
        if self.z_normalized is not None:
            zn = np.asarray(self.z_normalized, dtype=np.float64)
            if zn.shape != (n,):
                raise CloudError(f"z_normalized must have shape ({n},), got {zn.shape}")
            bad = np.flatnonzero(~(zn >= 0))
            if bad.size:
                raise CloudError(f"z_normalized must be finite and >= 0 (point {bad[0]})")
            object.__setattr__(self, "z_normalized", _freeze(zn))
        object.__setattr__(self, "provenance", {str(k): str(v) for k, v in self.provenance.items()})

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> MultispectralPoint:
        x, y, z = (float(v) for v in self.xyz[i])
        zn = None if self.z_normalized is None else float(self.z_normalized[i])
        refl = {ch: float(self.reflectance_db[i, ch.column]) for ch in CHANNEL_ORDER}
        return MultispectralPoint(x, y, z, zn, refl, _label_or_none(self.labels, i))

    def __iter__(self) -> Iterator[MultispectralPoint]:
        return (self[i] for i in range(len(self)))

    def channel_reflectance(self, channel: Channel) -> np.ndarray:
        return self.reflectance_db[:, channel.column]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels != UNLABELED))

    def replace(self, **changes) -> "MultispectralCloud":
        fields = dict(
            xyz=self.xyz,
            reflectance_db=self.reflectance_db,
            labels=self.labels,
            z_normalized=self.z_normalized,
            provenance=dict(self.provenance),
        )
        fields.update(changes)
        return MultispectralCloud(**fields)

    def subset(self, index) -> "MultispectralCloud":
        index = np.asarray(index)
        return MultispectralCloud(
            self.xyz[index],
            self.reflectance_db[index],
            None if self.labels is None else self.labels[index],
            None if self.z_normalized is None else self.z_normalized[index],
            dict(self.provenance),
        )

    @classmethod
    def from_points(cls, points, provenance=None) -> "MultispectralCloud":
        points = list(points)
        xyz = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64).reshape(-1, 3)
        refl = np.array(
            [[p.reflectance_db[ch] for ch in CHANNEL_ORDER] for p in points], dtype=np.float32
        ).reshape(-1, 3)
        labels = None
        if any(p.label is not None for p in points):
            labels = np.array([UNLABELED if p.label is None else int(p.label) for p in points])
        zn = None
        if points and all(p.z_normalized is not None for p in points):
            zn = np.array([p.z_normalized for p in points])
        return cls(xyz, refl, labels, zn, provenance or {})


def concatenate(clouds) -> MultispectralCloud:
    """Stack multispectral clouds in order. Optional columns survive only if all have them."""
    clouds = list(clouds)
    if not clouds:
        raise CloudError("nothing to concatenate")
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    zn = None
    if all(c.z_normalized is not None for c in clouds):
        zn = np.concatenate([c.z_normalized for c in clouds])
    return MultispectralCloud(
        np.concatenate([c.xyz for c in clouds]),
        np.concatenate([c.reflectance_db for c in clouds]),
        labels,
        zn,
        {"concatenated_from": str(len(clouds))},
    )


def class_distribution(cloud) -> dict:
    """Fraction of points per semantic class.

    Every point must be labeled; classes that do not occur map to 0.
    """
    labels = cloud.labels
    if labels is None:
        if len(cloud):
            raise CloudError("point 0 is unlabeled")
        labels = np.empty(0, dtype=np.int8)
    unlabeled = np.flatnonzero(labels == UNLABELED)
    if unlabeled.size:
        raise CloudError(f"point {unlabeled[0]} is unlabeled")
    counts = np.bincount(labels.astype(np.int64), minlength=N_CLASSES)
    total = counts.sum()
    if total == 0:
        return {c: 0.0 for c in SemanticClass}
    return {c: counts[c] / total for c in SemanticClass}
