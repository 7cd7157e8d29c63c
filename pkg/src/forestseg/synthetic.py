"""Labeled synthetic forest scenes built from simple analytic primitives.

A scene is a reference cloud (every point labeled and carrying all three
reflectances) plus three channel clouds that are independent random
thinnings of it. Each primitive draws from its own Philox stream keyed by
``(seed, primitive id)``, so the output does not depend on emission order.

Primitives: a ground plane (optionally tilted along X), low-vegetation tufts
(filled half-ellipsoids), trunks (vertical cylinder walls), branches (thin
cylinders inside the crown), foliage (ellipsoidal shells) and woody debris
(horizontal cylinders lying on the ground).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import scene_defaults as D
from .model import CHANNEL_ORDER, Channel, ChannelCloud, MultispectralCloud, SemanticClass

G, LV, TR, BR, FO, WD = SemanticClass


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    extent_m: tuple = D.EXTENT_M
    slope: float = D.SLOPE
    n_trees: int = D.N_TREES
    total_points: int = D.TOTAL_POINTS
    class_fractions: dict = field(default_factory=lambda: dict(D.CLASS_FRACTIONS))
    spectral_model: dict = field(default_factory=lambda: {c: dict(v) for c, v in D.SPECTRAL_MODEL.items()})
    channel_ratio: dict = field(default_factory=lambda: dict(D.CHANNEL_RATIO))
    low_vegetation: bool = True
    seed: int = D.SEED

    def __post_init__(self):
        w, d = (float(v) for v in self.extent_m)
        if not (math.isfinite(w) and math.isfinite(d) and w > 0 and d > 0):
            raise SceneError(f"degenerate extent {self.extent_m}")
        object.__setattr__(self, "extent_m", (w, d))
        if not math.isfinite(self.slope):
            raise SceneError("slope must be finite")
        if self.n_trees < 0:
            raise SceneError("n_trees must be >= 0")
        if self.total_points < 1:
            raise SceneError("total_points must be >= 1")
        if any(not (f > 0) for f in self.class_fractions.values()) or set(self.class_fractions) != set(SemanticClass):
            raise SceneError("class_fractions needs a positive value for every class")
        for cls in SemanticClass:
            for ch in CHANNEL_ORDER:
                mean, std = self.spectral_model[cls][ch]
                if not (math.isfinite(mean) and std >= 0):
                    raise SceneError(f"bad spectral model for {cls.name}/{ch.name}")
        if any(not (r > 0) for r in self.channel_ratio.values()) or set(self.channel_ratio) != set(CHANNEL_ORDER):
            raise SceneError("channel_ratio needs a positive value for every channel")

    def keep_probabilities(self) -> dict:
        total = sum(self.channel_ratio.values())
        return {ch: self.channel_ratio[ch] / total for ch in CHANNEL_ORDER}


class Scene(NamedTuple):
    swir: ChannelCloud
    nir: ChannelCloud
    green: ChannelCloud
    reference: MultispectralCloud

    @property
    def channels(self) -> tuple:
        return (self.swir, self.nir, self.green)


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & ((1 << 64) - 1), stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _allocate(total: int, weights) -> np.ndarray:
    """Split ``total`` into integer parts proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    out = np.floor(raw).astype(np.int64)
    rest = total - out.sum()
    order = np.lexsort((np.arange(len(w)), -(raw - out)))
    out[order[:rest]] += 1
    return out


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cylinder_wall(rng, n, base, axis, length, radius):
    """Points on the side of a cylinder starting at ``base`` along unit ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    t = rng.uniform(0.0, length, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    return (np.asarray(base) + t[:, None] * axis
            + radius * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v))


@dataclass(frozen=True)
class _Tree:
    x: float
    y: float
    crown_radius: float
    crown_half_height: float
    crown_base: float
    trunk_radius: float
    n_branches: int

    @property
    def trunk_height(self) -> float:
        return self.crown_base + 0.5 * self.crown_half_height


def _place_trees(spec: SceneSpec) -> list:
    if spec.n_trees == 0:
        return []
    w, d = spec.extent_m
    cols = max(1, round(math.sqrt(spec.n_trees * w / d)))
    rows = math.ceil(spec.n_trees / cols)
    cw, cd = w / cols, d / rows
    rng = _rng(spec.seed, 1)
    trees = []
    for k in range(spec.n_trees):
        i, j = k % cols, k // cols
        cr = min(rng.uniform(*D.CROWN_RADIUS_M), 0.45 * min(cw, cd))
        x = (i + 0.5) * cw + rng.uniform(-0.2, 0.2) * cw
        y = (j + 0.5) * cd + rng.uniform(-0.2, 0.2) * cd
        trees.append(_Tree(x, y, cr, rng.uniform(*D.CROWN_HALF_HEIGHT_M), rng.uniform(*D.CROWN_BASE_M),
                           min(rng.uniform(*D.TRUNK_RADIUS_M), 0.5 * cr),
                           int(rng.integers(D.BRANCHES_PER_TREE[0], D.BRANCHES_PER_TREE[1] + 1))))
    return trees


def _terrain(spec: SceneSpec, x):
    return spec.slope * x


class _Primitive(NamedTuple):
    cls: SemanticClass
    weight: float
    emit: object


def _primitives(spec: SceneSpec, trees: list) -> list:
    """Every primitive with its relative size (used to share out class points)."""
    w, d = spec.extent_m
    prims = []

    def ground(rng, n):
        x = rng.uniform(0, w, n)
        y = rng.uniform(0, d, n)
        return np.column_stack([x, y, _terrain(spec, x) + rng.normal(0, D.GROUND_NOISE_M, n)])

    prims.append(_Primitive(G, 1.0, ground))

    if spec.low_vegetation:
        rng = _rng(spec.seed, 2)
        n_tufts = max(1, round(spec.total_points * spec.class_fractions[LV] / D.TUFT_POINTS))
        for _ in range(n_tufts):
            cx, cy = rng.uniform(0, w), rng.uniform(0, d)
            rad, hgt = rng.uniform(*D.TUFT_RADIUS_M), rng.uniform(*D.TUFT_HEIGHT_M)

            def tuft(rng, n, cx=cx, cy=cy, rad=rad, hgt=hgt):
                v = _unit_vectors(rng, n)
                v[:, 2] = np.abs(v[:, 2])
                r = rng.uniform(0, 1, n) ** (1 / 3)
                p = v * r[:, None] * np.array([rad, rad, hgt])
                x = cx + p[:, 0]
                return np.column_stack([x, cy + p[:, 1], _terrain(spec, x) + p[:, 2]])

            prims.append(_Primitive(LV, rad * rad * hgt, tuft))

    for ti, t in enumerate(trees):
        base = np.array([t.x, t.y, _terrain(spec, t.x)])

        def trunk(rng, n, t=t, base=base):
            return _cylinder_wall(rng, n, base, (0.0, 0.0, 1.0), t.trunk_height, t.trunk_radius)

        prims.append(_Primitive(TR, t.trunk_radius * t.trunk_height, trunk))

        rng = _rng(spec.seed, 1 << 20 | ti)
        for _ in range(t.n_branches):
            z0 = rng.uniform(t.crown_base, t.trunk_height)
            az = rng.uniform(0, 2 * np.pi)
            el = np.radians(rng.uniform(20.0, 50.0))
            axis = np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
            length = rng.uniform(0.6, 0.9) * t.crown_radius

            def branch(rng, n, start=base + [0.0, 0.0, z0], axis=axis, length=length):
                return _cylinder_wall(rng, n, start, axis, length, D.BRANCH_RADIUS_M)

            prims.append(_Primitive(BR, length, branch))

        center = base + [0.0, 0.0, t.crown_base + t.crown_half_height]
        semi = np.array([t.crown_radius, t.crown_radius, t.crown_half_height])

        def foliage(rng, n, center=center, semi=semi):
            r = rng.uniform(D.FOLIAGE_SHELL_INNER, 1.0, n)
            return center + _unit_vectors(rng, n) * r[:, None] * semi

        prims.append(_Primitive(FO, float(np.prod(semi)) ** (2 / 3), foliage))

    if trees:
        rng = _rng(spec.seed, 4)
        for _ in range(max(1, len(trees) // 4)):
            length, radius = rng.uniform(*D.LOG_LENGTH_M), rng.uniform(*D.LOG_RADIUS_M)
            az = rng.uniform(0, np.pi)
            axis = np.array([np.cos(az), np.sin(az), 0.0])
            cx, cy = rng.uniform(length / 2, max(w - length / 2, length / 2)), rng.uniform(0, d)

            def log(rng, n, axis=axis, length=length, radius=radius, cx=cx, cy=cy):
                start = np.array([cx, cy, 0.0]) - 0.5 * length * axis
                p = _cylinder_wall(rng, n, start, axis, length, radius)
                p[:, 2] += _terrain(spec, p[:, 0]) + radius
                return p

            prims.append(_Primitive(WD, length * radius, log))
    return prims


def generate_scene(spec: SceneSpec = SceneSpec()) -> Scene:
    trees = _place_trees(spec)
    prims = _primitives(spec, trees)
    present = sorted({p.cls for p in prims})
    frac = np.array([spec.class_fractions[c] for c in present])
    class_points = dict(zip(present, _allocate(spec.total_points, frac)))

    xyz_parts, label_parts, refl_parts = [], [], []
    for cls in present:
        members = [(k, p) for k, p in enumerate(prims) if p.cls == cls]
        counts = _allocate(class_points[cls], [p.weight for _, p in members])
        for (k, prim), n in zip(members, counts):
            if n == 0:
                continue
            rng = _rng(spec.seed, 1 << 32 | k)
            xyz_parts.append(prim.emit(rng, int(n)))
            label_parts.append(np.full(n, int(cls), dtype=np.int8))
            model = spec.spectral_model[cls]
            refl_parts.append(np.column_stack(
                [rng.normal(model[ch][0], model[ch][1], n) for ch in CHANNEL_ORDER]).astype(np.float32))
    xyz = np.concatenate(xyz_parts)
    labels = np.concatenate(label_parts)
    refl = np.concatenate(refl_parts)
    provenance = {"generator": "synthetic", "seed": str(spec.seed), "n_trees": str(spec.n_trees)}
    reference = MultispectralCloud(xyz, refl, labels, None, provenance)

    channels = []
    for c, (ch, p) in enumerate(spec.keep_probabilities().items()):
        keep = np.flatnonzero(_rng(spec.seed, 2 << 32 | c).random(len(xyz)) < p)
        channels.append(ChannelCloud(ch, xyz[keep], refl[keep, ch.column], labels[keep]))
    return Scene(*channels, reference)


# ---------------------------------------------------------------------------
# key-value configuration


_CLASS_KEYS = {c.name.lower(): c for c in SemanticClass}
_CHANNEL_KEYS = {c.name.lower(): c for c in Channel}


def parse_scene_config(text: str) -> SceneSpec:
    """Build a SceneSpec from ``key = value`` lines; ``#`` starts a comment.

    Keys: ``extent_m`` (two numbers), ``slope``, ``n_trees``, ``total_points``,
    ``seed``, ``low_vegetation`` (true/false), ``fraction.<class>``,
    ``spectral.<class>.<channel>`` (mean and std in dB) and
    ``channel_ratio.<channel>``. Class and channel names are the lower-case
    enum names, e.g. ``spectral.woody_debris.swir = -2 0.8``.
    """
    kw: dict = {}
    fractions = dict(D.CLASS_FRACTIONS)
    spectral = {c: dict(v) for c, v in D.SPECTRAL_MODEL.items()}
    ratio = dict(D.CHANNEL_RATIO)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        try:
            nums = value.replace(",", " ").split()
            if key == "extent_m":
                kw["extent_m"] = tuple(float(v) for v in nums)
                if len(kw["extent_m"]) != 2:
                    raise ValueError("extent_m needs two numbers")
            elif key == "slope":
                kw["slope"] = float(value)
            elif key in ("n_trees", "total_points", "seed"):
                kw[key] = int(value)
            elif key == "low_vegetation":
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value}")
                kw[key] = value.lower() in ("true", "1", "yes")
            elif parts[0] == "fraction" and len(parts) == 2:
                fractions[_CLASS_KEYS[parts[1]]] = float(value)
            elif parts[0] == "spectral" and len(parts) == 3:
                mean, std = (float(v) for v in nums)
                spectral[_CLASS_KEYS[parts[1]]][_CHANNEL_KEYS[parts[2]]] = (mean, std)
            elif parts[0] == "channel_ratio" and len(parts) == 2:
                ratio[_CHANNEL_KEYS[parts[1]]] = float(value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except (KeyError, ValueError) as e:
            raise SceneError(f"line {lineno}: {e}") from e
    return SceneSpec(class_fractions=fractions, spectral_model=spectral, channel_ratio=ratio, **kw)


def read_scene_config(path) -> SceneSpec:
    return parse_scene_config(Path(path).read_text(encoding="utf-8"))
