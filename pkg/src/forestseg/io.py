"""Cloud file formats and the train/test split.

Two encodings are supported for both channel and multispectral clouds.

Text (diffable)::

    # version 1
    # channels SWIR,NIR,GREEN
    # labels 1
    # z_normalized 0
    # count 2
    # provenance {"source": "merge"}
    x y z [z_norm] r_swir r_nir r_green [label]

Columns are space separated; floats are written with the shortest
representation that round-trips and at least six fractional digits.
A missing label inside a labeled file is written as -1.

Binary (little endian)::

    16 bytes   magic  b"MSFORESTCLOUD\\0\\0\\0"
    u32        format version
    u8         channel mask (bit 0 SWIR, bit 1 NIR, bit 2 GREEN)
    u8         has_labels
    u8         has_z_normalized
    u8         reserved (0)
    u64        point count
    u32        provenance length in bytes, followed by UTF-8 JSON
    records    packed: f64 x, f64 y, f64 z, [f64 z_norm],
               f32 reflectance per channel in mask order, [u8 label]

A missing label in the binary encoding is stored as 255.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    CHANNEL_ORDER,
    UNLABELED,
    Channel,
    ChannelCloud,
    CloudError,
    MultispectralCloud,
)

FORMAT_VERSION = 1
MAGIC = b"MSFORESTCLOUD\0\0\0"
_HEADER = struct.Struct("<IBBBBQI")
_BINARY_UNLABELED = 255

PathLike = Union[str, Path]


class CloudFormatError(ValueError):
    """Malformed cloud file."""


class CloudIOError(OSError):
    """The operating system refused a read or write."""


@dataclass(frozen=True)
class CloudFileHeader:
    format_version: int
    channel_set: tuple
    has_labels: bool
    has_z_normalized: bool
    point_count: int


def _channel_mask(channels) -> int:
    return sum(1 << CHANNEL_ORDER.index(ch) for ch in channels)


def _channels_from_mask(mask: int) -> tuple:
    return tuple(ch for i, ch in enumerate(CHANNEL_ORDER) if mask & (1 << i))


def _record_dtype(header: CloudFileHeader) -> np.dtype:
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if header.has_z_normalized:
        fields.append(("z_norm", "<f8"))
    fields += [(f"r_{ch.name.lower()}", "<f4") for ch in header.channel_set]
    if header.has_labels:
        fields.append(("label", "u1"))
    return np.dtype(fields)


def _fmt(values: np.ndarray) -> list:
    return [np.format_float_positional(v, unique=True, trim="k", min_digits=6) for v in values]


# ---------------------------------------------------------------------------
# writing


def _columns(cloud) -> tuple:
    """Header plus per-column arrays for either cloud type."""
    if isinstance(cloud, ChannelCloud):
        header = CloudFileHeader(FORMAT_VERSION, (cloud.channel,), cloud.labels is not None,
                                 False, len(cloud))
        refl = [cloud.reflectance_db]
        zn = None
        provenance = {}
    else:
        header = CloudFileHeader(FORMAT_VERSION, CHANNEL_ORDER, cloud.labels is not None,
                                 cloud.z_normalized is not None, len(cloud))
        refl = [cloud.reflectance_db[:, i] for i in range(len(CHANNEL_ORDER))]
        zn = cloud.z_normalized
        provenance = cloud.provenance
    return header, refl, zn, provenance


def _write_text(cloud, path: Path) -> None:
    header, refl, zn, provenance = _columns(cloud)
    lines = [
        f"# version {header.format_version}",
        "# channels " + ",".join(ch.name for ch in header.channel_set),
        f"# labels {int(header.has_labels)}",
        f"# z_normalized {int(header.has_z_normalized)}",
        f"# count {header.point_count}",
    ]
    if provenance:
        lines.append("# provenance " + json.dumps(provenance, sort_keys=True))
    cols = [_fmt(cloud.xyz[:, 0]), _fmt(cloud.xyz[:, 1]), _fmt(cloud.xyz[:, 2])]
    if zn is not None:
        cols.append(_fmt(zn))
    cols += [_fmt(r) for r in refl]
    if header.has_labels:
        cols.append([str(int(v)) for v in cloud.labels])
    lines.extend(" ".join(row) for row in zip(*cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_binary(cloud, path: Path) -> None:
    header, refl, zn, provenance = _columns(cloud)
    records = np.empty(header.point_count, dtype=_record_dtype(header))
    records["x"], records["y"], records["z"] = cloud.xyz.T
    if zn is not None:
        records["z_norm"] = zn
    for ch, r in zip(header.channel_set, refl):
        records[f"r_{ch.name.lower()}"] = r
    if header.has_labels:
        labels = cloud.labels.astype(np.int16)
        records["label"] = np.where(labels == UNLABELED, _BINARY_UNLABELED, labels)
    prov = json.dumps(provenance, sort_keys=True).encode("utf-8") if provenance else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(header.format_version, _channel_mask(header.channel_set),
                              int(header.has_labels), int(header.has_z_normalized), 0,
                              header.point_count, len(prov)))
        fh.write(prov)
        fh.write(records.tobytes())


def _write(cloud, path: PathLike, format: str) -> None:
    path = Path(path)
    try:
        if format == "text":
            _write_text(cloud, path)
        elif format == "binary":
            _write_binary(cloud, path)
        else:
            raise ValueError(f"unknown format {format!r}; expected 'text' or 'binary'")
    except OSError as e:
        raise CloudIOError(f"cannot write {path}: {e.strerror or e}") from e


def write_multispectral_cloud(cloud: MultispectralCloud, path: PathLike, format: str = "binary") -> None:
    _write(cloud, path, format)


def write_channel_cloud(cloud: ChannelCloud, path: PathLike, format: str = "binary") -> None:
    _write(cloud, path, format)


# ---------------------------------------------------------------------------
# reading


def _parse_text(data: bytes, path: Path):
    lines = data.decode("utf-8").splitlines()
    meta = {}
    body_start = 0
    for body_start, line in enumerate(lines):
        if not line.startswith("#"):
            break
        key, _, value = line[1:].strip().partition(" ")
        meta[key] = value.strip()
    else:
        body_start = len(lines)
    try:
        header = CloudFileHeader(
            int(meta["version"]),
            tuple(Channel[name] for name in meta["channels"].split(",") if name),
            meta["labels"] == "1",
            meta.get("z_normalized", "0") == "1",
            int(meta["count"]),
        )
    except (KeyError, ValueError) as e:
        raise CloudFormatError(f"{path}: bad header ({e})") from e
    if header.format_version != FORMAT_VERSION:
        raise CloudFormatError(f"{path}: unsupported format version {header.format_version}")
    provenance = json.loads(meta["provenance"]) if "provenance" in meta else {}
    n_cols = 3 + header.has_z_normalized + len(header.channel_set) + header.has_labels
    body = [ln for ln in lines[body_start:] if ln.strip()]
    if len(body) != header.point_count:
        raise CloudFormatError(
            f"{path}: header count {header.point_count} but {len(body)} records follow")
    values = np.empty((len(body), n_cols), dtype=np.float64)
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != n_cols:
            raise CloudFormatError(f"{path}: record {i} has {len(parts)} fields, expected {n_cols}")
        try:
            values[i] = [float(p) for p in parts]
        except ValueError as e:
            raise CloudFormatError(f"{path}: record {i}: {e}") from e
        if not np.all(np.isfinite(values[i])):
            raise CloudFormatError(f"{path}: record {i} contains a non-finite value")
    out = {"xyz": values[:, 0:3]}
    col = 3
    if header.has_z_normalized:
        out["z_norm"] = values[:, col]
        col += 1
    out["refl"] = []
    for _ in header.channel_set:
        out["refl"].append(values[:, col].astype(np.float32))
        col += 1
    if header.has_labels:
        lab = values[:, col]
        if np.any(lab != np.round(lab)) or np.any((lab < UNLABELED) | (lab > 5)):
            bad = np.flatnonzero((lab != np.round(lab)) | (lab < UNLABELED) | (lab > 5))[0]
            raise CloudFormatError(f"{path}: record {bad} has invalid label {lab[bad]}")
        out["labels"] = lab.astype(np.int8)
    return header, out, provenance


def _parse_binary(data: bytes, path: Path):
    if len(data) < len(MAGIC) + _HEADER.size:
        raise CloudFormatError(f"{path}: truncated header")
    version, mask, has_labels, has_zn, _, count, prov_len = _HEADER.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CloudFormatError(f"{path}: unsupported format version {version}")
    header = CloudFileHeader(version, _channels_from_mask(mask), bool(has_labels), bool(has_zn), count)
    offset = len(MAGIC) + _HEADER.size
    try:
        provenance = json.loads(data[offset:offset + prov_len].decode("utf-8")) if prov_len else {}
    except ValueError as e:
        raise CloudFormatError(f"{path}: corrupt provenance block") from e
    offset += prov_len
    dtype = _record_dtype(header)
    expected = count * dtype.itemsize
    if len(data) - offset != expected:
        raise CloudFormatError(
            f"{path}: header count {count} needs {expected} bytes of records, found {len(data) - offset}")
    records = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    out = {"xyz": np.column_stack([records["x"], records["y"], records["z"]])}
    finite = np.isfinite(out["xyz"]).all(axis=1)
    if header.has_z_normalized:
        out["z_norm"] = records["z_norm"].copy()
        finite &= np.isfinite(out["z_norm"])
    out["refl"] = [records[f"r_{ch.name.lower()}"].copy() for ch in header.channel_set]
    for r in out["refl"]:
        finite &= np.isfinite(r)
    bad = np.flatnonzero(~finite)
    if bad.size:
        raise CloudFormatError(f"{path}: record {bad[0]} contains a non-finite value")
    if header.has_labels:
        lab = records["label"].astype(np.int16)
        invalid = np.flatnonzero((lab > 5) & (lab != _BINARY_UNLABELED))
        if invalid.size:
            raise CloudFormatError(f"{path}: record {invalid[0]} has invalid label {lab[invalid[0]]}")
        out["labels"] = np.where(lab == _BINARY_UNLABELED, UNLABELED, lab).astype(np.int8)
    return header, out, provenance


def _read(path: PathLike):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CloudIOError(f"cannot read {path}: {e.strerror or e}") from e
    if data.startswith(MAGIC):
        return _parse_binary(data, path)
    return _parse_text(data, path)


def read_header(path: PathLike) -> CloudFileHeader:
    return _read(path)[0]


def read_channel_cloud(path: PathLike, expected_channel: Channel) -> ChannelCloud:
    header, cols, _ = _read(path)
    if header.channel_set != (expected_channel,):
        found = ",".join(ch.name for ch in header.channel_set) or "none"
        raise CloudFormatError(f"{path}: header channels {found}, expected {expected_channel.name}")
    try:
        return ChannelCloud(expected_channel, cols["xyz"], cols["refl"][0], cols.get("labels"))
    except CloudError as e:
        raise CloudFormatError(f"{path}: {e}") from e


def read_multispectral_cloud(path: PathLike) -> MultispectralCloud:
    header, cols, provenance = _read(path)
    if header.channel_set != CHANNEL_ORDER:
        found = ",".join(ch.name for ch in header.channel_set) or "none"
        raise CloudFormatError(f"{path}: multispectral file must carry SWIR,NIR,GREEN, found {found}")
    refl = np.column_stack(cols["refl"]) if header.point_count else np.empty((0, 3), np.float32)
    try:
        return MultispectralCloud(cols["xyz"], refl, cols.get("labels"), cols.get("z_norm"), provenance)
    except CloudError as e:
        raise CloudFormatError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    ratio_train: Fraction = Fraction(4, 5)
    seed: int = 0
    unit: str = "per_plot"

    def __post_init__(self):
        ratio = Fraction(self.ratio_train).limit_denominator(10**6)
        if not 0 < ratio < 1:
            raise ValueError(f"ratio_train must lie in (0, 1), got {self.ratio_train}")
        if self.unit not in ("per_point", "per_plot"):
            raise ValueError(f"unit must be 'per_point' or 'per_plot', got {self.unit!r}")
        object.__setattr__(self, "ratio_train", ratio)


def _round_half_up(q: Fraction) -> int:
    return int((q + Fraction(1, 2)).__floor__())


def split_train_test(clouds: Sequence[MultispectralCloud], spec: SplitSpec = SplitSpec()):
    """Split labeled clouds into (train, test) lists of clouds.

    ``per_plot`` keeps every cloud whole and sends round(ratio * n_clouds) of
    them (at least one, at most n - 1) to training, chosen by a seeded shuffle.
    ``per_point`` shuffles the pooled points and returns, for each input cloud,
    its training and test subsets in their original point order.
    """
    clouds = list(clouds)
    if not clouds:
        raise ValueError("split needs at least one cloud")
    rng = np.random.default_rng(spec.seed)
    if spec.unit == "per_plot":
        if len(clouds) < 2:
            raise ValueError("per_plot split needs at least two clouds")
        n_train = min(max(_round_half_up(spec.ratio_train * len(clouds)), 1), len(clouds) - 1)
        order = rng.permutation(len(clouds))
        train_ids = sorted(order[:n_train].tolist())
        test_ids = sorted(order[n_train:].tolist())
        return [clouds[i] for i in train_ids], [clouds[i] for i in test_ids]

    sizes = [len(c) for c in clouds]
    total = sum(sizes)
    n_train = _round_half_up(spec.ratio_train * total)
    in_train = np.zeros(total, dtype=bool)
    in_train[rng.permutation(total)[:n_train]] = True
    train, test = [], []
    start = 0
    for cloud, size in zip(clouds, sizes):
        mask = in_train[start:start + size]
        start += size
        if mask.any():
            train.append(cloud.subset(np.flatnonzero(mask)))
        if (~mask).any():
            test.append(cloud.subset(np.flatnonzero(~mask)))
    return train, test


def tile_cloud(cloud: MultispectralCloud, n_tiles: int, axis: int = 0) -> list:
    """Cut a cloud into ``n_tiles`` strips of equal width along one axis.

    Used to turn one synthetic scene into several plots for a per-plot split.
    """
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    coord = cloud.xyz[:, axis]
    lo, hi = coord.min(), coord.max()
    edges = lo + (hi - lo) * np.arange(1, n_tiles) / n_tiles
    tile = np.searchsorted(edges, coord, side="right")
    out = []
    for t in range(n_tiles):
        part = cloud.subset(np.flatnonzero(tile == t))
        part = part.replace(provenance={**cloud.provenance, "tile": f"{t}/{n_tiles}"})
        out.append(part)
    return out
