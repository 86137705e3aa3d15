"""Geo-tagged descriptor index, exact top-k search, recall@k and file formats.

Binary layouts (all little-endian):

Index file::

    b"CVPRIDX1" | u32 version=1 | u32 count | u32 dim | u8 geo mode (0 planar, 1 spherical)
    per record: u16 id length | id UTF-8 | dim x f32 descriptor | 2 x f64 geo

Model checkpoint::

    b"CVPRMDL1" | u32 version=1 | u32 section count
    per section: u16 name length | name UTF-8 | u32 rank | rank x u32 dims | f64 payload

Manifest: CSV with header ``id,path,lat,lon,mode``; ``path`` is relative
to the manifest's directory. In planar mode ``lat`` and ``lon`` hold x and
y in metres.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
INDEX_MAGIC = b"CVPRIDX1"
MODEL_MAGIC = b"CVPRMDL1"
MODES = ("planar", "spherical")
MANIFEST_FIELDS = ("id", "path", "lat", "lon", "mode")


@dataclass(frozen=True)
class GeoTag:
    a: float  # latitude in degrees, or x in metres
    b: float  # longitude in degrees, or y in metres
    mode: str = "planar"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown geo mode {self.mode!r}")
        if self.mode == "spherical" and not (-90 <= self.a <= 90 and -180 <= self.b <= 180):
            raise ValueError(f"latitude/longitude out of range: {self.a}, {self.b}")


def geo_distance(a: GeoTag, b: GeoTag) -> float:
    """Metres between two tags: Euclidean for planar, haversine for spherical."""
    if a.mode != b.mode:
        raise ValueError(f"cannot compare {a.mode} and {b.mode} geotags")
    return float(geo_distances(np.array([[a.a, a.b]]), np.array([[b.a, b.b]]), a.mode)[0, 0])


def geo_distances(x: np.ndarray, y: np.ndarray, mode: str = "planar") -> np.ndarray:
    """Pairwise distance matrix between ``n x 2`` and ``m x 2`` coordinate arrays."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    if mode == "planar":
        diff = x[:, None, :] - y[None, :, :]
        return np.sqrt((diff**2).sum(-1))
    if mode != "spherical":
        raise ValueError(f"unknown geo mode {mode!r}")
    lat1, lon1 = np.radians(x[:, None, 0]), np.radians(x[:, None, 1])
    lat2, lon2 = np.radians(y[None, :, 0]), np.radians(y[None, :, 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass
class DescriptorIndex:
    """In-memory set of (id, unit descriptor, geotag) records."""

    ids: list[str]
    descriptors: np.ndarray  # n x dim
    geo: np.ndarray  # n x 2
    mode: str = "planar"
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors)
        self.geo = np.asarray(self.geo, dtype=np.float64).reshape(-1, 2)
        if self.descriptors.ndim != 2 or len(self.ids) != len(self.descriptors) or len(self.geo) != len(self.ids):
            raise ValueError("ids, descriptors and geotags must have matching lengths")
        if self.mode not in MODES:
            raise ValueError(f"unknown geo mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def empty(cls, dim: int, mode: str = "planar") -> "DescriptorIndex":
        return cls([], np.zeros((0, dim), dtype=np.float32), np.zeros((0, 2)), mode)

    def sorted(self) -> "DescriptorIndex":
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        return DescriptorIndex(
            [self.ids[i] for i in order], self.descriptors[order], self.geo[order], self.mode, list(self.skipped)
        )

    def geotag(self, i: int) -> GeoTag:
        return GeoTag(float(self.geo[i, 0]), float(self.geo[i, 1]), self.mode)


def ranking(index: DescriptorIndex, descriptor) -> tuple[np.ndarray, np.ndarray]:
    """Full ranking of the index: (order, similarities), descending inner product, ties by id."""
    q = np.asarray(descriptor, dtype=np.float64)
    sims = index.descriptors.astype(np.float64) @ q
    ids = np.array(index.ids, dtype=object)
    order = np.lexsort((ids, -sims)) if len(ids) else np.zeros(0, dtype=int)
    return order, sims[order]


def query_topk(index: DescriptorIndex, descriptor, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; equal to ascending Euclidean on unit vectors."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(index):
        warnings.warn(f"k={k} exceeds index size {len(index)}; returning full ranking", stacklevel=2)
    order, sims = ranking(index, descriptor)
    return [(index.ids[i], float(s)) for i, s in zip(order[:k], sims[:k])]


@dataclass
class EvalReport:
    ks: tuple
    recalls: dict
    query_count: int
    threshold: float
    unreachable: list = field(default_factory=list)

    def lines(self) -> list[str]:
        out = ["k,recall,queries,threshold"]
        for k in self.ks:
            out.append(f"{k},{self.recalls[k]:.6f},{self.query_count},{self.threshold:g}")
        return out


def recall_at_k(
    index: DescriptorIndex,
    query_descriptors,
    query_geo,
    ks=(1, 5, 10),
    threshold: float = 25.0,
    query_ids=None,
) -> EvalReport:
    """Fraction of queries with a gallery item within ``threshold`` metres among the top k.

    Queries without any gallery item inside the threshold count as failures
    and are listed in ``unreachable``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ks = tuple(sorted(int(k) for k in ks))
    q = np.atleast_2d(np.asarray(query_descriptors, dtype=np.float64))
    geo = np.asarray(query_geo, dtype=np.float64).reshape(-1, 2)
    n = len(q)
    if n == 0:
        return EvalReport(ks, {k: 0.0 for k in ks}, 0, threshold)
    dist = geo_distances(geo, index.geo, index.mode)
    close = dist <= threshold
    hits = {k: 0 for k in ks}
    unreachable = []
    for i in range(n):
        if not close[i].any():
            unreachable.append(query_ids[i] if query_ids is not None else i)
            continue
        order, _ = ranking(index, q[i])
        good = close[i][order]
        first = int(np.argmax(good))  # rank of the first correct item
        for k in ks:
            if first < k:
                hits[k] += 1
    if unreachable:
        log.warning("%d queries have no gallery item within %g m", len(unreachable), threshold)
    return EvalReport(ks, {k: hits[k] / n for k in ks}, n, threshold, unreachable)


def save_index(index: DescriptorIndex, path) -> None:
    """Write records sorted by id, descriptors as f32."""
    idx = index.sorted()
    desc = np.ascontiguousarray(idx.descriptors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIIB", 1, len(idx), idx.dim, MODES.index(idx.mode)))
        for i, rid in enumerate(idx.ids):
            raw = rid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(desc[i].tobytes())
            fh.write(np.asarray(idx.geo[i], dtype="<f8").tobytes())


def load_index(path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file")
    version, count, dim, mode = struct.unpack_from("<IIIB", data, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported index version {version}")
    off = 8 + 13
    ids, desc, geo = [], np.zeros((count, dim), dtype=np.float32), np.zeros((count, 2))
    for i in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off : off + n].decode("utf-8"))
        off += n
        desc[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
        geo[i] = np.frombuffer(data, dtype="<f8", count=2, offset=off)
        off += 16
    return DescriptorIndex(ids, desc, geo, MODES[mode])


def save_checkpoint(sections: dict[str, np.ndarray], path) -> None:
    """Named f64 arrays in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", 1, len(sections)))
        for name, arr in sections.items():
            a = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps rank 0
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(math.prod(shape))
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    lat: float
    lon: float
    mode: str = "planar"

    @property
    def geotag(self) -> GeoTag:
        return GeoTag(self.lat, self.lon, self.mode)


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.id, r.path, repr(float(r.lat)), repr(float(r.lon)), r.mode])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
            rows.append(ManifestRow(rec[0], rec[1], float(rec[2]), float(rec[3]), rec[4]))
        return rows


def manifest_geo(rows) -> np.ndarray:
    return np.array([[r.lat, r.lon] for r in rows], dtype=np.float64).reshape(-1, 2)
