"""On-disk formats: PPM images, XYZ clouds, place database and binary artifacts.

All binary formats are little-endian. Readers raise ``UMFError`` with code
``"bad-file"`` naming the offending path when content is malformed.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .datamodel import Image, PlaceRecord, PointCloud
from .errors import UMFError
from .geoverify import KeypointSet
from .retrieval import LEAF_BIT, DescriptorIndex, KDTree, index_from_arrays
from .superfeat import MODALITIES, SuperFeatureSet

DESCRIPTOR_VERSION = 1
DB_HEADER = ["id", "x", "y", "z", "image_path", "cloud_path"]


def _bad(path, why: str) -> UMFError:
    return UMFError("bad-file", f"{path}: {why}")


class _Reader:
    def __init__(self, path):
        self.path = path
        try:
            self.buf = Path(path).read_bytes()
        except FileNotFoundError:
            raise UMFError("missing-file", str(path)) from None
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise _bad(self.path, "truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def magic(self, expected: bytes):
        if self.take(len(expected)) != expected:
            raise _bad(self.path, f"expected magic {expected.decode()}")

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def done(self):
        if self.remaining:
            raise _bad(self.path, f"{self.remaining} trailing bytes")


def _le(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


# images


def write_ppm(path, img: Image):
    data = np.round(img.data * 255).astype(np.uint8)
    if img.channels != 3:
        raise UMFError("shape-mismatch", "PPM needs 3 channels")
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_ppm(path) -> Image:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise UMFError("missing-file", str(path)) from None
    fields = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace and comments
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise _bad(path, "truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace before raster
    if fields[0] != b"P6":
        raise _bad(path, "not a binary PPM (P6)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise _bad(path, "non-numeric header field") from None
    if maxval != 255 or width <= 0 or height <= 0:
        raise _bad(path, "need positive size and maxval 255")
    body = raw[pos:]
    if len(body) != width * height * 3:
        raise _bad(path, f"raster has {len(body)} bytes, expected {width * height * 3}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Image(data / 255.0)


# point clouds


def write_xyz(path, cloud: PointCloud):
    with open(path, "w", newline="\n") as f:
        # repr of a Python float round-trips exactly
        f.writelines(f"{x!r} {y!r} {z!r}\n" for x, y, z in cloud.points.tolist())


def read_xyz(path) -> PointCloud:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise UMFError("missing-file", str(path)) from None
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise _bad(path, f"line {n}: expected 3 values")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise _bad(path, f"line {n}: not a number") from None
    try:
        return PointCloud(np.array(rows).reshape(-1, 3))
    except UMFError as e:
        raise _bad(path, e.code) from None


# place database


def write_placedb(path, records):
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(DB_HEADER)
        for r in records:
            out.writerow([r.id, *(repr(float(v)) for v in r.position), r.image_path or "", r.cloud_path or ""])


def read_placedb(path) -> list[PlaceRecord]:
    """Records with paths resolved relative to the database file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise UMFError("missing-file", str(path)) from None
    records = []
    for n, row in enumerate(csv.reader(lines), 1):
        if not row or row == DB_HEADER:
            continue
        if len(row) != 6:
            raise _bad(path, f"line {n}: expected 6 fields")
        try:
            rid = int(row[0])
            pos = tuple(float(v) for v in row[1:4])
        except ValueError:
            raise _bad(path, f"line {n}: bad id or position") from None
        img = path.parent / row[4] if row[4] else None
        cloud = path.parent / row[5] if row[5] else None
        records.append(PlaceRecord(rid, pos, image_path=img, cloud_path=cloud))
    return records


# descriptor index


def write_descriptors(path, index: DescriptorIndex):
    count, dim = index.descriptors.shape
    head = b"UMFD" + struct.pack("<HII", DESCRIPTOR_VERSION, count, dim)
    Path(path).write_bytes(head + _le(index.descriptors, "f4") + _le(index.ids, "u8"))


def read_descriptors(path) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(path)
    r.magic(b"UMFD")
    version, count, dim = r.unpack("HII")
    if version != DESCRIPTOR_VERSION:
        raise _bad(path, f"unsupported version {version}")
    desc = r.array("f4", count * dim).reshape(count, dim)
    ids = r.array("u8", count)
    r.done()
    return desc, ids


def write_tree(path, tree: KDTree):
    """Node array (dim u8, split f32, left u32, right u32) then slot order."""
    n = len(tree)
    rec = np.zeros(n, dtype=[("dim", "<u1"), ("split", "<f4"), ("left", "<u4"), ("right", "<u4")])
    rec["dim"], rec["split"], rec["left"], rec["right"] = tree.dim, tree.split, tree.left, tree.right
    head = b"UMFT" + struct.pack("<II", n, len(tree.order))
    Path(path).write_bytes(head + rec.tobytes() + _le(tree.order, "u4"))


def read_tree(path) -> KDTree:
    r = _Reader(path)
    r.magic(b"UMFT")
    n, count = r.unpack("II")
    dt = np.dtype([("dim", "<u1"), ("split", "<f4"), ("left", "<u4"), ("right", "<u4")])
    rec = np.frombuffer(r.take(dt.itemsize * n), dtype=dt)
    order = r.array("u4", count)
    r.done()
    internal = (rec["left"] & LEAF_BIT) == 0
    if np.any(rec["left"][internal] >= n) or np.any(rec["right"][internal] >= n):
        raise _bad(path, "child offset out of range")
    if np.any(rec["right"][~internal] > count):
        raise _bad(path, "leaf range out of range")
    return KDTree(rec["dim"].copy(), rec["split"].astype(np.float32), rec["left"].astype(np.uint32),
                  rec["right"].astype(np.uint32), order.astype(np.uint32))


def write_index(stem, index: DescriptorIndex):
    stem = Path(stem)
    write_descriptors(stem.with_suffix(".umfd"), index)
    write_tree(stem.with_suffix(".umft"), index.tree)


def read_index(stem) -> DescriptorIndex:
    stem = Path(stem)
    desc, ids = read_descriptors(stem.with_suffix(".umfd"))
    tree_path = stem.with_suffix(".umft")
    tree = read_tree(tree_path) if tree_path.exists() else None
    if tree is not None and len(tree.order) != len(ids):
        raise _bad(tree_path, "tree does not match descriptor count")
    return index_from_arrays(desc, ids, tree)


# local features


def _modality_code(modality: str) -> int:
    return MODALITIES.index(modality)


def _modality_name(code: int, path) -> str:
    if code >= len(MODALITIES):
        raise _bad(path, f"unknown modality {code}")
    return MODALITIES[code]


SPATIAL_DIMS = {"vision": (56, 56), "lidar": (50, 50, 50)}


def write_superfeatures(path, sf: SuperFeatureSet):
    """Attention maps follow the features; a stripped set writes none."""
    n, f = sf.features.shape
    body = _le(sf.features, "f4")
    if sf.attention is not None:
        body += _le(sf.attention, "f4")
    Path(path).write_bytes(b"UMFS" + struct.pack("<BHH", _modality_code(sf.modality), n, f) + body)


def read_superfeatures(path, spatial_dims: tuple[int, ...] | None = None) -> SuperFeatureSet:
    """The map size comes from ``spatial_dims`` (default: pipeline map size)."""
    r = _Reader(path)
    r.magic(b"UMFS")
    code, n, f = r.unpack("BHH")
    modality = _modality_name(code, path)
    feats = r.array("f4", n * f).reshape(n, f)
    dims = tuple(spatial_dims or SPATIAL_DIMS[modality])
    attn = None
    if r.remaining:
        p = int(np.prod(dims))
        attn = r.array("f4", n * p).reshape(n, p)
    r.done()
    return SuperFeatureSet(feats, attn, dims, modality)


def write_keypoints(path, kp: KeypointSet, modality: str):
    k, rank = kp.coords.shape if len(kp) else (0, kp.coords.shape[1] if kp.coords.ndim == 2 else 0)
    f = kp.descriptors.shape[1] if kp.descriptors.ndim == 2 else 0
    out = b"UMFK" + struct.pack("<BIB", _modality_code(modality), k, rank) + _le(kp.coords, "f4")
    out += struct.pack("<H", f) + _le(kp.descriptors, "f4") + _le(kp.saliency, "f4")
    Path(path).write_bytes(out)


def read_keypoints(path) -> tuple[str, KeypointSet]:
    r = _Reader(path)
    r.magic(b"UMFK")
    code, k, rank = r.unpack("BIB")
    modality = _modality_name(code, path)
    coords = r.array("f4", k * rank).reshape(k, rank)
    f = r.unpack("H")
    desc = r.array("f4", k * f).reshape(k, f)
    sal = r.array("f4", k)
    r.done()
    return modality, KeypointSet(coords, desc, sal)
