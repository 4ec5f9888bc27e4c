"""Core value types shared across the pipeline.

Layout conventions: images are channel-last ``(H, W, C)``; voxel arrays are
indexed ``[x, y, z]`` and flattened x-fastest (Fortran order) on disk;
feature maps are spatial dims followed by one channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UMFError

IMAGE_SIZE = 224
MAX_POINTS = 4096
GRID_DIMS = (50, 50, 50)
DESCRIPTOR_DIM = 256
UNIT_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise UMFError("shape-mismatch", f"image must be HxWxC, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise UMFError("image-not-finite")
        if data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise UMFError("image-out-of-range", "pixel values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 3:
            raise UMFError("too-few-points", f"need >= 3 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise UMFError("cloud-not-finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def downsample(self, max_points: int = MAX_POINTS, seed: int = 0) -> PointCloud:
        """Random subset of at most ``max_points`` points, original order kept."""
        if len(self.points) <= max_points:
            return self
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(self.points), size=max_points, replace=False))
        return PointCloud(self.points[keep])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    voxel_size: float
    occupancy: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise UMFError("bad-dims", f"dims must be 3 positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise UMFError("bad-voxel-size", str(self.voxel_size))
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.size != dims[0] * dims[1] * dims[2]:
            raise UMFError("shape-mismatch", f"occupancy size {occ.size} != {dims}")
        occ = occ.reshape(dims, order="F") if occ.ndim == 1 else occ.reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "occupancy", _frozen(occ.copy()))

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape ``dims + (3,)``."""
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def with_occupancy(self, occupancy: np.ndarray) -> VoxelGrid:
        return VoxelGrid(self.dims, self.origin, self.voxel_size, occupancy)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.origin == other.origin
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.occupancy, other.occupancy)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense features with spatial dims first and channels last."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (3, 4):
            raise UMFError("shape-mismatch", f"feature map must be 2-D or 3-D plus channels, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise UMFError("features-not-finite")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def spatial_dims(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def n_positions(self) -> int:
        return int(np.prod(self.spatial_dims))

    def flat(self) -> np.ndarray:
        """Features as ``(positions, channels)`` in C order over spatial dims."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64).ravel()))

    @property
    def dim(self) -> int:
        return self.values.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class PlaceRecord:
    """One database entry.

    ``local_vision`` / ``local_lidar`` hold either loaded
    :class:`umf.features.ModalityFeatures` or an on-disk
    :class:`umf.features.ArtifactRef`; ``None`` marks a missing modality.
    """

    id: int
    position: tuple[float, float, float]
    descriptor: GlobalDescriptor | None = None
    local_vision: object | None = None
    local_lidar: object | None = None
    image_path: Path | None = None
    cloud_path: Path | None = None


@dataclass(frozen=True)
class Candidate:
    id: int
    global_sim: float
    rerank_score: float | None = None


@dataclass(frozen=True)
class CandidateList:
    entries: tuple[Candidate, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [c.id for c in entries]
        if len(set(ids)) != len(ids):
            raise UMFError("duplicate-id", "candidate list contains a repeated id")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.entries]


def voxelize(
    cloud: PointCloud,
    origin: Sequence[float],
    voxel_size: float,
    dims: Sequence[int] = GRID_DIMS,
) -> VoxelGrid:
    """Binary occupancy of ``cloud`` over half-open voxels ``[low, high)``.

    Points outside the grid extent, including those exactly on the maximum
    boundary, are dropped.
    """
    if not voxel_size > 0:
        raise UMFError("bad-voxel-size", str(voxel_size))
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise UMFError("bad-dims", str(dims))
    idx = np.floor((cloud.points - np.asarray(origin, dtype=np.float64)) / voxel_size)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    if not inside.any():
        raise UMFError("empty-grid", "no points inside the grid extent")
    idx = idx[inside].astype(np.intp)
    occ = np.zeros(dims, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(dims, tuple(origin), voxel_size, occ)


def validate(record: PlaceRecord) -> list[str]:
    """Every invariant violated by ``record``; an empty list means ok."""
    violations = []
    try:
        rid = int(record.id)
        if rid != record.id or rid < 0:
            violations.append("id-not-integer")
    except (TypeError, ValueError):
        violations.append("id-not-integer")
    try:
        pos = np.asarray(record.position, dtype=np.float64)
        if pos.shape != (3,):
            violations.append("position-bad-shape")
        elif not np.all(np.isfinite(pos)):
            violations.append("position-not-finite")
    except (TypeError, ValueError):
        violations.append("position-bad-shape")
    desc = record.descriptor
    if desc is None:
        violations.append("descriptor-missing")
    else:
        values = np.asarray(getattr(desc, "values", desc), dtype=np.float64)
        if not np.all(np.isfinite(values)):
            violations.append("descriptor-not-finite")
        elif abs(np.linalg.norm(values) - 1.0) > UNIT_TOL:
            violations.append("descriptor-not-unit")
    return violations
