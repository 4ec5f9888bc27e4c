"""Seeded synthetic multimodal world with perceptual aliasing.

Each place owns a texture signature (drives the camera image) and a
geometry signature (drives the terrain seen by the LiDAR). Aliased places
copy the texture signature of a distant place but keep their own terrain,
so vision alone confuses them while geometry does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import IMAGE_SIZE, MAX_POINTS, Image, PointCloud
from .errors import UMFError

# sensor footprint shared by camera and LiDAR, in metres
EXTENT = 50.0
GRID_ORIGIN = (-25.0, -25.0, -10.0)
VOXEL_SIZE = 1.0

_TEXTURE, _GEOMETRY, _PLACE, _QUERY = 1, 2, 3, 4


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_places: int = 200
    aliasing_fraction: float = 0.2
    spacing: float = 20.0
    jitter: float = 2.0
    query_fraction: float = 0.5
    query_shift: float = 3.0  # max sensor displacement of a query, metres
    image_noise: float = 0.02
    cloud_noise: float = 0.03
    scan_extent: float = 25.0  # side of the square the LiDAR samples, metres
    negative_radius: float = 50.0
    image_size: int = IMAGE_SIZE
    max_points: int = MAX_POINTS

    def __post_init__(self):
        if self.n_places < 10:
            raise UMFError("bad-config", "n_places must be >= 10")
        if not 0 <= self.aliasing_fraction <= 0.5:
            raise UMFError("bad-config", "aliasing_fraction must lie in [0, 0.5]")
        if not 0 < self.query_fraction <= 1:
            raise UMFError("bad-config", "query_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Place:
    id: int
    position: tuple[float, float, float]
    texture: int  # texture signature
    geometry: int  # geometry signature


@dataclass(frozen=True)
class Observation:
    """One sensor reading: ``shift`` is the sensor offset from the place centre."""

    place: int
    position: tuple[float, float, float]
    shift: tuple[float, float]
    image: Image
    cloud: PointCloud


@dataclass(frozen=True)
class World:
    config: WorldConfig
    places: tuple[Place, ...]
    database: tuple[Observation, ...]
    queries: tuple[Observation, ...]

    def aliased_pairs(self) -> list[tuple[int, int]]:
        """(place, place) pairs sharing a texture signature, lower id first."""
        pairs = []
        for a in self.places:
            for b in self.places[a.id + 1 :]:
                if a.texture == b.texture:
                    pairs.append((a.id, b.id))
        return pairs


def _rng(seed: int, kind: int, index: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, kind, index, sub])


def value_noise(lattice: np.ndarray, cell: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smoothstep-interpolated lattice values at continuous coords.

    ``lattice[i, j]`` sits at ``(i * cell, j * cell)``; trailing lattice axes
    (e.g. colour channels) are carried through.
    """
    gx, gy = x / cell, y / cell
    i0 = np.clip(np.floor(gx).astype(int), 0, lattice.shape[0] - 2)
    j0 = np.clip(np.floor(gy).astype(int), 0, lattice.shape[1] - 2)
    fx, fy = gx - i0, gy - j0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    if lattice.ndim > 2:
        sx, sy = sx[..., None], sy[..., None]
    top = lattice[i0, j0] * (1 - sy) + lattice[i0, j0 + 1] * sy
    bottom = lattice[i0 + 1, j0] * (1 - sy) + lattice[i0 + 1, j0 + 1] * sy
    return top * (1 - sx) + bottom * sx


def _interp_matrix(coords: np.ndarray, cell: float, n: int) -> np.ndarray:
    """Rows of smoothstep weights mapping ``n`` lattice nodes to ``coords``."""
    g = coords / cell
    i0 = np.clip(np.floor(g).astype(int), 0, n - 2)
    f = g - i0
    s = f * f * (3 - 2 * f)
    m = np.zeros((len(coords), n))
    rows = np.arange(len(coords))
    m[rows, i0] = 1 - s
    m[rows, i0 + 1] = s
    return m


def _fbm(rng: np.random.Generator, extent: float, cells, amps, x, y, channels: int = 0) -> np.ndarray:
    """Sum of value-noise octaves over ``[0, extent)^2`` at scattered points."""
    out = 0.0
    for cell, amp in zip(cells, amps):
        n = int(np.ceil(extent / cell)) + 2
        shape = (n, n, channels) if channels else (n, n)
        out = out + amp * value_noise(rng.uniform(-1, 1, shape), cell, x, y)
    return out


def _fbm_grid(rng: np.random.Generator, extent: float, cells, amps, r, c, channels: int) -> np.ndarray:
    """Value-noise octaves on the separable grid ``r x c``; same field as :func:`_fbm`."""
    out = 0.0
    for cell, amp in zip(cells, amps):
        n = int(np.ceil(extent / cell)) + 2
        lattice = rng.uniform(-1, 1, (n, n, channels))
        out = out + amp * np.einsum("ai,ijc,bj->abc", _interp_matrix(r, cell, n), lattice, _interp_matrix(c, cell, n), optimize=True)
    return out


# canvas margin lets a shifted sensor see texture beyond the nominal frame
_MARGIN = 0.4


def render_image(texture: int, shift: tuple[float, float], cfg: WorldConfig, noise_rng=None) -> np.ndarray:
    """Texture seen from ``shift`` metres off the place centre, quantised to 1/255."""
    size = cfg.image_size
    px_per_m = size / EXTENT
    canvas = EXTENT * (1 + 2 * _MARGIN) * px_per_m
    rng = _rng(cfg.seed, _TEXTURE, texture)
    base = rng.uniform(0.25, 0.75, 3)
    # row index follows x, column index follows y
    r = np.arange(size) + (_MARGIN * EXTENT + shift[0]) * px_per_m
    c = np.arange(size) + (_MARGIN * EXTENT + shift[1]) * px_per_m
    img = base + _fbm_grid(rng, canvas, (28.0, 14.0, 7.0, 3.5), (0.22, 0.13, 0.08, 0.05), r, c, channels=3)
    if noise_rng is not None and cfg.image_noise > 0:
        img = img + noise_rng.normal(0, cfg.image_noise, img.shape)
    return np.round(np.clip(img, 0, 1) * 255) / 255


def terrain_height(geometry: int, cfg: WorldConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Height field in metres over place-centred coordinates.

    Each geometry signature also draws its own terrain style (relief,
    roughness, boulder density and size), so local shapes differ by place.
    """
    rng = _rng(cfg.seed, _GEOMETRY, geometry)
    relief = rng.uniform(0.3, 1.5)
    rough = rng.uniform(0.2, 1.5)
    span = EXTENT * (1 + 2 * _MARGIN)
    off = _MARGIN * EXTENT + EXTENT / 2
    h = _fbm(rng, span, (12.0, 6.0, 3.0), (4.0 * relief, 2.0 * relief, rough), x + off, y + off)
    # boulders: sharp bumps give the geometry distinctive local structure
    n_rocks = int(rng.integers(6, 40))
    size = rng.uniform(1.0, 3.0)
    centres = rng.uniform(-EXTENT / 2 - 5, EXTENT / 2 + 5, (n_rocks, 2))
    heights = rng.uniform(1.0, 3.0, n_rocks) * size
    radii = rng.uniform(0.7, 1.5, n_rocks) * size
    for (cx, cy), hgt, rad in zip(centres, heights, radii):
        h = h + hgt * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * rad * rad))
    return h


def scan_cloud(geometry: int, shift: tuple[float, float], cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Jittered-grid scan of the terrain in the sensor frame."""
    side = int(np.sqrt(cfg.max_points))
    step = cfg.scan_extent / side
    g = (np.arange(side) + 0.5) * step - cfg.scan_extent / 2
    lx, ly = np.meshgrid(g, g, indexing="ij")
    lx = lx.ravel() + rng.uniform(-step / 2, step / 2, side * side)
    ly = ly.ravel() + rng.uniform(-step / 2, step / 2, side * side)
    z = terrain_height(geometry, cfg, lx + shift[0], ly + shift[1])
    pts = np.stack([lx, ly, z], axis=1)
    if cfg.cloud_noise > 0:
        pts = pts + rng.normal(0, cfg.cloud_noise, pts.shape)
    return pts


def observe(place: Place, shift: tuple[float, float], cfg: WorldConfig, rng: np.random.Generator) -> Observation:
    pos = (place.position[0] + shift[0], place.position[1] + shift[1], place.position[2])
    image = Image(render_image(place.texture, shift, cfg, rng))
    cloud = PointCloud(scan_cloud(place.geometry, shift, cfg, rng))
    return Observation(place.id, pos, (float(shift[0]), float(shift[1])), image, cloud)


def _layout(cfg: WorldConfig) -> list[tuple[float, float, float]]:
    rng = _rng(cfg.seed, _PLACE, 0)
    cols = int(np.ceil(np.sqrt(cfg.n_places)))
    jit = rng.uniform(-cfg.jitter, cfg.jitter, (cfg.n_places, 2))
    return [
        (float((i % cols) * cfg.spacing + jit[i, 0]), float((i // cols) * cfg.spacing + jit[i, 1]), 0.0)
        for i in range(cfg.n_places)
    ]


def _textures(cfg: WorldConfig, positions: np.ndarray) -> list[int]:
    rng = _rng(cfg.seed, _PLACE, 1)
    n = cfg.n_places
    textures = list(range(n))
    n_alias = int(round(cfg.aliasing_fraction * n))
    order = rng.permutation(n)
    aliased, sources = order[:n_alias], order[n_alias:]
    for i in aliased:
        far = sources[np.linalg.norm(positions[sources] - positions[i], axis=1) > cfg.negative_radius]
        if len(far) == 0:
            raise UMFError("bad-config", "world too small to place a distant alias")
        textures[i] = textures[int(rng.choice(far))]
    return textures


def make_places(cfg: WorldConfig) -> tuple[Place, ...]:
    positions = _layout(cfg)
    textures = _textures(cfg, np.asarray(positions))
    return tuple(Place(i, positions[i], textures[i], i) for i in range(cfg.n_places))


def query_places(cfg: WorldConfig) -> np.ndarray:
    rng = _rng(cfg.seed, _QUERY, 0)
    n_q = max(1, int(round(cfg.query_fraction * cfg.n_places)))
    return np.sort(rng.choice(cfg.n_places, n_q, replace=False))


def _query_shift(cfg: WorldConfig, index: int) -> tuple[float, float]:
    rng = _rng(cfg.seed, _QUERY, 1, index)
    r = cfg.query_shift * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return (r * np.cos(a), r * np.sin(a))


def generate_world(cfg: WorldConfig = WorldConfig()) -> World:
    """Database observations at every place plus shifted, noisy queries."""
    places = make_places(cfg)
    database = tuple(observe(p, (0.0, 0.0), cfg, _rng(cfg.seed, _PLACE, 2, p.id)) for p in places)
    queries = tuple(
        observe(places[i], _query_shift(cfg, int(i)), cfg, _rng(cfg.seed, _QUERY, 2, int(i)))
        for i in query_places(cfg)
    )
    return World(cfg, places, database, queries)
