"""Forward-only vision and LiDAR encoders plus attention fusion.

Weights are Glorot-uniform draws from per-layer PRNG streams keyed by
``(seed, layer name)``, so every forward pass is a pure function of the
input and the seed. Biases are zero unless ``bias_scale`` is set.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from numpy.lib.stride_tricks import sliding_window_view

from .datamodel import (
    DESCRIPTOR_DIM,
    GRID_DIMS,
    IMAGE_SIZE,
    FeatureMap,
    GlobalDescriptor,
    Image,
    VoxelGrid,
)
from .errors import UMFError


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 42
    image_size: int = IMAGE_SIZE
    grid_dims: tuple[int, int, int] = GRID_DIMS
    vision_stem: int = 4
    vision_channels: tuple[int, int] = (32, 64)
    vision_dim: int = 128
    lidar_channels: int = 16
    lidar_dim: int = 32
    vision_tokens: tuple[int, int] = (14, 14)
    lidar_tokens: tuple[int, int, int] = (10, 10, 10)
    model_dim: int = 96
    heads: int = 4
    rounds: int = 2
    descriptor_dim: int = DESCRIPTOR_DIM
    bias_scale: float = 0.0
    # Small initial templates let the attended content, not the template
    # itself, dominate each Super-feature.
    lit_template_scale: float = 0.02
    dtype: str = "float32"

    @property
    def vision_map_size(self) -> int:
        return self.image_size // self.vision_stem


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def glorot(seed: int, name: str, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return _stream(seed, name).uniform(-a, a, size=tuple(shape))


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> AttentionWeights:
        eye = np.eye(dim)
        return cls(eye, eye, eye, eye)

    @classmethod
    def seeded(cls, seed: int, name: str, dim: int) -> AttentionWeights:
        return cls(*(glorot(seed, f"{name}.{p}", (dim, dim), dim, dim) for p in ("q", "k", "v", "o")))


@dataclass(frozen=True)
class LitWeights:
    """Key/value/output projections of one modality's iterative attention."""

    seed: int
    modality: str
    dim: int
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    template_scale: float = 1.0

    def templates(self, n: int) -> np.ndarray:
        # Row i is the same for every n: uniform draws fill row-major.
        a = self.template_scale * np.sqrt(3.0 / self.dim)
        return _stream(self.seed, f"lit.{self.modality}.templates").uniform(-a, a, size=(n, self.dim))


@dataclass(frozen=True)
class EncoderWeights:
    config: EncoderConfig
    convs: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)
    proj_vision: np.ndarray = field(repr=False)
    proj_lidar: np.ndarray = field(repr=False)
    rounds: tuple[dict[str, AttentionWeights], ...] = field(repr=False)
    head: np.ndarray = field(repr=False)
    lit: dict[str, LitWeights] = field(repr=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @classmethod
    def build(cls, config: EncoderConfig | None = None, **overrides) -> EncoderWeights:
        cfg = config or EncoderConfig()
        if overrides:
            cfg = EncoderConfig(**{**cfg.__dict__, **overrides})
        s = cfg.seed
        dt = np.dtype(cfg.dtype)
        c0, c1 = cfg.vision_channels
        k = cfg.vision_stem
        conv_shapes = {
            # name: (cin, kernel dims, cout)
            "vision.stem": (3, (k, k), c0),
            "vision.fine": (c0, (3, 3), c1),
            "vision.coarse": (c1, (3, 3), cfg.vision_dim),
            "vision.lat_fine": (c1, (1, 1), cfg.vision_dim),
            "vision.lat_coarse": (cfg.vision_dim, (1, 1), cfg.vision_dim),
            "lidar.conv1": (1, (3, 3, 3), cfg.lidar_channels),
            "lidar.conv2": (cfg.lidar_channels, (3, 3, 3), cfg.lidar_dim),
            "lidar.lat_fine": (cfg.lidar_channels, (1, 1, 1), cfg.lidar_dim),
            "lidar.lat_coarse": (cfg.lidar_dim, (1, 1, 1), cfg.lidar_dim),
        }
        convs = {}
        for name, (cin, ks, cout) in conv_shapes.items():
            vol = int(np.prod(ks))
            w = glorot(s, name, (cin, *ks, cout), cin * vol, cout * vol).astype(dt)
            if cfg.bias_scale > 0:
                b = _stream(s, name + ".bias").uniform(-cfg.bias_scale, cfg.bias_scale, cout).astype(dt)
            else:
                b = np.zeros(cout, dtype=dt)
            convs[name] = (w, b)
        d = cfg.model_dim
        rounds = tuple(
            {
                part: AttentionWeights.seeded(s, f"fuse.{r}.{part}", d)
                for part in ("self_vision", "self_lidar", "cross_vision", "cross_lidar")
            }
            for r in range(cfg.rounds)
        )
        lit = {}
        for modality, dim in (("vision", cfg.vision_dim), ("lidar", cfg.lidar_dim)):
            wk, wv, wo = (glorot(s, f"lit.{modality}.{p}", (dim, dim), dim, dim) for p in "kvo")
            lit[modality] = LitWeights(s, modality, dim, wk, wv, wo, cfg.lit_template_scale)
        return cls(
            config=cfg,
            convs=convs,
            proj_vision=glorot(s, "fuse.proj_vision", (cfg.vision_dim, d), cfg.vision_dim, d),
            proj_lidar=glorot(s, "fuse.proj_lidar", (cfg.lidar_dim, d), cfg.lidar_dim, d),
            rounds=rounds,
            head=glorot(s, "fuse.head", (2 * d, cfg.descriptor_dim), 2 * d, cfg.descriptor_dim),
            lit=lit,
        )


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, out=x)


def conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, same: bool = True) -> np.ndarray:
    """Correlation over the leading spatial axes of ``x``.

    ``w`` has shape ``(cin, *kernel, cout)``. With ``same`` odd kernels are
    zero-padded by ``k // 2``, so output spatial size is ``ceil(size / stride)``;
    otherwise only full windows are kept.
    """
    ks = w.shape[1:-1]
    nd = len(ks)
    cin, cout = w.shape[0], w.shape[-1]
    if all(k == 1 for k in ks):
        out = x[tuple(slice(None, None, stride) for _ in range(nd))]
        return out @ w.reshape(cin, cout) + b
    pad = [(k // 2, k // 2) if same else (0, 0) for k in ks] + [(0, 0)]
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, ks, axis=tuple(range(nd)))
    win = win[tuple(slice(None, None, stride) for _ in range(nd))]
    out_shape = win.shape[:nd]
    cols = win.reshape(-1, cin * int(np.prod(ks)))
    return (cols @ w.reshape(-1, cout) + b).reshape(*out_shape, cout)


def box2(x: np.ndarray, nd: int) -> np.ndarray:
    """Mean over the forward 2-cell box ``[i, i + 1]`` on the leading ``nd`` axes, zero past the end."""
    for axis in range(nd):
        nxt = np.zeros_like(x)
        src = [slice(None)] * x.ndim
        dst = [slice(None)] * x.ndim
        src[axis], dst[axis] = slice(1, None), slice(0, -1)
        nxt[tuple(dst)] = x[tuple(src)]
        x = (x + nxt) * 0.5
    return x


def downsample2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-2 3x..x3 convolution of the box-filtered, zero-extended map.

    Coarse cell ``c`` reads box cells ``2c - 1 .. 2c + 1``, i.e. fine cells
    ``2c - 1 .. 2c + 2``. The low-pass keeps the coarse level from aliasing:
    without it features collapse under odd-cell translations.
    """
    nd = w.ndim - 2
    blurred = box2(np.pad(x, [(1, 1)] * nd + [(0, 0)] * (x.ndim - nd)), nd)
    return conv(blurred, w, b, stride=2, same=False)


def upsample2(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Separable linear 2x upsampling with cell-centre alignment and edge clamping.

    Coarse cell ``c`` sits at fine coordinate ``2c + 0.5``, matching the
    forward box of :func:`box2`, so fine cell ``2c`` is ``3/4 x[c] + 1/4 x[c - 1]``
    and fine cell ``2c + 1`` is ``3/4 x[c] + 1/4 x[c + 1]``.
    """
    for axis, n in enumerate(shape):
        x = np.moveaxis(x, axis, 0)
        prev = np.concatenate([x[:1], x[:-1]])
        nxt = np.concatenate([x[1:], x[-1:]])
        out = np.empty((2 * len(x), *x.shape[1:]), dtype=x.dtype)
        np.multiply(x, 0.75, out=out[0::2])
        out[0::2] += 0.25 * prev
        np.multiply(x, 0.75, out=out[1::2])
        out[1::2] += 0.25 * nxt
        x = np.moveaxis(out[:n], 0, axis)
    return x


def encode_vision(img: Image, w: EncoderWeights) -> FeatureMap:
    """Two-level pyramid: fine map at stride 4 plus upsampled, anti-aliased stride-8 map."""
    cfg = w.config
    n = cfg.image_size
    if img.data.shape != (n, n, 3):
        raise UMFError("shape-mismatch", f"expected {(n, n, 3)} image, got {img.data.shape}")
    k = cfg.vision_stem
    m = n // k
    x = img.data.astype(cfg.dtype)
    # non-overlapping k x k patches: (m, m, 3, k, k) to match (cin, ky, kx) weights
    patches = x.reshape(m, k, m, k, 3).transpose(0, 2, 4, 1, 3).reshape(m * m, 3 * k * k)
    ws, bs = w.convs["vision.stem"]
    stem = _relu((patches @ ws.reshape(-1, ws.shape[-1]) + bs).reshape(m, m, -1))
    fine = _relu(conv(stem, *w.convs["vision.fine"]))
    coarse = _relu(downsample2(fine, *w.convs["vision.coarse"]))
    out = conv(fine, *w.convs["vision.lat_fine"])
    out += upsample2(conv(coarse, *w.convs["vision.lat_coarse"]), (m, m))
    return FeatureMap(out)


def _lidar_dense(grid: VoxelGrid, w: EncoderWeights) -> np.ndarray:
    x = grid.occupancy.astype(w.config.dtype)[..., None]
    fine = _relu(conv(x, *w.convs["lidar.conv1"]))
    coarse = _relu(downsample2(fine, *w.convs["lidar.conv2"]))
    out = conv(fine, *w.convs["lidar.lat_fine"])
    out += upsample2(conv(coarse, *w.convs["lidar.lat_coarse"]), grid.dims)
    return out


def _window_offsets(padded: Sequence[int], lo: int, hi: int) -> np.ndarray:
    """Flat offsets of the ``[lo, hi]^3`` window in kernel (kx, ky, kz) order."""
    d = np.arange(lo, hi + 1)
    ox, oy, oz = np.meshgrid(d, d, d, indexing="ij")
    return (ox * padded[1] * padded[2] + oy * padded[2] + oz).ravel()


def fold_box(w: np.ndarray) -> np.ndarray:
    """``(cin, 3, 3, 3, cout)`` kernel of :func:`downsample2` as one 4x4x4 kernel.

    Tap ``a`` of the result reads fine cell ``2c - 1 + a`` for coarse cell ``c``.
    """
    for axis in (1, 2, 3):
        after, before = [(0, 0)] * w.ndim, [(0, 0)] * w.ndim
        after[axis], before[axis] = (0, 1), (1, 0)
        w = 0.5 * (np.pad(w, after) + np.pad(w, before))
    return w


def _coarse_support(fine_mask: np.ndarray) -> np.ndarray:
    """Coarse cells whose folded window ``[2c - 1, 2c + 2]^3`` meets ``fine_mask``."""
    m = np.pad(fine_mask, 1)
    for axis, n in enumerate(fine_mask.shape):
        nc = -(-n // 2)
        take = lambda start: m[(slice(None),) * axis + (slice(start, start + 2 * nc, 2),)]
        m = take(0) | take(1) | take(2) | take(3)
    return m


def _lidar_sparse(grid: VoxelGrid, w: EncoderWeights) -> np.ndarray:
    # Valid only with zero biases: features vanish away from occupied voxels,
    # so each convolution is evaluated on the dilated support of its input.
    cfg = w.config
    dims = np.array(grid.dims)
    padded = dims + 2
    stride_p = np.array([padded[1] * padded[2], padded[2], 1])
    occ_p = np.pad(grid.occupancy, 1).astype(cfg.dtype).ravel()

    fine_mask = ndimage.binary_dilation(grid.occupancy, np.ones((3, 3, 3), bool))
    fine_idx = np.argwhere(fine_mask)
    fine_flat = (fine_idx + 1) @ stride_p
    w1, _ = w.convs["lidar.conv1"]
    fine = _relu(occ_p[fine_flat[:, None] + _window_offsets(padded, -1, 1)] @ w1.reshape(27, -1))

    # downsample2 as one 4x4x4 kernel gathered straight from the fine level
    c1 = fine.shape[1]
    fine_p = np.zeros((int(np.prod(padded)), c1), dtype=cfg.dtype)
    fine_p[fine_flat] = fine
    coarse_mask = _coarse_support(fine_mask)
    coarse_idx = np.argwhere(coarse_mask)
    coarse_flat = (2 * coarse_idx + 1) @ stride_p
    w2 = fold_box(w.convs["lidar.conv2"][0]).astype(cfg.dtype)
    w2 = w2.transpose(1, 2, 3, 0, 4).reshape(64 * c1, -1)
    gathered = fine_p[coarse_flat[:, None] + _window_offsets(padded, -1, 2)]
    coarse = _relu(gathered.reshape(len(coarse_idx), 64 * c1) @ w2)

    wlf, _ = w.convs["lidar.lat_fine"]
    wlc, _ = w.convs["lidar.lat_coarse"]
    out = np.zeros((*grid.dims, cfg.lidar_dim), dtype=cfg.dtype)
    if len(coarse_idx):
        # upsample only the support's bounding box; a one-cell zero margin
        # makes the edge clamp inside the grid agree with the full map
        lo = np.maximum(coarse_idx.min(0) - 1, 0)
        hi = np.minimum(coarse_idx.max(0) + 2, coarse_mask.shape)
        lat = np.zeros((*(hi - lo), cfg.lidar_dim), dtype=cfg.dtype)
        lat[tuple((coarse_idx - lo).T)] = coarse @ wlc.reshape(cfg.lidar_dim, -1)
        stop = np.minimum(2 * hi, dims)
        out[tuple(slice(a, b) for a, b in zip(2 * lo, stop))] = upsample2(lat, stop - 2 * lo)
    out[tuple(fine_idx.T)] += fine @ wlf.reshape(c1, -1)
    return out


def encode_lidar(grid: VoxelGrid, w: EncoderWeights, dense: bool = False) -> FeatureMap:
    """Same two-level pyramid over the binary occupancy volume.

    The default path skips empty space; ``dense=True`` forces the plain
    convolution route (also taken whenever biases are non-zero).
    """
    cfg = w.config
    if grid.dims != tuple(cfg.grid_dims):
        raise UMFError("shape-mismatch", f"expected {cfg.grid_dims} grid, got {grid.dims}")
    biased = any(np.any(b) for name, (_, b) in w.convs.items() if name.startswith("lidar."))
    if dense or biased:
        return FeatureMap(_lidar_dense(grid, w))
    return FeatureMap(_lidar_sparse(grid, w))


def positional_encoding(positions: np.ndarray, channels: int) -> np.ndarray:
    """Sine/cosine encoding of integer grid positions, ``channels / rank`` per axis.

    Within each axis block, channel ``2i`` is ``sin(p * w_i)`` and ``2i + 1``
    is ``cos(p * w_i)`` with ``w_i = 10000 ** (-2i / block)``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 1:
        positions = positions[:, None]
    rank = positions.shape[1]
    if channels % (2 * rank):
        raise UMFError("divisibility", f"channels {channels} not divisible by 2*rank={2 * rank}")
    block = channels // rank
    freqs = 10000.0 ** (-np.arange(0, block, 2) / block)
    out = np.empty((len(positions), channels))
    for axis in range(rank):
        phase = positions[:, axis : axis + 1] * freqs
        out[:, axis * block : (axis + 1) * block : 2] = np.sin(phase)
        out[:, axis * block + 1 : (axis + 1) * block : 2] = np.cos(phase)
    return out


@dataclass(frozen=True, eq=False)
class TokenSet:
    """Tokens with grid positions and an optional positional encoding.

    ``encoding`` (M x C) is added to the attention queries and keys, never
    to the values, so it steers where tokens attend without entering the
    residual stream.
    """

    tokens: np.ndarray
    positions: np.ndarray
    encoding: np.ndarray | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        positions = np.asarray(self.positions)
        if tokens.ndim != 2 or len(tokens) == 0:
            raise UMFError("shape-mismatch", "tokens must be a non-empty M x C matrix")
        if len(positions) != len(tokens):
            raise UMFError("shape-mismatch", "one position per token required")
        if self.encoding is not None and np.shape(self.encoding) != tokens.shape:
            raise UMFError("shape-mismatch", "encoding must match the token matrix")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: np.ndarray) -> TokenSet:
        return TokenSet(tokens, self.positions, self.encoding)

    def encoded(self) -> TokenSet:
        """Same tokens carrying the sine/cosine encoding of their positions."""
        pe = positional_encoding(self.positions, self.channels).astype(self.tokens.dtype)
        return TokenSet(self.tokens, self.positions, pe)

    def keyed(self) -> np.ndarray:
        return self.tokens if self.encoding is None else self.tokens + self.encoding


def pool_tokens(fmap: FeatureMap, target: Sequence[int]) -> TokenSet:
    """Block-average the map down to ``target`` spatial dims."""
    dims = fmap.spatial_dims
    target = tuple(int(t) for t in target)
    if len(target) != len(dims) or any(t <= 0 or d % t for d, t in zip(dims, target)):
        raise UMFError("divisibility", f"target {target} does not divide map dims {dims}")
    shape = []
    for d, t in zip(dims, target):
        shape += [t, d // t]
    x = fmap.data.reshape(*shape, fmap.channels)
    pooled = x.mean(axis=tuple(range(1, 2 * len(dims), 2)))
    grids = np.meshgrid(*[np.arange(t) for t in target], indexing="ij")
    positions = np.stack([g.ravel() for g in grids], axis=1)
    return TokenSet(pooled.reshape(-1, fmap.channels), positions)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.subtract(scores, scores.max(axis=axis, keepdims=True))
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def attention_block(
    queries: TokenSet,
    keys_values: TokenSet,
    w: AttentionWeights,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with a residual connection.

    Self-attention is the case ``queries is keys_values``. Positional
    encodings carried by the token sets enter queries and keys only. With
    ``return_weights`` the per-head attention rows ``(heads, Mq, Mk)`` are
    returned as well.
    """
    c = queries.channels
    if keys_values.channels != c or w.wq.shape != (c, c):
        raise UMFError("shape-mismatch", "query, key and projection dims must agree")
    if heads <= 0 or c % heads:
        raise UMFError("shape-mismatch", f"{c} channels not divisible by {heads} heads")
    dh = c // heads
    xq, xkv = queries.tokens, keys_values.tokens
    q = queries.keyed() @ (w.wq / np.sqrt(dh)).astype(xq.dtype)
    k = keys_values.keyed() @ w.wk.astype(xkv.dtype)
    v = xkv @ w.wv.astype(xkv.dtype)
    mixed = np.empty_like(q)
    att = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh = np.ascontiguousarray(q[:, cols]), np.ascontiguousarray(k[:, cols])
        e = qh @ kh.T
        # softmax is shift-invariant; skip the row-max shift when the
        # Cauchy-Schwarz bound on the scores rules out overflow
        bound = np.sqrt(np.einsum("ij,ij->i", qh, qh).max() * np.einsum("ij,ij->i", kh, kh).max())
        if not bound < 60.0:
            e -= e.max(axis=1, keepdims=True)
        np.exp(e, out=e)
        z = e.sum(axis=1, keepdims=True)
        # normalising after the value product touches Mq x dh entries, not Mq x Mk
        mixed[:, cols] = (e @ v[:, cols]) / z
        if return_weights:
            att.append(e / z)
    out = queries.with_tokens(xq + mixed @ w.wo.astype(xq.dtype))
    return (out, np.stack(att)) if return_weights else out


def fuse_global(fv: FeatureMap, fl: FeatureMap, w: EncoderWeights) -> GlobalDescriptor:
    """Pool, position-encode, interleave self/cross attention, pool, project.

    Positional encodings are attached to queries and keys of every
    attention block; the mean-pooled tokens therefore carry content only.
    """
    cfg = w.config
    m = cfg.vision_map_size
    if fv.data.shape != (m, m, cfg.vision_dim) or fl.data.shape != (*cfg.grid_dims, cfg.lidar_dim):
        raise UMFError("shape-mismatch", "feature maps do not match the encoder configuration")
    d = cfg.model_dim
    tv = pool_tokens(fv, cfg.vision_tokens)
    tl = pool_tokens(fl, cfg.lidar_tokens)
    dt = np.dtype(cfg.dtype)
    xv = tv.with_tokens((tv.tokens @ w.proj_vision).astype(dt)).encoded()
    xl = tl.with_tokens((tl.tokens @ w.proj_lidar).astype(dt)).encoded()
    for layer in w.rounds:
        xv = attention_block(xv, xv, layer["self_vision"], cfg.heads)
        xl = attention_block(xl, xl, layer["self_lidar"], cfg.heads)
        xv, xl = (
            attention_block(xv, xl, layer["cross_vision"], cfg.heads),
            attention_block(xl, xv, layer["cross_lidar"], cfg.heads),
        )
    pooled = np.concatenate([xv.tokens.mean(axis=0), xl.tokens.mean(axis=0)])
    g = pooled.astype(np.float64) @ w.head
    norm = np.linalg.norm(g)
    if not norm > 1e-12:
        raise UMFError("degenerate-descriptor", "fused vector has zero norm")
    return GlobalDescriptor(g / norm)
