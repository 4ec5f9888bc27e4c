"""Salient keypoints, correspondences and RANSAC geometric verification."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .datamodel import FeatureMap
from .errors import UMFError
from .superfeat import MODALITIES, mutual_ratio_matches


@dataclass(frozen=True, eq=False)
class KeypointSet:
    coords: np.ndarray
    descriptors: np.ndarray
    saliency: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        sal = np.asarray(self.saliency, dtype=np.float64).ravel()
        if coords.ndim != 2 or desc.ndim != 2 or not len(coords) == len(desc) == len(sal):
            raise UMFError("shape-mismatch", "coords, descriptors and saliency must have K rows")
        if not np.all(np.isfinite(desc)):
            raise UMFError("features-not-finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "saliency", sal)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def rank(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class SalientConfig:
    delta: float | None = None  # None: use the percentile rule
    percentile: float = 90.0
    max_keypoints: int = 256

    def __post_init__(self):
        if self.delta is not None and self.delta < 0:
            raise UMFError("bad-delta", str(self.delta))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 2.0
    min_sample: int = 4
    seed: int = 0
    adaptive: bool = False
    confidence: float = 0.999
    max_resample: int = 10

    def __post_init__(self):
        if self.iterations < 1 or not self.inlier_threshold > 0:
            raise UMFError("bad-config", "iterations >= 1 and threshold > 0 required")


HOMOGRAPHY_RANSAC = RansacConfig(inlier_threshold=2.0, min_sample=4)
RIGID_RANSAC = RansacConfig(inlier_threshold=1.5, min_sample=3)


def select_salient(fmap: FeatureMap, attn: np.ndarray, cfg: SalientConfig = SalientConfig()) -> KeypointSet:
    """Positions whose mean attention exceeds ``delta`` become keypoints.

    Coordinates are cell centres in map units, ordered like the map axes
    but reversed for 2-D maps so that they read ``(x, y)``.
    """
    dims = fmap.spatial_dims
    maps = np.asarray(attn).reshape(-1, fmap.n_positions)
    saliency = maps.mean(axis=0, dtype=np.float64)
    delta = cfg.delta if cfg.delta is not None else float(np.percentile(saliency, cfg.percentile))
    idx = np.flatnonzero(saliency > delta)
    # highest saliency first, ties by ascending linear index
    idx = idx[np.lexsort((idx, -saliency[idx]))][: cfg.max_keypoints]
    grid = np.stack(np.unravel_index(idx, dims), axis=1).astype(np.float64) + 0.5
    if len(dims) == 2:
        grid = grid[:, ::-1]
    return KeypointSet(grid.reshape(len(idx), len(dims)), fmap.flat()[idx], saliency[idx])


def match_keypoints(a: KeypointSet, b: KeypointSet, tau: float = 0.8, symmetric: bool = True) -> list[tuple[int, int]]:
    if len(a) and len(b) and a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise UMFError("shape-mismatch", "descriptor dims differ")
    return mutual_ratio_matches(a.descriptors, b.descriptors, tau, symmetric)


@dataclass(frozen=True)
class HomographyResult:
    H: np.ndarray | None
    inliers: np.ndarray
    best_sampled: int = 0

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


@dataclass(frozen=True)
class RigidResult:
    R: np.ndarray | None
    t: np.ndarray | None
    inliers: np.ndarray
    best_sampled: int = 0

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _draw_samples(rng: np.random.Generator, n: int, count: int, size: int) -> np.ndarray:
    """``count`` rows of ``size`` distinct indices in ``[0, n)``."""
    idx = rng.integers(0, n, size=(count, size))
    while True:
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), size))


def _tri_area(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    u, v = q - p, r - p
    if p.shape[-1] == 2:
        return 0.5 * np.abs(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0])
    return 0.5 * np.linalg.norm(np.cross(u, v), axis=-1)


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _apply(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Homogeneous image of 2-D points under one or a batch of 3x3 maps."""
    return pts @ T[..., :2].swapaxes(-1, -2) + T[..., 2][..., None, :]


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Batched DLT on ``(..., n, 2)`` normalised points; returns ``(..., 3, 3)``."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(a)
    return vt[..., -1, :].reshape(*a.shape[:-2], 3, 3)


def _project(H: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dehomogenised image of points ``(x, y)`` under ``(b, 3, 3)`` maps; ``(b, n)`` each."""
    h = H.reshape(-1, 9)[:, :, None]
    w = h[:, 6] * x + h[:, 7] * y + h[:, 8]
    return (h[:, 0] * x + h[:, 1] * y + h[:, 2]) / w, (h[:, 3] * x + h[:, 4] * y + h[:, 5]) / w


def symmetric_transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """``sqrt(|H x - x'|^2 + |H^-1 x' - x|^2)`` per correspondence.

    ``H`` may be a single map (result shape ``(n,)``) or a batch ``(b, 3, 3)``.
    """
    single = H.ndim == 2
    H = H.reshape(-1, 3, 3)
    with np.errstate(all="ignore"):
        # a singular map has no inverse transfer, so every point is an outlier
        ok = np.all(np.isfinite(H), axis=(1, 2))
        ok[ok] &= np.abs(np.linalg.det(H[ok])) > 1e-12
        hinv = np.full_like(H, np.nan)
        hinv[ok] = np.linalg.inv(H[ok])
        u, v = _project(H, src[:, 0], src[:, 1])
        x, y = _project(hinv, dst[:, 0], dst[:, 1])
        err = np.sqrt((u - dst[:, 0]) ** 2 + (v - dst[:, 1]) ** 2 + (x - src[:, 0]) ** 2 + (y - src[:, 1]) ** 2)
    err = np.where(np.isfinite(err), err, np.inf)
    return err[0] if single else err


def _dlt_minimal(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homographies through ``(b, 4, 2)`` normalised samples with ``h33 = 1``."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([x, y, o, z, z, z, -u * x, -u * y], axis=-1)
    r2 = np.stack([z, z, z, x, y, o, -v * x, -v * y], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    rhs = np.concatenate([u, v], axis=-1)
    sol = np.full(rhs.shape[:-1] + (9,), np.nan)
    # points are Hartley-normalised, so an absolute determinant floor is meaningful
    ok = np.abs(np.linalg.det(a)) > 1e-12
    if ok.any():
        sol[ok, :8] = np.linalg.solve(a[ok], rhs[ok][..., None])[..., 0]
        sol[ok, 8] = 1.0
    return sol.reshape(*rhs.shape[:-1], 3, 3)


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalised DLT over all given correspondences, scaled so ``H[2, 2] = 1``."""
    ts, td = _hartley(src), _hartley(dst)
    hn = _dlt(_apply(ts, src)[:, :2], _apply(td, dst)[:, :2])
    h = np.linalg.inv(td) @ hn @ ts
    if not abs(h[2, 2]) > 1e-12 or not np.all(np.isfinite(h)):
        return None
    h = h / h[2, 2]
    return h if abs(np.linalg.det(h)) > 1e-12 else None


def _iterations_needed(ratio: float, sample: int, confidence: float, cap: int) -> int:
    if ratio <= 0:
        return cap
    good = ratio**sample
    if good >= 1:
        return 1
    return min(cap, int(np.ceil(np.log(1 - confidence) / np.log(1 - good))))


def _minimal_samples(rng, n: int, k: int, cfg: RansacConfig, degenerate) -> np.ndarray:
    """Index rows for hypotheses, with degenerate rows removed.

    When there are no more distinct ``k``-subsets than the iteration budget,
    every subset is enumerated; otherwise subsets are drawn and degenerate
    ones redrawn up to ``max_resample`` times.
    """
    if comb(n, k) <= cfg.iterations:
        samples = np.array(list(combinations(range(n), k)), dtype=np.intp)
        return samples[~degenerate(samples)]
    samples = _draw_samples(rng, n, cfg.iterations, k)
    for _ in range(cfg.max_resample):
        bad = degenerate(samples)
        if not bad.any():
            return samples
        samples[bad] = _draw_samples(rng, n, int(bad.sum()), k)
    return samples[~degenerate(samples)]


def _select(inl: np.ndarray, n: int, k: int, cfg: RansacConfig) -> int:
    counts = inl.sum(axis=1)
    if cfg.adaptive:
        # stop at the first hypothesis after which the running best suffices
        best_so_far = np.maximum.accumulate(counts)
        need = np.array([_iterations_needed(c / n, k, cfg.confidence, cfg.iterations) for c in best_so_far])
        stop = np.flatnonzero(np.arange(1, len(counts) + 1) >= need)
        if len(stop):
            counts = counts[: stop[0] + 1]
    return int(np.argmax(counts))


def _refine(fit, residuals, model, inliers, threshold: float, min_n: int, rounds: int = 10):
    """Refit on the consensus set and recount until the set stops changing.

    A loose threshold lets a model tilted by one outlier keep every true
    inlier too, so the sampled winner can hold one point more than the
    true model; the least-squares refit recovers the latter even though
    its count is lower. The refit stands unless it fails or keeps fewer
    than ``min_n`` points.
    """
    for _ in range(rounds):
        if inliers.sum() < min_n:
            break
        refit = fit(inliers)
        if refit is None:
            break
        again = residuals(refit) < threshold
        if again.sum() < min_n:
            break
        model, done, inliers = refit, np.array_equal(again, inliers), again
        if done:
            break
    return model, inliers


def estimate_homography_ransac(src, dst, cfg: RansacConfig = HOMOGRAPHY_RANSAC, rng=None) -> HomographyResult:
    """RANSAC over 4-point samples with normalised DLT and symmetric transfer error.

    The best hypothesis is then refined on its consensus set; the reported
    inliers are those of the final model.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        return HomographyResult(None, np.zeros(n, dtype=bool))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ts, td = _hartley(src), _hartley(dst)
    sn, dn = _apply(ts, src)[:, :2], _apply(td, dst)[:, :2]

    samples = _minimal_samples(rng, n, 4, cfg, lambda s: _degenerate_2d(sn[s]) | _degenerate_2d(dn[s]))
    if not len(samples):
        raise UMFError("degenerate-geometry", "every sample is (near-)collinear")
    hs = np.linalg.inv(td) @ _dlt_minimal(sn[samples], dn[samples]) @ ts
    with np.errstate(all="ignore"):
        hs = hs / hs[:, 2:3, 2:3]
        ok = np.all(np.isfinite(hs), axis=(1, 2))
        ok[ok] &= np.abs(np.linalg.det(hs[ok])) > 1e-12
    if not ok.any():
        raise UMFError("degenerate-geometry", "no sample produced a finite homography")
    hs = hs[ok]
    inl = symmetric_transfer_error(hs, src, dst) < cfg.inlier_threshold
    best = _select(inl, n, 4, cfg)
    h_best, in_best = _refine(
        lambda m: fit_homography(src[m], dst[m]),
        lambda h: symmetric_transfer_error(h, src, dst),
        hs[best], inl[best], cfg.inlier_threshold, 4,
    )
    return HomographyResult(h_best / h_best[2, 2], in_best, int(inl.sum(axis=1).max()))


def _degenerate_2d(pts: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """True where any three of the four sample points are (near-)collinear."""
    a, b, c, d = (pts[:, i] for i in range(4))
    areas = np.stack([_tri_area(a, b, c), _tri_area(a, b, d), _tri_area(a, c, d), _tri_area(b, c, d)])
    return areas.min(axis=0) < eps


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``dst ~ R src + t`` (batched)."""
    cs, cd = src.mean(axis=-2, keepdims=True), dst.mean(axis=-2, keepdims=True)
    h = (src - cs).swapaxes(-1, -2) @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    v, ut = vt.swapaxes(-1, -2), u.swapaxes(-1, -2)
    fix = np.broadcast_to(np.eye(3), h.shape).copy()
    fix[..., 2, 2] = np.where(np.linalg.det(v @ ut) < 0, -1.0, 1.0)
    r = v @ fix @ ut
    t = cd[..., 0, :] - (r @ cs.swapaxes(-1, -2))[..., 0]
    return r, t


def _rigid_residuals(r: np.ndarray, t: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    moved = src @ r.swapaxes(-1, -2) + t[..., None, :]
    return np.linalg.norm(moved - dst, axis=-1)


def estimate_rigid_ransac(src, dst, cfg: RansacConfig = RIGID_RANSAC, rng=None) -> RigidResult:
    """RANSAC over 3-point samples with SVD alignment; collinear samples are redrawn.

    If every sample stays collinear the rotation is unobservable and no
    model is returned.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 3:
        return RigidResult(None, None, np.zeros(n, dtype=bool))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    scale = max(float(np.ptp(src, axis=0).max()), 1e-12)
    eps = 1e-9 * scale**2

    def collinear(s):
        p = src[s]
        return _tri_area(p[:, 0], p[:, 1], p[:, 2]) < eps

    samples = _minimal_samples(rng, n, 3, cfg, collinear)
    if not len(samples):
        return RigidResult(None, None, np.zeros(n, dtype=bool))
    rs, ts = kabsch(src[samples], dst[samples])
    inl = _rigid_residuals(rs, ts, src, dst) < cfg.inlier_threshold
    best = _select(inl, n, 3, cfg)
    (r_best, t_best), in_best = _refine(
        lambda m: kabsch(src[m], dst[m]),
        lambda rt: _rigid_residuals(*rt, src, dst),
        (rs[best], ts[best]), inl[best], cfg.inlier_threshold, 3,
    )
    return RigidResult(r_best, t_best, in_best, int(inl.sum(axis=1).max()))


def ransac_rerank_score(
    query: dict,
    candidate: dict,
    tau: float = 0.8,
    homography: RansacConfig = HOMOGRAPHY_RANSAC,
    rigid: RansacConfig = RIGID_RANSAC,
    candidate_id: int = 0,
) -> float:
    """Inliers of the image homography plus inliers of the voxel rigid fit.

    ``query`` / ``candidate`` map modality to :class:`KeypointSet` (or
    ``None``). Each estimation draws from its own stream keyed by
    ``(seed, candidate_id, modality)``.
    """
    present = False
    score = 0
    for m_idx, m in enumerate(MODALITIES):
        qk, ck = query.get(m), candidate.get(m)
        if qk is None or ck is None:
            continue
        present = True
        pairs = match_keypoints(qk, ck, tau)
        if not pairs:
            continue
        i, j = np.array(pairs).T
        cfg = homography if m == "vision" else rigid
        rng = np.random.default_rng([cfg.seed, candidate_id, m_idx])
        try:
            if m == "vision":
                res = estimate_homography_ransac(qk.coords[i], ck.coords[j], cfg, rng)
            else:
                res = estimate_rigid_ransac(qk.coords[i], ck.coords[j], cfg, rng)
        except UMFError:
            continue
        score += res.n_inliers
    if not present:
        raise UMFError("no-local-features", "no modality with keypoints on both sides")
    return float(score)
