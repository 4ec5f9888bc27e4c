"""Training-side math: masking, occupancy cross-entropy, batch-hard triplets.

Everything here is a pure function of its inputs plus a seed. Losses
return analytic gradients with respect to their direct inputs; the
finite-difference checks at the bottom of the module verify them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datamodel import Image, VoxelGrid
from .errors import UMFError

PROB_EPS = 1e-7

POSITIVE, NEUTRAL, NEGATIVE = 1, 0, -1


@dataclass(frozen=True)
class MaskSpec:
    patch_size: int = 16
    image_ratio: float = 0.6
    # upper edges of the three range groups, metres; groups are [low, high)
    range_groups: tuple[float, float, float] = (15.0, 30.0, np.inf)
    group_ratios: tuple[float, float, float] = (0.7, 0.5, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise UMFError("bad-config", "patch_size must be >= 1")
        ratios = (self.image_ratio, *self.group_ratios)
        if not all(0 <= r <= 1 for r in ratios):
            raise UMFError("bad-config", "mask ratios must lie in [0, 1]")
        if len(self.range_groups) != 3 or len(self.group_ratios) != 3:
            raise UMFError("bad-config", "need three range groups and three ratios")
        if not (0 < self.range_groups[0] < self.range_groups[1] < self.range_groups[2]):
            raise UMFError("bad-config", "range group edges must increase")
        g = self.group_ratios
        if not g[0] > g[1] > g[2]:
            raise UMFError("bad-config", "group ratios must decrease with range")


def _mask_rng(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), kind, int(index)])


def patch_mask(img: Image, spec: MaskSpec = MaskSpec(), index: int = 0) -> tuple[Image, np.ndarray]:
    """Zero whole square patches, each with probability ``image_ratio``.

    Returns the masked image and the ``(H / p, W / p)`` boolean patch mask.
    The draw depends only on ``(spec.seed, index)``.
    """
    p = spec.patch_size
    h, w = img.height, img.width
    if h % p or w % p:
        raise UMFError("divisibility", f"{h}x{w} image not divisible by patch size {p}")
    mask = _mask_rng(spec.seed, 0, index).random((h // p, w // p)) < spec.image_ratio
    pixels = np.repeat(np.repeat(mask, p, axis=0), p, axis=1)
    data = np.where(pixels[..., None], 0.0, img.data)
    return Image(data), mask


def range_groups(grid: VoxelGrid, sensor_origin, spec: MaskSpec = MaskSpec()) -> np.ndarray:
    """Group index (0, 1, 2) of every voxel by centre distance to the sensor."""
    dist = np.linalg.norm(grid.centers() - np.asarray(sensor_origin, dtype=np.float64), axis=-1)
    # side="right": a distance equal to an edge starts the next group
    return np.searchsorted(np.asarray(spec.range_groups[:2]), dist, side="right")


def range_mask(grid: VoxelGrid, sensor_origin=(0.0, 0.0, 0.0), spec: MaskSpec = MaskSpec(), index: int = 0) -> tuple[VoxelGrid, np.ndarray]:
    """Mask occupied voxels at a rate set by their range group.

    Returns the grid with masked voxels cleared and the boolean voxel mask
    (true only at occupied, masked voxels).
    """
    groups = range_groups(grid, sensor_origin, spec)
    rates = np.asarray(spec.group_ratios)[groups]
    draw = _mask_rng(spec.seed, 1, index).random(grid.dims)
    mask = grid.occupancy & (draw < rates)
    return grid.with_occupancy(grid.occupancy & ~mask), mask


def _as_batch(x) -> np.ndarray:
    if isinstance(x, VoxelGrid):
        return x.occupancy[None].astype(np.float64)
    if isinstance(x, (list, tuple)):
        return np.stack([_as_batch(v)[0] for v in x])
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def occupancy_ce_loss(probs, targets, literal: bool = False) -> tuple[float, np.ndarray]:
    """Binary cross-entropy over voxels, summed per sample and averaged over the batch.

    ``probs`` is a ``(B, Dx, Dy, Dz)`` array (or one ``Dx x Dy x Dz``
    volume); ``targets`` is a matching array, a :class:`VoxelGrid` or a list
    of grids. Each log argument (``P`` and ``1 - P``) is floored at 1e-7, so
    every term stays finite while ``P == T`` still gives exactly zero. With
    ``literal`` only the ``T log P`` term is kept.
    """
    p = _as_batch(probs)
    t = _as_batch(targets)
    if p.shape != t.shape:
        raise UMFError("shape-mismatch", f"predictions {p.shape} vs targets {t.shape}")
    if not np.all(np.isfinite(p)):
        raise UMFError("not-finite", "occupancy probabilities must be finite")
    b = len(p)
    lo, hi = p > PROB_EPS, p < 1 - PROB_EPS
    pos = t * np.log(np.maximum(p, PROB_EPS))
    d_pos = np.where(lo, -t / np.where(lo, p, 1.0), 0.0)
    if literal:
        loss, grad = -pos.sum() / b, d_pos / b
    else:
        neg = (1 - t) * np.log1p(-np.minimum(p, 1 - PROB_EPS))
        d_neg = np.where(hi, (1 - t) / np.where(hi, 1 - p, 1.0), 0.0)
        loss, grad = -(pos + neg).sum() / b, (d_pos + d_neg) / b
    return float(loss), grad.reshape(np.shape(probs)) if np.ndim(probs) == 3 else grad


@dataclass(frozen=True)
class ProximityRule:
    positive_radius: float = 10.0
    negative_radius: float = 50.0

    def __post_init__(self):
        if not 0 < self.positive_radius < self.negative_radius:
            raise UMFError("bad-config", "need 0 < positive_radius < negative_radius")


def label_pairs(positions, rule: ProximityRule = ProximityRule()) -> np.ndarray:
    """Symmetric int8 matrix of POSITIVE / NEUTRAL / NEGATIVE; the diagonal is NEUTRAL."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or len(pos) < 2:
        raise UMFError("shape-mismatch", "need at least two positions")
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    labels = np.full(d.shape, NEUTRAL, dtype=np.int8)
    labels[d <= rule.positive_radius] = POSITIVE
    labels[d >= rule.negative_radius] = NEGATIVE
    np.fill_diagonal(labels, NEUTRAL)
    return labels


@dataclass(frozen=True)
class TripletResult:
    loss: float
    grad: np.ndarray
    hardest_positive: np.ndarray  # per anchor, -1 when the anchor is skipped
    hardest_negative: np.ndarray
    n_active: int
    no_valid_anchors: bool


def triplet_loss_batch_hard(embeddings, labels, margin: float = 0.2) -> TripletResult:
    """Batch-hard triplet margin loss on Euclidean distances.

    Per anchor with at least one positive and one negative: the farthest
    positive and the nearest negative form the triplet. The loss is the
    mean hinge over active triplets (hinge > 0). Ties pick the lowest index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    b = len(x)
    if x.ndim != 2 or lab.shape != (b, b):
        raise UMFError("shape-mismatch", "need B x D embeddings and a B x B label matrix")
    diff = x[:, None] - x[None]
    d = np.sqrt((diff**2).sum(-1))
    is_pos = (lab == POSITIVE) & ~np.eye(b, dtype=bool)
    is_neg = lab == NEGATIVE
    valid = is_pos.any(1) & is_neg.any(1)
    hp = np.where(valid, np.argmax(np.where(is_pos, d, -np.inf), axis=1), -1)
    hn = np.where(valid, np.argmin(np.where(is_neg, d, np.inf), axis=1), -1)
    grad = np.zeros_like(x)
    anchors = np.flatnonzero(valid)
    if len(anchors) == 0:
        return TripletResult(0.0, grad, hp, hn, 0, True)
    a, p, n = anchors, hp[anchors], hn[anchors]
    hinge = d[a, p] - d[a, n] + margin
    act = hinge > 0
    if not act.any():
        return TripletResult(0.0, grad, hp, hn, 0, False)
    a, p, n, hinge = a[act], p[act], n[act], hinge[act]
    k = len(a)

    def unit(i, j):
        dist = d[i, j][:, None]
        # coincident points: the distance is not differentiable, take zero
        return np.divide(diff[i, j], dist, out=np.zeros_like(diff[i, j]), where=dist > 0)

    up, un = unit(a, p), unit(a, n)
    np.add.at(grad, a, (up - un) / k)
    np.add.at(grad, p, -up / k)
    np.add.at(grad, n, un / k)
    return TripletResult(float(hinge.mean()), grad, hp, hn, k, False)


# finite-difference checks


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(analytic - numeric) / scale)


def _check_contrastive(rng, bug):
    from .superfeat import TrainingTuple, contrastive_margin_loss

    n, f = 4, 8
    a, p = rng.normal(size=(n, f)), rng.normal(size=(n, f))
    negs = [rng.normal(size=(n, f)) for _ in range(2)]
    # margin near the typical squared distance keeps some hinges active
    mu = float(np.median([((a - m) ** 2).sum(1) for m in negs]))

    def loss(a_, p_, n0, n1):
        return contrastive_margin_loss(TrainingTuple(a_, p_, (n0, n1), mu))

    _, g = loss(a, p, *negs)
    parts = [a, p, *negs]
    analytic = [g["anchor"], g["positive"], *g["negatives"]]
    errs = []
    for i, (x, ga) in enumerate(zip(parts, analytic)):
        def f(v, i=i):
            args = list(parts)
            args[i] = v
            return loss(*args)[0]
        errs.append(relative_error(ga * bug, central_difference(f, x)))
    return max(errs)


def _check_decorrelation(rng, bug):
    from .superfeat import attention_decorrelation_loss

    maps = rng.uniform(0.05, 1.0, size=(3, 16))
    _, g = attention_decorrelation_loss(maps)
    num = central_difference(lambda m: attention_decorrelation_loss(m)[0], maps)
    return relative_error(g * bug, num)


def _check_occupancy(rng, bug):
    p = rng.uniform(0.05, 0.95, size=(2, 4, 4, 4))
    t = (rng.random((2, 4, 4, 4)) < 0.5).astype(np.float64)
    _, g = occupancy_ce_loss(p, t)
    num = central_difference(lambda v: occupancy_ce_loss(v, t)[0], p)
    return relative_error(g * bug, num)


def _check_triplet(rng, bug):
    b, dim = 8, 16
    x = rng.normal(size=(b, dim))
    labels = np.full((b, b), NEGATIVE, dtype=np.int8)
    groups = np.arange(b) // 2
    labels[groups[:, None] == groups[None]] = POSITIVE
    np.fill_diagonal(labels, NEUTRAL)
    # a wide margin keeps every triplet active
    margin = 2.0 * float(np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1)).max())
    g = triplet_loss_batch_hard(x, labels, margin).grad
    num = central_difference(lambda v: triplet_loss_batch_hard(v, labels, margin).loss, x)
    return relative_error(g * bug, num)


GRADIENT_CHECKS: dict[str, Callable] = {
    "contrastive": _check_contrastive,
    "decorrelation": _check_decorrelation,
    "occupancy": _check_occupancy,
    "triplet": _check_triplet,
}


def gradient_check_report(seed: int = 0, trials: int = 100, inject_bug: bool = False) -> dict[str, float]:
    """Max relative error per loss over ``trials`` random instances.

    ``inject_bug`` scales every analytic gradient by 1.01 so that a working
    checker must report failures.
    """
    if trials < 1:
        raise UMFError("bad-config", "trials must be >= 1")
    bug = 1.01 if inject_bug else 1.0
    report = {}
    for k, (name, check) in enumerate(GRADIENT_CHECKS.items()):
        rng = np.random.default_rng([int(seed), k])
        report[name] = max(check(rng, bug) for _ in range(trials))
    return report


def batch_masks(images: Sequence[Image], spec: MaskSpec = MaskSpec(), start: int = 0) -> list[np.ndarray]:
    """Patch masks for a batch; each depends only on its own sample index."""
    return [patch_mask(img, spec, start + i)[1] for i, img in enumerate(images)]
