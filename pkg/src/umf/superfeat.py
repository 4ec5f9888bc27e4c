"""Super-features: iterative template attention, their losses, and matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import FeatureMap
from .encoder import EncoderWeights, softmax
from .errors import UMFError

MODALITIES = ("vision", "lidar")


@dataclass(frozen=True, eq=False)
class SuperFeatureSet:
    """Ordered ``N x F`` Super-features; row ``i`` has ID ``i``.

    ``attention`` is ``N x P`` (flattened over ``spatial_dims``) or ``None``
    for a set stripped down to what matching needs.
    """

    features: np.ndarray
    attention: np.ndarray | None
    spatial_dims: tuple[int, ...]
    modality: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise UMFError("shape-mismatch", "features must be N x F")
        if self.modality not in MODALITIES:
            raise UMFError("bad-modality", self.modality)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "spatial_dims", tuple(int(d) for d in self.spatial_dims))
        if self.attention is not None:
            att = np.asarray(self.attention).reshape(len(feats), -1)
            if att.shape[1] != int(np.prod(self.spatial_dims)):
                raise UMFError("shape-mismatch", "attention maps do not cover the spatial domain")
            object.__setattr__(self, "attention", att)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def ids(self) -> np.ndarray:
        return np.arange(len(self.features))

    def stripped(self) -> SuperFeatureSet:
        return SuperFeatureSet(self.features, None, self.spatial_dims, self.modality)


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.8
    require_same_id: bool = True
    # Lowe's criterion in both directions keeps matching symmetric in (A, B).
    symmetric_ratio: bool = True
    # Accept iff ratio >= tau, as the inequality is printed in the source.
    literal_ratio: bool = False

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise UMFError("bad-tau", f"tau must lie in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class TrainingTuple:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: Sequence[np.ndarray] = field(default_factory=tuple)
    mu: float = 0.5
    # (anchor row, positive row) pairs; defaults to same-ID pairs.
    pairs: Sequence[tuple[int, int]] | None = None

    def __post_init__(self):
        a = np.asarray(self.anchor, dtype=np.float64)
        p = np.asarray(self.positive, dtype=np.float64)
        negs = tuple(np.asarray(n, dtype=np.float64) for n in self.negatives)
        if a.ndim != 2 or p.shape != a.shape or any(n.shape != a.shape for n in negs):
            raise UMFError("shape-mismatch", "all Super-feature sets in a tuple must share N and F")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "positive", p)
        object.__setattr__(self, "negatives", negs)


def lit_extract(
    fmap: FeatureMap,
    templates: int,
    iterations: int,
    w: EncoderWeights,
    modality: str | None = None,
) -> SuperFeatureSet:
    """Run ``templates`` learned queries over the map for ``iterations`` rounds.

    Each round: scores ``Q K^T / sqrt(F)`` are softmax-normalised over
    positions per template, and each template moves by the projected
    attention-weighted value sum. Positions whose feature vector is all
    zero (empty voxels of a sparse grid) carry no feature and get zero
    weight; a map with no nonzero position is attended uniformly. Output
    rows are the L2-normalised final templates; attention maps come from
    the final round.
    """
    if modality is None:
        modality = "vision" if len(fmap.spatial_dims) == 2 else "lidar"
    lw = w.lit[modality]
    if fmap.channels != lw.dim:
        raise UMFError("shape-mismatch", f"{modality} LIT expects {lw.dim} channels, got {fmap.channels}")
    if templates < 2 or iterations < 1:
        raise UMFError("bad-config", "need at least 2 templates and 1 iteration")
    n_pos = fmap.n_positions
    if templates > n_pos:
        raise UMFError("too-many-templates", f"{templates} templates over {n_pos} positions")

    x = fmap.flat()
    # squared norms are a fast nonzero test; values below ~1e-19 count as zero
    active = np.flatnonzero(np.einsum("ij,ij->i", x, x) > 0)
    if len(active) == 0:
        active = np.arange(n_pos)
    xa = x[active].astype(np.float64)
    q = lw.templates(templates)
    scale = 1.0 / np.sqrt(lw.dim)
    for _ in range(iterations):
        # (q Wk^T) X^T and (A X) Wv: cheaper than projecting every position
        att = softmax(((q @ lw.wk.T) * scale) @ xa.T)
        q = q + ((att @ xa) @ lw.wv) @ lw.wo

    maps = np.zeros((templates, n_pos), dtype=np.float32)
    maps[:, active] = att
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    # float32 values survive the on-disk format unchanged
    feats = (q / np.where(norms > 0, norms, 1.0)).astype(np.float32)
    return SuperFeatureSet(feats, maps, fmap.spatial_dims, modality)


def contrastive_margin_loss(t: TrainingTuple) -> tuple[float, dict[str, object]]:
    """Pull matched pairs together, push same-ID negatives beyond margin ``mu``.

    Returns the loss and gradients ``{"anchor", "positive", "negatives"}``.
    """
    a, p = t.anchor, t.positive
    pairs = t.pairs if t.pairs is not None else [(i, i) for i in range(len(a))]
    ga = np.zeros_like(a)
    gp = np.zeros_like(p)
    gn = [np.zeros_like(n) for n in t.negatives]
    loss = 0.0
    for i, j in pairs:
        diff = a[i] - p[j]
        loss += diff @ diff
        ga[i] += 2 * diff
        gp[j] -= 2 * diff
        for n, g in zip(t.negatives, gn):
            # negatives share the ID of the anchor feature
            dn = a[i] - n[i]
            hinge = t.mu - dn @ dn
            if hinge > 0:
                loss += hinge
                ga[i] -= 2 * dn
                g[i] += 2 * dn
    return float(loss), {"anchor": ga, "positive": gp, "negatives": gn}


def attention_decorrelation_loss(attn) -> tuple[float, np.ndarray]:
    """Mean cosine similarity over ordered pairs of distinct attention maps.

    Accepts a :class:`SuperFeatureSet` or an ``N x P`` array; returns the
    loss and its gradient with the shape of the flattened maps.
    """
    maps = attn.attention if isinstance(attn, SuperFeatureSet) else attn
    if maps is None:
        raise UMFError("zero-attention", "set carries no attention maps")
    a = np.asarray(maps, dtype=np.float64).reshape(len(maps), -1)
    n = len(a)
    if n < 2:
        raise UMFError("bad-config", "need at least two attention maps")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise UMFError("zero-attention", "an attention map is identically zero")
    u = a / norms[:, None]
    cos = u @ u.T
    scale = 1.0 / (n * (n - 1))
    loss = (cos.sum() - np.trace(cos)) * scale
    off = cos - np.diag(np.diag(cos))
    # d cos_ij / d a_i = (u_j - cos_ij u_i) / |a_i|; each pair appears twice
    grad = 2 * scale * ((u.sum(axis=0) - u) - off.sum(axis=1)[:, None] * u) / norms[:, None]
    return float(loss), grad


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _second_nearest(d: np.ndarray, axis: int, exclude: np.ndarray) -> np.ndarray:
    """Per column (axis=0) or row (axis=1), smallest distance skipping ``exclude``."""
    d = d.copy()
    if axis == 0:
        d[exclude, np.arange(d.shape[1])] = np.inf
        return d.min(axis=0) if d.shape[0] else np.full(d.shape[1], np.inf)
    d[np.arange(d.shape[0]), exclude] = np.inf
    return d.min(axis=1) if d.shape[1] else np.full(d.shape[0], np.inf)


def mutual_ratio_matches(
    a: np.ndarray,
    b: np.ndarray,
    tau: float,
    symmetric: bool = True,
    literal: bool = False,
) -> list[tuple[int, int]]:
    """Reciprocal nearest neighbours of rows of ``a`` and ``b`` passing the ratio test.

    For a mutual pair (s, s'), the ratio is ``|s - s'|`` over the distance
    from s' to its nearest neighbour in ``a`` other than s; with
    ``symmetric`` the mirrored ratio must pass as well.
    """
    if len(a) == 0 or len(b) == 0:
        return []
    d = _pairwise(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    nn_ab = d.argmin(axis=1)
    nn_ba = d.argmin(axis=0)
    rows = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(a)))
    cols = nn_ab[rows]
    best = d[rows, cols]
    ratio_b = _safe_ratio(best, _second_nearest(d, 0, nn_ba)[cols])
    ratios = [ratio_b]
    if symmetric:
        ratios.append(_safe_ratio(best, _second_nearest(d, 1, nn_ab)[rows]))
    ok = np.ones(len(rows), dtype=bool)
    for r in ratios:
        ok &= (r >= tau) if literal else (r < tau)
    return [(int(i), int(j)) for i, j in zip(rows[ok], cols[ok])]


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    # no second neighbour (den = inf) gives 0; coincident second neighbour gives inf
    r[np.isnan(r)] = np.inf
    return r


def match_superfeatures(a: SuperFeatureSet, b: SuperFeatureSet, cfg: MatchConfig = MatchConfig()) -> list[tuple[int, int]]:
    if a.modality != b.modality or a.dim != b.dim:
        raise UMFError("shape-mismatch", "Super-feature sets differ in modality or dimension")
    pairs = mutual_ratio_matches(a.features, b.features, cfg.tau, cfg.symmetric_ratio, cfg.literal_ratio)
    if cfg.require_same_id:
        pairs = [(i, j) for i, j in pairs if i == j]
    return pairs


def sf_rerank_score(query, candidate, cfg: MatchConfig = MatchConfig()) -> float:
    """Total Super-feature match count over the modalities both sides carry.

    ``query`` and ``candidate`` map modality name to :class:`SuperFeatureSet`
    (``None`` when absent).
    """
    present = False
    score = 0
    for m in MODALITIES:
        qa, ca = query.get(m), candidate.get(m)
        if qa is None or ca is None:
            continue
        present = True
        score += len(match_superfeatures(qa, ca, cfg))
    if not present:
        raise UMFError("no-local-features", "no modality with Super-features on both sides")
    return float(score)
