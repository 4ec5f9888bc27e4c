"""Exact KD-tree retrieval over global descriptors and candidate re-ranking."""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datamodel import Candidate, CandidateList, GlobalDescriptor, PlaceRecord, validate
from .errors import UMFError
from .parallel import worker_cap

LEAF_BIT = 1 << 31  # set in ``left`` of leaf nodes


@dataclass(frozen=True)
class KDTree:
    """Median-split tree stored as flat node arrays.

    Internal node ``i``: points with ``x[dim[i]] <= split[i]`` live under
    ``left[i]`` and points with ``x[dim[i]] >= split[i]`` under ``right[i]``.
    Leaf node: ``left`` carries ``LEAF_BIT`` and, with ``right``, gives the
    ``[start, end)`` range into ``order``.
    """

    dim: np.ndarray  # u8
    split: np.ndarray  # f32
    left: np.ndarray  # u32
    right: np.ndarray  # u32
    order: np.ndarray  # u32, point index per tree slot

    @classmethod
    def build(cls, points: np.ndarray, leaf_size: int = 16) -> KDTree:
        points = np.asarray(points, dtype=np.float32)
        n, d = points.shape
        if d > 256 or n >= LEAF_BIT:
            raise UMFError("bad-dims", "tree supports at most 256 dims and 2^31 points")
        order = np.arange(n)
        nodes: list[list] = []

        def grow(lo: int, hi: int) -> int:
            node = len(nodes)
            nodes.append([0, 0.0, lo | LEAF_BIT, hi])
            if hi - lo <= leaf_size:
                return node
            idx = order[lo:hi]
            pts = points[idx]
            spread = pts.max(axis=0) - pts.min(axis=0)
            axis = int(np.argmax(spread))  # first widest dimension
            if spread[axis] == 0:
                return node
            # stable sort: equal coordinates keep ascending point index
            ranked = idx[np.argsort(pts[:, axis], kind="stable")]
            order[lo:hi] = ranked
            mid = lo + (hi - lo) // 2
            split = points[ranked[mid - lo], axis]
            left = grow(lo, mid)
            right = grow(mid, hi)
            nodes[node] = [axis, split, left, right]
            return node

        grow(0, n)
        arr = list(zip(*nodes))
        return cls(
            np.array(arr[0], dtype=np.uint8),
            np.array(arr[1], dtype=np.float32),
            np.array(arr[2], dtype=np.uint32),
            np.array(arr[3], dtype=np.uint32),
            order.astype(np.uint32),
        )

    def __len__(self) -> int:
        return len(self.dim)

    def knn(self, points: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int) -> list[tuple[float, int, int]]:
        """``k`` nearest ``(squared distance, id, row)`` sorted by distance then id."""
        q = np.asarray(q, dtype=np.float64)
        pts = points.astype(np.float64, copy=False)
        heap: list[tuple[float, int, int]] = []  # max-heap via negation

        def worst() -> float:
            return -heap[0][0] if len(heap) == k else np.inf

        def visit(node: int):
            left = int(self.left[node])
            if left & LEAF_BIT:
                rows = self.order[left & ~LEAF_BIT : self.right[node]]
                d2 = ((pts[rows] - q) ** 2).sum(axis=1)
                for dist, row in zip(d2.tolist(), rows.tolist()):
                    item = (-dist, -int(ids[row]), row)
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif item > heap[0]:
                        heapq.heapreplace(heap, item)
                return
            axis = self.dim[node]
            gap = q[axis] - float(self.split[node])
            near, far = (left, self.right[node]) if gap <= 0 else (self.right[node], left)
            visit(int(near))
            # <= keeps equal-distance points with smaller ids reachable
            if gap * gap <= worst():
                visit(int(far))

        visit(0)
        return sorted((-nd, -nid, row) for nd, nid, row in heap)


@dataclass(frozen=True)
class DescriptorIndex:
    descriptors: np.ndarray  # f32, count x dim
    ids: np.ndarray  # u64
    tree: KDTree

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 25
    theta: float = 0.5
    strategy: str = "none"  # none | superfeatures | ransac
    theta_on: str = "global"  # global | rerank

    def __post_init__(self):
        if self.k < 1:
            raise UMFError("bad-config", "k must be >= 1")
        if not 0 <= self.theta <= 1:
            raise UMFError("bad-config", "theta must lie in [0, 1]")
        if self.strategy not in ("none", "superfeatures", "ransac"):
            raise UMFError("bad-config", f"unknown strategy {self.strategy!r}")
        if self.theta_on not in ("global", "rerank"):
            raise UMFError("bad-config", f"unknown theta target {self.theta_on!r}")


def _descriptor_values(d) -> np.ndarray:
    return np.asarray(getattr(d, "values", d), dtype=np.float64)


def build_index(records: Sequence[PlaceRecord], leaf_size: int = 16) -> DescriptorIndex:
    if not records:
        raise UMFError("empty-index", "need at least one record")
    ids = [int(r.id) for r in records]
    if len(set(ids)) != len(ids):
        raise UMFError("duplicate-id", "record ids must be unique")
    for r in records:
        problems = [v for v in validate(r) if v.startswith("descriptor")]
        if problems:
            raise UMFError(problems[0], f"record {r.id}")
    desc = np.stack([_descriptor_values(r.descriptor) for r in records]).astype(np.float32)
    return DescriptorIndex(desc, np.array(ids, dtype=np.uint64), KDTree.build(desc, leaf_size))


def index_from_arrays(descriptors: np.ndarray, ids: Sequence[int], tree: KDTree | None = None, leaf_size: int = 16) -> DescriptorIndex:
    desc = np.asarray(descriptors, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.uint64)
    return DescriptorIndex(desc, ids, tree if tree is not None else KDTree.build(desc, leaf_size))


def query_topk(index: DescriptorIndex, q, k: int) -> CandidateList:
    """Exact ``k`` nearest descriptors; similarity reported as ``1 - d^2 / 2``."""
    if not 1 <= k <= len(index):
        raise UMFError("bad-k", f"k={k} outside [1, {len(index)}]")
    hits = index.tree.knn(index.descriptors, index.ids, _descriptor_values(q), k)
    return CandidateList(tuple(Candidate(int(index.ids[row]), 1.0 - d2 / 2.0) for d2, _, row in hits))


def rerank(
    query: PlaceRecord,
    candidates: CandidateList,
    cfg: RetrievalConfig,
    score: Callable[[PlaceRecord, int], float] | None = None,
    workers: int | None = None,
) -> CandidateList:
    """Reorder candidates by descending re-rank score, ties by original rank.

    ``score(query, candidate_id)`` computes the local-feature score for the
    configured strategy; it is required unless ``strategy == "none"``.
    Scores are computed on up to ``workers`` threads (default: the
    ``UMF_THREADS`` cap); the result does not depend on the count.
    """
    if cfg.strategy == "none":
        return candidates
    if score is None:
        raise UMFError("bad-config", f"strategy {cfg.strategy!r} needs a scoring function")
    ids = candidates.ids
    workers = min(workers or worker_cap(), len(ids)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(lambda cid: score(query, cid), ids))
    else:
        scores = [score(query, cid) for cid in ids]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
    return CandidateList(
        tuple(Candidate(ids[i], candidates[i].global_sim, float(scores[i])) for i in order)
    )


def classify(similarity: float, theta: float) -> bool:
    """Accept a candidate as the same place iff ``similarity > theta``."""
    return similarity > theta
