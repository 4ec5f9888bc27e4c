"""Retrieval metrics and the end-to-end benchmark on synthetic worlds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datamodel import CandidateList, PlaceRecord
from .errors import UMFError
from .parallel import parallel_map
from .pipeline import STRATEGIES, Pipeline, PipelineConfig
from .retrieval import DescriptorIndex, build_index, classify
from .world import Observation, World, WorldConfig, generate_world

__all__ = [
    "EvalProtocol",
    "Recall",
    "PRPoint",
    "StrategyMetrics",
    "Benchmark",
    "ground_truth",
    "recall_at_n",
    "top_percent_n",
    "top_percent_recall",
    "precision_recall_sweep",
    "evaluate",
    "encode_observations",
    "retrieve_all",
    "run_benchmark",
    "metric_rows",
    "format_csv",
    "format_table",
    "generate_world",
    "WorldConfig",
]

DEFAULT_SWEEP = (-math.inf,) + tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class EvalProtocol:
    positive_radius: float = 10.0
    recall_ns: tuple[int, ...] = (1, 5)
    top_percent: float = 0.01
    theta_sweep: tuple[float, ...] = DEFAULT_SWEEP

    def __post_init__(self):
        if not self.positive_radius > 0:
            raise UMFError("bad-config", "positive_radius must be > 0")
        ns = tuple(int(n) for n in self.recall_ns)
        if not ns or min(ns) < 1 or list(ns) != sorted(set(ns)):
            raise UMFError("bad-config", "recall_ns must be distinct, ascending and >= 1")
        if not 0 < self.top_percent <= 1:
            raise UMFError("bad-config", "top_percent must lie in (0, 1]")
        object.__setattr__(self, "recall_ns", ns)
        object.__setattr__(self, "theta_sweep", tuple(float(t) for t in self.theta_sweep))


def ground_truth(query_positions, db_positions, db_ids, radius: float) -> list[frozenset[int]]:
    """Database ids within ``radius`` metres of each query."""
    q = np.asarray(query_positions, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(db_positions, dtype=np.float64).reshape(-1, 3)
    ids = np.asarray(db_ids)
    dist = np.linalg.norm(q[:, None] - d[None], axis=-1)
    return [frozenset(int(i) for i in ids[row <= radius]) for row in dist]


@dataclass(frozen=True)
class Recall:
    values: dict[int, float]
    excluded: int  # queries without any positive, left out of the average


def recall_at_n(results: Sequence[CandidateList], truth: Sequence[frozenset], ns: Sequence[int]) -> Recall:
    if len(results) != len(truth):
        raise UMFError("shape-mismatch", "one positive set per query required")
    if any(n < 1 for n in ns):
        raise UMFError("bad-config", "n must be >= 1")
    keep = [i for i, t in enumerate(truth) if t]
    values = {}
    for n in ns:
        hits = sum(1 for i in keep if any(c in truth[i] for c in results[i].ids[:n]))
        values[int(n)] = hits / len(keep) if keep else 0.0
    return Recall(values, len(truth) - len(keep))


def top_percent_n(fraction: float, db_size: int) -> int:
    # the small slack stops 0.01 * 3000 = 30.000000000000004 rounding up
    return max(1, math.ceil(fraction * db_size - 1e-9))


def top_percent_recall(results, truth, fraction: float, db_size: int) -> float:
    n = top_percent_n(fraction, db_size)
    return recall_at_n(results, truth, [n]).values[n]


@dataclass(frozen=True)
class PRPoint:
    theta: float
    precision: float
    recall: float
    no_predictions: bool  # precision is the 1.0 convention, not a measurement


def precision_recall_sweep(results: Sequence[CandidateList], truth: Sequence[frozenset], thetas: Sequence[float]) -> list[PRPoint]:
    """Accept a query's top-1 iff ``classify(global_sim, theta)``.

    Precision is TP / accepted and recall is TP / number of queries. With no
    accepted query precision is 1.0 and ``no_predictions`` is set.
    """
    if len(results) != len(truth):
        raise UMFError("shape-mismatch", "one positive set per query required")
    n_q = len(results)
    top = [(r[0].global_sim, r[0].id in t) if len(r) else (None, False) for r, t in zip(results, truth)]
    out = []
    for theta in thetas:
        accepted = [ok for sim, ok in top if sim is not None and classify(sim, theta)]
        tp = sum(accepted)
        if accepted:
            out.append(PRPoint(float(theta), tp / len(accepted), tp / n_q if n_q else 0.0, False))
        else:
            out.append(PRPoint(float(theta), 1.0, 0.0, True))
    return out


@dataclass(frozen=True)
class StrategyMetrics:
    strategy: str
    recall: Recall
    top_percent_n: int
    top_percent_recall: float
    pr: list[PRPoint]


def evaluate(strategy: str, results, truth, db_size: int, protocol: EvalProtocol = EvalProtocol()) -> StrategyMetrics:
    n = top_percent_n(protocol.top_percent, db_size)
    return StrategyMetrics(
        strategy,
        recall_at_n(results, truth, protocol.recall_ns),
        n,
        recall_at_n(results, truth, [n]).values[n],
        precision_recall_sweep(results, truth, protocol.theta_sweep),
    )


# benchmark


def _encode_one(shared, item) -> PlaceRecord:
    rid, obs = item
    return shared["pipeline"].encode(rid, obs.position, obs.image, obs.cloud)


def encode_observations(pipeline: Pipeline, items: Sequence[tuple[int, Observation]], workers: int | None = None) -> list[PlaceRecord]:
    """Encode ``(record id, observation)`` pairs, in input order."""
    return parallel_map(_encode_one, list(items), {"pipeline": pipeline}, workers)


def _retrieve_one(shared, query) -> CandidateList:
    return shared["pipeline"].retrieve(shared["index"], query, shared["database"], shared["strategy"], shared["k"], workers=1)


def retrieve_all(
    pipeline: Pipeline,
    index: DescriptorIndex,
    queries: Sequence[PlaceRecord],
    database: Mapping[int, PlaceRecord],
    strategy: str,
    k: int | None = None,
    workers: int | None = None,
) -> list[CandidateList]:
    shared = {"pipeline": pipeline, "index": index, "database": database, "strategy": strategy, "k": k}
    return parallel_map(_retrieve_one, list(queries), shared, workers)


@dataclass(frozen=True)
class Benchmark:
    world: World
    metrics: dict[str, StrategyMetrics]
    results: dict[str, list[CandidateList]] = field(repr=False)
    truth: list[frozenset] = field(repr=False)
    database: list[PlaceRecord] = field(repr=False, default_factory=list)
    queries: list[PlaceRecord] = field(repr=False, default_factory=list)

    def recall1(self, strategy: str) -> float:
        return self.metrics[strategy].recall.values[1]


def run_benchmark(
    world_cfg: WorldConfig = WorldConfig(),
    pipeline_cfg: PipelineConfig = PipelineConfig(),
    protocol: EvalProtocol = EvalProtocol(),
    strategies: Sequence[str] = STRATEGIES,
    workers: int | None = None,
) -> Benchmark:
    """Generate a world, encode it, and score every strategy on its queries.

    Database records take the place id; query records take the id of the
    place they re-observe, which only serves as a label.
    """
    world = generate_world(world_cfg)
    pipeline = Pipeline(pipeline_cfg)
    db = encode_observations(pipeline, [(o.place, o) for o in world.database], workers)
    queries = encode_observations(pipeline, [(o.place, o) for o in world.queries], workers)
    return score_queries(world, pipeline, db, queries, protocol, strategies, workers)


def score_queries(world, pipeline, db, queries, protocol=EvalProtocol(), strategies=STRATEGIES, workers=None) -> Benchmark:
    index = build_index(db)
    database = {r.id: r for r in db}
    truth = ground_truth([q.position for q in queries], [r.position for r in db], [r.id for r in db], protocol.positive_radius)
    results, metrics = {}, {}
    for s in strategies:
        results[s] = retrieve_all(pipeline, index, queries, database, s, workers=workers)
        metrics[s] = evaluate(s, results[s], truth, len(db), protocol)
    return Benchmark(world, metrics, results, truth, list(db), list(queries))


# reporting

STRATEGY_LABELS = {"none": "none", "superfeatures": "sf", "ransac": "ransac"}


def _num(v: float) -> str:
    return repr(float(v))


def metric_rows(metrics: Mapping[str, StrategyMetrics]) -> list[tuple[str, str, str]]:
    """``(metric, n_or_theta, value)`` rows in a fixed order."""
    rows = []
    for s, m in metrics.items():
        tag = STRATEGY_LABELS.get(s, s)
        for n, v in m.recall.values.items():
            rows.append((f"{tag}.recall_at_n", str(n), _num(v)))
        rows.append((f"{tag}.top_percent_recall", str(m.top_percent_n), _num(m.top_percent_recall)))
        rows.append((f"{tag}.excluded_queries", "0", str(m.recall.excluded)))
        for p in m.pr:
            rows.append((f"{tag}.precision", _num(p.theta), _num(p.precision)))
            rows.append((f"{tag}.recall", _num(p.theta), _num(p.recall)))
            rows.append((f"{tag}.no_predictions", _num(p.theta), str(int(p.no_predictions))))
    return rows


def format_csv(rows) -> str:
    return "".join(f"{m},{n},{v}\n" for m, n, v in [("metric", "n_or_theta", "value"), *rows])


def format_table(metrics: Mapping[str, StrategyMetrics]) -> str:
    lines = []
    ns = None
    for s, m in metrics.items():
        ns = ns or list(m.recall.values)
        if not lines:
            head = "".join(f"{'R@' + str(n):>8}" for n in ns) + f"{'top-%':>8}"
            lines.append(f"{'strategy':<10}{head}")
        vals = "".join(f"{m.recall.values[n]:8.3f}" for n in ns) + f"{m.top_percent_recall:8.3f}"
        lines.append(f"{STRATEGY_LABELS.get(s, s):<10}{vals}")
    return "\n".join(lines)
