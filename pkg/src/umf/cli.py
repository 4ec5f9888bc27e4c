"""``umf`` command line: genworld, index, query, eval, losscheck.

Machine-readable CSV goes to stdout, diagnostics to stderr. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import io
from .config import CLI_STRATEGIES, RunConfig, dump_config, load_config
from .datamodel import PlaceRecord
from .errors import UMFError
from .eval import evaluate, format_csv, format_table, ground_truth, metric_rows, retrieve_all
from .features import ArtifactRef, local_features
from .parallel import parallel_map
from .pipeline import STRATEGIES, Pipeline
from .retrieval import build_index, classify
from .trainmath import gradient_check_report
from .world import Observation, generate_world

GRADIENT_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr)


def _config(args, base: Path | None = None) -> RunConfig:
    """``--config`` if given, else ``base`` (a stored config), else defaults; ``--seed`` wins."""
    path = args.config or (base if base is not None and base.exists() else None)
    overrides = {"seed": str(args.seed)} if getattr(args, "seed", None) is not None else {}
    return load_config(path, overrides)


# genworld


def cmd_genworld(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise UsageError("genworld needs --out DIR")
    out = Path(args.out)
    world = generate_world(cfg.world_config())
    for sub in ("database", "queries"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    def dump(obs: tuple[Observation, ...], sub: str, stem: str) -> list[PlaceRecord]:
        recs = []
        for i, o in enumerate(obs):
            name = f"{stem}{i:05d}"
            io.write_ppm(out / sub / f"{name}.ppm", o.image)
            io.write_xyz(out / sub / f"{name}.xyz", o.cloud)
            recs.append(PlaceRecord(o.place, o.position, image_path=f"{sub}/{name}.ppm", cloud_path=f"{sub}/{name}.xyz"))
        return recs

    io.write_placedb(out / "database.csv", dump(world.database, "database", "place"))
    io.write_placedb(out / "queries.csv", dump(world.queries, "queries", "query"))
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "x", "y", "z", "texture", "geometry"])
        for p in world.places:
            w.writerow([p.id, *(repr(v) for v in p.position), p.texture, p.geometry])
    _log(f"wrote {len(world.places)} places and {len(world.queries)} queries to {out}")
    return 0


# index


def _load_observation(rec: PlaceRecord) -> Observation:
    if rec.image_path is None or rec.cloud_path is None:
        raise UMFError("missing-file", f"record {rec.id} lacks an image or cloud path")
    return Observation(rec.id, rec.position, (0.0, 0.0), io.read_ppm(rec.image_path), io.read_xyz(rec.cloud_path))


def _encode_record(shared, rec: PlaceRecord):
    try:
        obs = _load_observation(rec)
        return shared["pipeline"].encode(rec.id, obs.position, obs.image, obs.cloud), None
    except UMFError as e:
        return None, f"record {rec.id}: {e}"


def _encode_records(pipeline: Pipeline, records: list[PlaceRecord]) -> list[PlaceRecord]:
    done = parallel_map(_encode_record, records, {"pipeline": pipeline})
    errors = [err for _, err in done if err]
    for err in errors:
        _log(f"error: {err}")
    if errors:
        raise UMFError("encode-failed", f"{len(errors)} of {len(records)} records failed")
    return [r for r, _ in done]


def _artifact_paths(root: Path, rid: int, modality: str) -> tuple[Path, Path]:
    local = root / "local"
    return local / f"{rid}.{modality}.umfs", local / f"{rid}.{modality}.umfk"


def cmd_index(args) -> int:
    db_path = Path(args.db)
    if not args.out:
        raise UsageError("index needs --out DIR")
    cfg = _config(args, db_path.parent / "config.txt")
    out = Path(args.out)
    records = io.read_placedb(db_path)
    if not records:
        raise UMFError("empty-index", f"{db_path} has no records")
    pipeline = Pipeline(cfg.pipeline_config())
    encoded = _encode_records(pipeline, records)
    index = build_index(encoded)
    (out / "local").mkdir(parents=True, exist_ok=True)
    io.write_index(out / "index", index)
    for r in encoded:
        for m, feats in (("vision", r.local_vision), ("lidar", r.local_lidar)):
            sf_path, kp_path = _artifact_paths(out, r.id, m)
            io.write_superfeatures(sf_path, feats.superfeatures)
            io.write_keypoints(kp_path, feats.keypoints, m)
    io.write_placedb(out / "places.csv", [PlaceRecord(r.id, r.position) for r in encoded])
    (out / "config.txt").write_text(dump_config(cfg))
    _log(f"indexed {len(index)} records into {out}")
    return 0


def _load_database(root: Path) -> tuple:
    index = io.read_index(root / "index")
    places = io.read_placedb(root / "places.csv")
    if len(places) != len(index):
        raise UMFError("bad-file", f"{root / 'places.csv'} does not match the index")
    database = {}
    for p in places:
        refs = [ArtifactRef(p.id, *_artifact_paths(root, p.id, m)) for m in ("vision", "lidar")]
        database[p.id] = PlaceRecord(p.id, p.position, None, refs[0], refs[1])
    return index, database


def _clamp_k(k: int, size: int) -> int:
    if k < 1:
        raise UsageError("--k must be >= 1")
    if k > size:
        _log(f"warning: k={k} exceeds index size {size}; using k={size}")
        return size
    return k


# query


def cmd_query(args) -> int:
    root = Path(args.index)
    cfg = _config(args, root / "config.txt")
    rc = cfg.retrieval
    strategy = CLI_STRATEGIES[args.strategy] if args.strategy else rc.strategy
    theta = rc.theta if args.theta is None else args.theta
    if not 0 <= theta <= 1:
        raise UsageError("--theta must lie in [0, 1]")
    index, database = _load_database(root)
    k = _clamp_k(args.k if args.k is not None else rc.k, len(index))
    records = io.read_placedb(args.query)
    if args.id is not None:
        records = [r for r in records if r.id == args.id]
    if not records:
        raise UsageError(f"no query record{'' if args.id is None else f' with id {args.id}'} in {args.query}")
    pipeline = Pipeline(cfg.pipeline_config())
    obs = _load_observation(records[0])
    query = pipeline.encode(obs.place, obs.position, obs.image, obs.cloud)
    result = pipeline.retrieve(index, query, database, strategy, k)
    print("rank,id,global_sim,rerank_score,accepted")
    for rank, c in enumerate(result, 1):
        score = c.global_sim if rc.theta_on == "global" or c.rerank_score is None else c.rerank_score
        rr = "" if c.rerank_score is None else repr(float(c.rerank_score))
        print(f"{rank},{c.id},{float(c.global_sim)!r},{rr},{int(classify(score, theta))}")
    return 0


# eval


def cmd_eval(args) -> int:
    root = Path(args.index)
    cfg = _config(args, root / "config.txt")
    index, database = _load_database(root)
    records = io.read_placedb(args.queries)
    if not records:
        raise UsageError(f"empty query set {args.queries}")
    pipeline = Pipeline(cfg.pipeline_config())
    queries = _encode_records(pipeline, records)
    # load every artifact once up front instead of per candidate
    loaded = {rid: _materialise(r) for rid, r in database.items()}
    ids = [int(i) for i in index.ids]
    truth = ground_truth([q.position for q in queries], [loaded[i].position for i in ids], ids, cfg.protocol.positive_radius)
    metrics = {}
    for s in STRATEGIES:
        results = retrieve_all(pipeline, index, queries, loaded, s, _clamp_k(cfg.retrieval.k, len(index)))
        metrics[s] = evaluate(s, results, truth, len(index), cfg.protocol)
    text = format_csv(metric_rows(metrics))
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    _log(format_table(metrics))
    return 0


def _materialise(r: PlaceRecord) -> PlaceRecord:
    return PlaceRecord(r.id, r.position, r.descriptor, local_features(r, "vision"), local_features(r, "lidar"))


# losscheck


def cmd_losscheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    seed = args.seed if args.seed is not None else 0
    report = gradient_check_report(seed, args.trials, inject_bug=args.inject_bug)
    ok = True
    for name, err in report.items():
        passed = err < GRADIENT_TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} max_rel_err={err:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory or file")

    p = argparse.ArgumentParser(prog="umf", description="Multimodal place recognition on synthetic worlds.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genworld", parents=[common], help="write a synthetic world")
    g.set_defaults(func=cmd_genworld)

    i = sub.add_parser("index", parents=[common], help="encode a place database")
    i.add_argument("db", help="place database CSV")
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("query", parents=[common], help="retrieve one query record")
    q.add_argument("index", help="index directory")
    q.add_argument("query", help="place CSV holding the query record")
    q.add_argument("--id", type=int, help="query record id (default: first row)")
    q.add_argument("--k", type=int)
    q.add_argument("--strategy", choices=sorted(CLI_STRATEGIES))
    q.add_argument("--theta", type=float)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", parents=[common], help="metrics for every strategy")
    e.add_argument("index", help="index directory")
    e.add_argument("queries", help="query place CSV")
    e.set_defaults(func=cmd_eval)

    lc = sub.add_parser("losscheck", parents=[common], help="finite-difference gradient checks")
    lc.add_argument("--trials", type=int, default=100)
    lc.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    lc.set_defaults(func=cmd_losscheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return 2
    except UMFError as e:
        _log(f"error: {e}")
        return 2 if e.code == "bad-config" else 1
    except OSError as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
