"""``key = value`` run configuration with a fixed schema.

Lines starting with ``#`` and blank lines are ignored. Every key must be
in :data:`SCHEMA`; unknown keys and unparsable values raise
``UMFError("bad-config")`` naming the key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .encoder import EncoderConfig
from .errors import UMFError
from .eval import EvalProtocol
from .geoverify import HOMOGRAPHY_RANSAC, RIGID_RANSAC, SalientConfig
from .pipeline import PipelineConfig
from .retrieval import RetrievalConfig
from .superfeat import MatchConfig
from .trainmath import MaskSpec, ProximityRule
from .world import WorldConfig

CLI_STRATEGIES = {"none": "none", "sf": "superfeatures", "ransac": "ransac"}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _strategy(s: str) -> str:
    if s.strip() not in CLI_STRATEGIES:
        raise ValueError(s)
    return CLI_STRATEGIES[s.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s.strip() not in options:
            raise ValueError(s)
        return s.strip()

    return parse


# key: (parser, section, field)
SCHEMA: dict[str, tuple[Callable, str, str]] = {
    "seed": (int, "root", "seed"),
    "world.n_places": (int, "world", "n_places"),
    "world.aliasing_fraction": (float, "world", "aliasing_fraction"),
    "world.spacing": (float, "world", "spacing"),
    "world.jitter": (float, "world", "jitter"),
    "world.query_fraction": (float, "world", "query_fraction"),
    "world.query_shift": (float, "world", "query_shift"),
    "world.image_noise": (float, "world", "image_noise"),
    "world.cloud_noise": (float, "world", "cloud_noise"),
    "world.scan_extent": (float, "world", "scan_extent"),
    "world.negative_radius": (float, "world", "negative_radius"),
    "encoder.seed": (int, "encoder", "seed"),
    "encoder.model_dim": (int, "encoder", "model_dim"),
    "encoder.heads": (int, "encoder", "heads"),
    "encoder.rounds": (int, "encoder", "rounds"),
    "encoder.descriptor_dim": (int, "encoder", "descriptor_dim"),
    "encoder.lit_template_scale": (float, "encoder", "lit_template_scale"),
    "lit.templates": (int, "pipeline", "templates"),
    "lit.iterations": (int, "pipeline", "lit_iterations"),
    "salient.percentile": (float, "salient", "percentile"),
    "salient.delta": (_opt_float, "salient", "delta"),
    "salient.max_keypoints": (int, "salient", "max_keypoints"),
    "match.tau": (float, "match", "tau"),
    "match.require_same_id": (_bool, "match", "require_same_id"),
    "match.symmetric_ratio": (_bool, "match", "symmetric_ratio"),
    "ransac.iterations": (int, "ransac", "iterations"),
    "ransac.homography_threshold": (float, "ransac", "homography_threshold"),
    "ransac.rigid_threshold": (float, "ransac", "rigid_threshold"),
    "retrieval.k": (int, "retrieval", "k"),
    "retrieval.theta": (float, "retrieval", "theta"),
    "retrieval.strategy": (_strategy, "retrieval", "strategy"),
    "retrieval.theta_on": (_choice("global", "rerank"), "retrieval", "theta_on"),
    "eval.positive_radius": (float, "protocol", "positive_radius"),
    "eval.recall_ns": (_ints, "protocol", "recall_ns"),
    "eval.top_percent": (float, "protocol", "top_percent"),
    "eval.theta_sweep": (_floats, "protocol", "theta_sweep"),
    "mask.patch_size": (int, "mask", "patch_size"),
    "mask.image_ratio": (float, "mask", "image_ratio"),
    "mask.range_groups": (_floats, "mask", "range_groups"),
    "mask.group_ratios": (_floats, "mask", "group_ratios"),
    "proximity.positive_radius": (float, "proximity", "positive_radius"),
    "proximity.negative_radius": (float, "proximity", "negative_radius"),
}


@dataclass(frozen=True)
class RansacSettings:
    iterations: int = HOMOGRAPHY_RANSAC.iterations
    homography_threshold: float = HOMOGRAPHY_RANSAC.inlier_threshold
    rigid_threshold: float = RIGID_RANSAC.inlier_threshold


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for every stage; ``seed`` drives world, masks and RANSAC."""

    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    salient: SalientConfig = field(default_factory=SalientConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacSettings = field(default_factory=RansacSettings)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    mask: MaskSpec = field(default_factory=MaskSpec)
    proximity: ProximityRule = field(default_factory=ProximityRule)

    def world_config(self) -> WorldConfig:
        return replace(self.world, seed=self.seed)

    def mask_spec(self) -> MaskSpec:
        return replace(self.mask, seed=self.seed)

    def pipeline_config(self) -> PipelineConfig:
        r = self.ransac
        return replace(
            self.pipeline,
            encoder=self.encoder,
            salient=self.salient,
            match=self.match,
            homography=replace(HOMOGRAPHY_RANSAC, iterations=r.iterations, inlier_threshold=r.homography_threshold, seed=self.seed),
            rigid=replace(RIGID_RANSAC, iterations=r.iterations, inlier_threshold=r.rigid_threshold, seed=self.seed),
            retrieval=self.retrieval,
        )


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; the last assignment of a key wins."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UMFError("bad-config", f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise UMFError("bad-config", f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(values: dict[str, str]) -> RunConfig:
    sections: dict[str, dict] = {}
    for key, raw in values.items():
        if key not in SCHEMA:
            raise UMFError("bad-config", f"unknown key {key!r}")
        parse, section, name = SCHEMA[key]
        try:
            sections.setdefault(section, {})[name] = parse(raw)
        except (ValueError, TypeError):
            raise UMFError("bad-config", f"bad value {raw!r} for key {key!r}") from None
    cfg = RunConfig()
    try:
        kw = {}
        for section, fields in sections.items():
            if section == "root":
                kw.update(fields)
            else:
                kw[section] = replace(getattr(cfg, section), **fields)
        return replace(cfg, **kw)
    except UMFError as e:
        raise UMFError("bad-config", e.detail or e.code) from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise UMFError("bad-config", f"cannot read config {path}: {e.strerror}") from None
        values = parse_config(text, str(path))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise UMFError("bad-config", f"unknown key {key!r}")
        values[key] = value
    return build_config(values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else "-inf" if math.isinf(v) else repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text listing every key; ``load`` of it gives back ``cfg``."""
    reverse = {v: k for k, v in CLI_STRATEGIES.items()}
    lines = []
    for key, (_, section, name) in SCHEMA.items():
        v = cfg.seed if section == "root" else getattr(getattr(cfg, section), name)
        if key == "retrieval.strategy":
            v = reverse[v]
        lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
