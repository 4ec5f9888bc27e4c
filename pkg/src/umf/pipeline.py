"""Observation encoding and retrieval with optional local-feature re-ranking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .datamodel import GRID_DIMS, CandidateList, Image, PlaceRecord, PointCloud, voxelize
from .encoder import EncoderConfig, EncoderWeights, encode_lidar, encode_vision, fuse_global
from .errors import UMFError
from .features import ModalityFeatures, keypoint_sets, superfeature_sets
from .geoverify import HOMOGRAPHY_RANSAC, RIGID_RANSAC, RansacConfig, SalientConfig, ransac_rerank_score, select_salient
from .retrieval import DescriptorIndex, RetrievalConfig, query_topk, rerank
from .superfeat import MatchConfig, lit_extract, sf_rerank_score

STRATEGIES = ("none", "superfeatures", "ransac")


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    templates: int = 32
    lit_iterations: int = 3
    salient: SalientConfig = field(default_factory=SalientConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    homography: RansacConfig = HOMOGRAPHY_RANSAC
    rigid: RansacConfig = RIGID_RANSAC
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    grid_origin: tuple[float, float, float] = (-25.0, -25.0, -10.0)
    voxel_size: float = 1.0
    grid_dims: tuple[int, int, int] = GRID_DIMS


class Pipeline:
    """Seeded encoder weights plus the settings for every downstream stage."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.weights = EncoderWeights.build(cfg.encoder)

    def local(self, fmap, modality: str) -> ModalityFeatures:
        sf = lit_extract(fmap, self.cfg.templates, self.cfg.lit_iterations, self.weights, modality)
        kp = select_salient(fmap, sf.attention, self.cfg.salient)
        return ModalityFeatures(sf, kp)

    def encode(
        self,
        record_id: int,
        position,
        image: Image,
        cloud: PointCloud,
        keep_attention: bool = False,
    ) -> PlaceRecord:
        """Global descriptor and per-modality local features of one observation."""
        c = self.cfg
        grid = voxelize(cloud.downsample(), c.grid_origin, c.voxel_size, c.grid_dims)
        fv = encode_vision(image, self.weights)
        fl = encode_lidar(grid, self.weights)
        desc = fuse_global(fv, fl, self.weights)
        vision, lidar = self.local(fv, "vision"), self.local(fl, "lidar")
        if not keep_attention:
            vision = ModalityFeatures(vision.superfeatures.stripped(), vision.keypoints)
            lidar = ModalityFeatures(lidar.superfeatures.stripped(), lidar.keypoints)
        pos = tuple(float(v) for v in position)
        return PlaceRecord(int(record_id), pos, desc, vision, lidar)

    def scorer(self, strategy: str, database: Mapping[int, PlaceRecord]) -> Callable[[PlaceRecord, int], float] | None:
        if strategy == "none":
            return None
        if strategy not in STRATEGIES:
            raise UMFError("bad-config", f"unknown strategy {strategy!r}")
        c = self.cfg

        def lookup(cid: int) -> PlaceRecord:
            try:
                return database[cid]
            except KeyError:
                raise UMFError("missing-artifact", f"place {cid} not in database") from None

        if strategy == "superfeatures":
            return lambda q, cid: sf_rerank_score(superfeature_sets(q), superfeature_sets(lookup(cid)), c.match)
        return lambda q, cid: ransac_rerank_score(
            keypoint_sets(q), keypoint_sets(lookup(cid)), c.match.tau, c.homography, c.rigid, cid
        )

    def retrieve(
        self,
        index: DescriptorIndex,
        query: PlaceRecord,
        database: Mapping[int, PlaceRecord],
        strategy: str | None = None,
        k: int | None = None,
        workers: int | None = None,
    ) -> CandidateList:
        rc = self.cfg.retrieval
        strategy = strategy or rc.strategy
        k = min(k or rc.k, len(index))
        top = query_topk(index, query.descriptor, k)
        cfg = RetrievalConfig(k, rc.theta, strategy, rc.theta_on)
        return rerank(query, top, cfg, self.scorer(strategy, database), workers)
