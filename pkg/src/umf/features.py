"""Per-modality local features attached to place records, loaded lazily from disk."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .datamodel import PlaceRecord
from .errors import UMFError
from .geoverify import KeypointSet
from .superfeat import MODALITIES, SuperFeatureSet


@dataclass(frozen=True)
class ModalityFeatures:
    superfeatures: SuperFeatureSet
    keypoints: KeypointSet


@dataclass(frozen=True)
class ArtifactRef:
    """Paths of one record's stored Super-features and keypoints for a modality."""

    record_id: int
    superfeatures: Path
    keypoints: Path

    def load(self) -> ModalityFeatures:
        from . import io

        for p in (self.superfeatures, self.keypoints):
            if not Path(p).exists():
                raise UMFError("missing-artifact", f"place {self.record_id}: {p}")
        _, kp = io.read_keypoints(self.keypoints)
        return ModalityFeatures(io.read_superfeatures(self.superfeatures), kp)


def local_features(record: PlaceRecord, modality: str) -> ModalityFeatures | None:
    if modality not in MODALITIES:
        raise UMFError("bad-modality", modality)
    handle = record.local_vision if modality == "vision" else record.local_lidar
    if isinstance(handle, ArtifactRef):
        return handle.load()
    return handle


def superfeature_sets(record: PlaceRecord) -> dict[str, SuperFeatureSet | None]:
    out = {}
    for m in MODALITIES:
        f = local_features(record, m)
        out[m] = None if f is None else f.superfeatures
    return out


def keypoint_sets(record: PlaceRecord) -> dict[str, KeypointSet | None]:
    out = {}
    for m in MODALITIES:
        f = local_features(record, m)
        out[m] = None if f is None else f.keypoints
    return out
