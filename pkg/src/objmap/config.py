from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import yaml

from .segmentation import SegmentationParams
from .volume import IntegrationParams


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.01
    truncation_voxels: float = 4.0
    max_weight: float = 10000.0
    max_range: float = 5.0
    carve_free_space: bool = True
    carve_pixel_stride: int = 8
    use_masks: bool = True  # False maps geometry only, ignoring any masks on disk
    # mask overlap needed to give a segment an instance
    overlap_threshold: float = 0.5
    # 3D overlap (points) needed to propagate a map label
    association_threshold: float = 20.0
    association_stride: int = 1
    concave_angle_deg: float = 10.0
    min_distance: float = 0.03
    distance_per_meter: float = 0.05
    min_region_size: int = 100
    normal_step: int = 1
    smoothing_radius: int = 0
    frame_stride: int = 1
    threads: int = 1
    realtime: bool = False
    fps: float = 30.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if v < 0 or (v == 0 and f.name != "smoothing_radius"):
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0 < self.overlap_threshold < 1:
            raise ValueError("overlap_threshold must lie in (0, 1)")

    def segmentation(self) -> SegmentationParams:
        return SegmentationParams(self.concave_angle_deg, self.min_distance, self.distance_per_meter,
                                  self.min_region_size, self.normal_step, self.smoothing_radius)

    def integration(self) -> IntegrationParams:
        return IntegrationParams(self.truncation_voxels, self.max_weight, self.max_range,
                                 self.carve_free_space, self.carve_pixel_stride)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, value):
    kind = {f.name: f.type for f in fields(PipelineConfig)}.get(name)
    if kind is None:
        raise KeyError(f"unknown config key {name!r}")
    if isinstance(value, str):
        if kind == "bool":
            return value.strip().lower() in ("1", "true", "yes", "on")
        return {"int": int, "float": float}.get(kind, str)(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    data.update(overrides or {})
    return PipelineConfig(**{k: _coerce(k, v) for k, v in data.items()})


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
