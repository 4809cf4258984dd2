"""Instance mask ingestion and semantic refinement of frame segments."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class MaskFormatError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceInfo:
    class_id: int
    score: float = 1.0
    class_name: str = ""


@dataclass(frozen=True)
class MaskFrame:
    """Per-pixel instance ids (0 = none) plus the id -> class/score table."""

    raster: np.ndarray
    table: dict = field(default_factory=dict)

    def __post_init__(self):
        present = set(np.unique(self.raster).tolist()) - {0}
        missing = present - set(self.table)
        if missing:
            raise MaskFormatError(f"raster ids {sorted(missing)} missing from the instance table")
        if any(k <= 0 or v.class_id <= 0 for k, v in self.table.items()):
            raise MaskFormatError("instance ids and class ids must be positive")

    @classmethod
    def empty(cls, shape) -> "MaskFrame":
        return cls(np.zeros(shape, dtype=np.int32), {})

    @classmethod
    def from_binary_masks(cls, masks, classes, scores, names=None) -> "MaskFrame":
        """Fuse per-instance binary masks into one id raster (ids 1..K).

        Contested pixels go to the higher-scoring instance (lower id on ties).
        """
        masks = np.asarray(masks, dtype=bool)
        k = len(masks)
        raster = np.zeros(masks.shape[1:], dtype=np.int32)
        best = np.full(masks.shape[1:], -np.inf)
        for i in range(k):
            claim = masks[i] & (scores[i] > best)
            raster[claim] = i + 1
            best[claim] = scores[i]
        names = names or [""] * k
        table = {i + 1: InstanceInfo(int(classes[i]), float(scores[i]), names[i]) for i in range(k)}
        return cls(raster, table)

    @property
    def num_instances(self) -> int:
        return len(self.table)

    def mask(self, k: int) -> np.ndarray:
        return self.raster == k


def mask_paths(directory, frame: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{frame}.masks.png", d / f"{frame}.masks.json"


def load_masks(directory, frame: str, shape=None) -> MaskFrame:
    """Read ``<frame>.masks.png`` + ``<frame>.masks.json``.

    A frame without a mask file has no predictions and yields an empty
    MaskFrame (``shape`` is then required).
    """
    png, table_path = mask_paths(directory, frame)
    if not png.exists():
        if shape is None:
            raise MaskFormatError("shape needed to build an empty mask frame")
        return MaskFrame.empty(shape)
    try:
        raster = np.asarray(Image.open(png)).astype(np.int32)
        entries = json.loads(table_path.read_text()) if table_path.exists() else []
    except (OSError, json.JSONDecodeError) as exc:
        raise MaskFormatError(f"cannot read masks for frame {frame}: {exc}") from exc
    if raster.ndim != 2:
        raise MaskFormatError(f"{png} is not a single-channel id raster")
    if shape is not None and raster.shape != tuple(shape):
        raise MaskFormatError(f"{png} is {raster.shape}, expected {tuple(shape)}")
    if isinstance(entries, dict):
        entries = entries.get("instances", [])
    table = {}
    try:
        for e in entries:
            table[int(e["id"])] = InstanceInfo(int(e["class_id"]), float(e.get("score", 1.0)),
                                               str(e.get("class_name", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise MaskFormatError(f"malformed instance table {table_path}: {exc}") from exc
    return MaskFrame(raster, table)


def save_masks(masks: MaskFrame, directory, frame: str):
    png, table_path = mask_paths(directory, frame)
    png.parent.mkdir(parents=True, exist_ok=True)
    if masks.raster.max(initial=0) > 65535 or masks.raster.min(initial=0) < 0:
        raise MaskFormatError("instance ids must fit in 16 bits")
    Image.fromarray(masks.raster.astype(np.uint16)).save(png)
    entries = [{"id": k, "class_id": v.class_id, "class_name": v.class_name, "score": v.score}
               for k, v in sorted(masks.table.items())]
    table_path.write_text(json.dumps(entries, indent=1))


def compute_overlaps(region_raster: np.ndarray, masks: MaskFrame) -> dict:
    """Sparse ``{(region_id, mask_id): |r ∩ M| / |r|}`` over nonzero intersections."""
    if region_raster.shape != masks.raster.shape:
        raise ValueError("region raster and mask raster differ in shape")
    reg = region_raster.ravel().astype(np.int64)
    inst = masks.raster.ravel().astype(np.int64)
    in_region = reg > 0
    sizes = np.bincount(reg[in_region])
    both = in_region & (inst > 0)
    if not both.any():
        return {}
    width = int(inst.max()) + 1
    pairs, counts = np.unique(reg[both] * width + inst[both], return_counts=True)
    return {(int(p // width), int(p % width)): c / sizes[p // width] for p, c in zip(pairs, counts)}


def refine_segments(segments: list, overlaps: dict, masks: MaskFrame, threshold: float = 0.5) -> list:
    """Give each segment the instance/class of its best-overlapping mask when
    that overlap exceeds ``threshold``; otherwise instance = class = 0.

    Ties between masks go to the lowest mask id.
    """
    best: dict[int, tuple[float, int]] = {}
    for (rid, k), p in sorted(overlaps.items()):
        if rid not in best or p > best[rid][0]:
            best[rid] = (p, k)
    out = []
    for seg in segments:
        p, k = best.get(seg.id, (0.0, 0))
        if p > threshold:
            out.append(dataclasses.replace(seg, instance=k, class_id=masks.table[k].class_id))
        else:
            out.append(dataclasses.replace(seg, instance=0, class_id=0))
    return out


def frame_instances(segments: list) -> list:
    """The unique set of frame-local instance ids carried by ``segments``."""
    return sorted({s.instance for s in segments if s.instance})
