"""Per-frame mapping loop: segment -> refine -> associate -> integrate."""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import associate_frame
from .config import PipelineConfig
from .dataset import Dataset, DataError
from .geometry import CameraIntrinsics, DepthFrame, RigidPose, unproject
from .instances import MaskFormatError, MaskFrame, compute_overlaps, refine_segments
from .segmentation import estimate_normals, segment_frame, smooth_depth
from .volume import TsdfVolume

log = logging.getLogger(__name__)

STAGES = ("load", "segmentation", "refinement", "association", "integration")


@dataclass
class Preprocessed:
    frame: str
    pose: RigidPose
    depth: DepthFrame
    segments: list
    raster: np.ndarray
    timings: dict


@dataclass
class FrameRecord:
    frame: str
    timings: dict
    segment_labels: dict
    instance_labels: dict
    semantic: list = field(default_factory=list)  # (segment label, instance label, class) per semantic segment

    @property
    def total(self) -> float:
        return self.timings["total"]


class Mapper:
    """Holds the map and runs the map-mutating half of the loop."""

    def __init__(self, intr: CameraIntrinsics, config: PipelineConfig = PipelineConfig()):
        self.intr = intr
        self.config = config
        self.volume = TsdfVolume(config.voxel_size, config.integration())

    def preprocess(self, frame: str, pose: RigidPose, depth: DepthFrame, masks: MaskFrame | None,
                   timings: dict | None = None) -> Preprocessed:
        timings = dict(timings or {})
        cfg = self.config
        t0 = time.perf_counter()
        params = cfg.segmentation()
        seg_depth = depth  # smoothing feeds segmentation only; the map fuses raw depth
        if params.smoothing_radius:
            seg_depth = DepthFrame(smooth_depth(depth.depth, params.smoothing_radius, params), depth.frame_id)
        vmap = unproject(seg_depth, self.intr, cfg.max_range)
        nmap = estimate_normals(vmap, params.normal_step, params)
        seg = segment_frame(vmap, nmap, params)
        t1 = time.perf_counter()
        segments = seg.segments
        if masks is not None and masks.num_instances:
            overlaps = compute_overlaps(seg.raster, masks)
            segments = refine_segments(segments, overlaps, masks, cfg.overlap_threshold)
        t2 = time.perf_counter()
        timings["segmentation"] = t1 - t0
        timings["refinement"] = t2 - t1
        return Preprocessed(frame, pose, depth, segments, seg.raster, timings)

    def integrate(self, pre: Preprocessed) -> FrameRecord:
        cfg = self.config
        vol = self.volume
        t0 = time.perf_counter()
        assoc = associate_frame(pre.segments, vol, pre.pose, vol.labels,
                                cfg.association_threshold, cfg.association_stride)
        t1 = time.perf_counter()
        lut = np.zeros(len(pre.segments) + 1, dtype=np.uint32)
        for s in pre.segments:
            lut[s.id] = assoc.segment_labels[s.id]
        label_raster = lut[pre.raster]
        vol.integrate_frame(pre.depth, pre.pose, self.intr, label_raster)
        vol.update_counts(pre.segments, assoc.segment_labels, assoc.instance_labels)
        t2 = time.perf_counter()
        timings = dict(pre.timings)
        timings["association"] = t1 - t0
        timings["integration"] = t2 - t1
        semantic = [(assoc.segment_labels[s.id], assoc.instance_labels[s.instance], s.class_id)
                    for s in pre.segments if s.instance]
        return FrameRecord(pre.frame, timings, assoc.segment_labels, assoc.instance_labels, semantic)

    def process(self, frame, pose, depth, masks=None) -> FrameRecord:
        t0 = time.perf_counter()
        rec = self.integrate(self.preprocess(frame, pose, depth, masks, {"load": 0.0}))
        rec.timings["total"] = time.perf_counter() - t0
        return rec


@dataclass
class RunResult:
    volume: TsdfVolume
    records: list
    skipped: list
    map_path: Path | None = None

    @property
    def frames_integrated(self) -> int:
        return len(self.records)


def select_frames(frames: list, stride: int) -> list:
    return frames[::stride]


def _load(ds: Dataset, frame: str, use_masks: bool = True):
    t0 = time.perf_counter()
    depth = ds.depth(frame)
    masks = None
    try:
        if use_masks:
            masks = ds.masks(frame)
    except MaskFormatError as exc:
        log.warning("frame %s: ignoring masks (%s)", frame, exc)
    return depth, masks, time.perf_counter() - t0


def run(dataset, config: PipelineConfig = PipelineConfig(), out_dir=None) -> RunResult:
    """Map a dataset directory; with ``out_dir`` the map, timing log, frame log
    and summary are written there."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    mapper = Mapper(ds.intrinsics, config)
    frames = select_frames(ds.frames, config.frame_stride)
    records, skipped = [], []

    def prep(frame):
        t_start = time.perf_counter()
        try:
            depth, masks, t_load = _load(ds, frame, config.use_masks)
        except (OSError, DataError, ValueError) as exc:
            return frame, exc, t_start
        return frame, mapper.preprocess(frame, ds.poses[frame], depth, masks, {"load": t_load}), t_start

    def finish(frame, pre, t_start):
        if isinstance(pre, Exception):
            log.warning("skipping unreadable frame %s: %s", frame, pre)
            skipped.append(frame)
            return
        rec = mapper.integrate(pre)
        rec.timings["total"] = time.perf_counter() - t_start
        records.append(rec)
        log.info("frame %s: %d segments, %.0f ms", frame, len(pre.segments), 1000 * rec.total)

    if config.realtime:
        # frames arrive at ``fps``; anything that arrives while busy is dropped
        clock0 = time.perf_counter()
        next_free = 0.0
        for i, frame in enumerate(frames):
            arrival = i / config.fps
            if arrival < next_free:
                continue
            finish(*prep(frame))
            next_free = time.perf_counter() - clock0
    elif config.threads > 1:
        # preprocessing runs ahead in workers; map updates stay in frame order
        with ThreadPoolExecutor(config.threads) as pool:
            pending = deque()
            it = iter(frames)
            for frame in it:
                pending.append(pool.submit(prep, frame))
                if len(pending) >= config.threads:
                    break
            while pending:
                finish(*pending.popleft().result())
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(prep, nxt))
    else:
        for frame in frames:
            finish(*prep(frame))

    result = RunResult(mapper.volume, records, skipped)
    if out_dir is not None:
        result.map_path = write_outputs(result, out_dir, config)
    return result


def write_outputs(result: RunResult, out_dir, config: PipelineConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    map_path = out / "map.objmap"
    result.volume.save(map_path)
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", *STAGES, "total"])
        for r in result.records:
            w.writerow([r.frame, *(f"{1000 * r.timings.get(s, 0.0):.3f}" for s in STAGES),
                        f"{1000 * r.total:.3f}"])
    with open(out / "frame_log.jsonl", "w") as f:
        for r in result.records:
            f.write(json.dumps({
                "frame": r.frame,
                "segment_labels": {str(k): v for k, v in sorted(r.segment_labels.items())},
                "instance_labels": {str(k): v for k, v in sorted(r.instance_labels.items())},
                "semantic": r.semantic,
            }) + "\n")
    totals = [r.total for r in result.records]
    summary = {
        "frames_integrated": len(result.records),
        "frames_skipped": result.skipped,
        "blocks": result.volume.num_blocks,
        "segment_labels_issued": result.volume.labels.next_segment_label - 1,
        "instance_labels_issued": result.volume.labels.next_instance_label - 1,
        "mean_frame_ms": 1000 * float(np.mean(totals)) if totals else 0.0,
        "mean_stage_ms": {s: 1000 * float(np.mean([r.timings.get(s, 0.0) for r in result.records]))
                          if result.records else 0.0 for s in STAGES},
        "config": config.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return map_path


def replay_counts(frame_log_path):
    """Rebuild the pair-count tables from a frame log."""
    phi, psi = {}, {}
    with open(frame_log_path) as f:
        for line in f:
            for label, inst, cls in json.loads(line)["semantic"]:
                phi[(label, inst)] = phi.get((label, inst), 0) + 1
                psi[(label, cls)] = psi.get((label, cls), 0) + 1
    return phi, psi
