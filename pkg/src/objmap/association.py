"""Frame-to-map data association of segments and instances."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidPose

TAU_PI = 20


@dataclass
class PersistentLabels:
    """Session-wide label counters; labels start at 1 and are never reused."""

    next_segment_label: int = 1
    next_instance_label: int = 1

    def new_segment_label(self) -> int:
        label = self.next_segment_label
        self.next_segment_label += 1
        return label

    def new_instance_label(self) -> int:
        label = self.next_instance_label
        self.next_instance_label += 1
        return label


@dataclass
class AssociationResult:
    segment_labels: dict  # frame region id -> persistent segment label
    instance_labels: dict  # frame instance id -> persistent instance label
    overlaps: dict = field(default_factory=dict)  # (region id, map label) -> point count
    matched: dict = field(default_factory=dict)  # region id -> winning overlap count


def processing_order(segments: list) -> list:
    """Descending pixel count, ties by region id."""
    return sorted(segments, key=lambda s: (-s.size, s.id))


def compute_3d_overlaps(segments: list, volume, pose: RigidPose, stride: int = 1) -> dict:
    """Count, per (frame segment, map label), the segment points that land in
    a voxel carrying that label. ``pose`` is camera-to-world."""
    if not segments:
        return {}
    pts = [s.points[::stride] for s in segments]
    owner = np.concatenate([np.full(len(p), s.id, dtype=np.int64) for s, p in zip(segments, pts)])
    labels = volume.lookup_labels(pose.transform(np.concatenate(pts)))
    hit = labels > 0
    if not hit.any():
        return {}
    width = int(labels.max()) + 1
    keys, counts = np.unique(owner[hit] * width + labels[hit].astype(np.int64), return_counts=True)
    return {(int(k // width), int(k % width)): int(c) for k, c in zip(keys, counts)}


def associate_segments(overlaps: dict, segments: list, labels: PersistentLabels,
                       threshold: float = TAU_PI, stride: int = 1) -> tuple[dict, dict]:
    """Persistent label per frame segment.

    Every map label propagates to its maximally overlapping frame segment if
    the overlap exceeds ``threshold`` (counts are scaled by ``stride`` first).
    A frame segment claimed by several map labels keeps the largest overlap,
    ties to the smaller label. The rest get fresh labels in processing order.
    Returns (region id -> label, region id -> winning overlap).
    """
    order = {s.id: rank for rank, s in enumerate(processing_order(segments))}
    best_for_label: dict[int, tuple[int, int]] = {}
    for (rid, label), count in overlaps.items():
        if rid not in order:
            continue
        cur = best_for_label.get(label)
        # argmax over frame segments; ties to the earlier segment in processing order
        if cur is None or count > cur[0] or (count == cur[0] and order[rid] < order[cur[1]]):
            best_for_label[label] = (count, rid)
    claims: dict[int, tuple[int, int]] = {}
    for label, (count, rid) in best_for_label.items():
        if count * stride <= threshold:
            continue
        cur = claims.get(rid)
        if cur is None or count > cur[0] or (count == cur[0] and label < cur[1]):
            claims[rid] = (count, label)
    result, matched = {}, {}
    for seg in processing_order(segments):
        if seg.id in claims:
            matched[seg.id], result[seg.id] = claims[seg.id]
        else:
            result[seg.id] = labels.new_segment_label()
    return result, matched


def associate_instances(segments: list, segment_labels: dict, phi, labels: PersistentLabels) -> dict:
    """Map frame instance ids to persistent instance labels through the
    (segment label, instance label) pair counts ``phi``; the mapping is
    injective within the frame."""
    rows = defaultdict(dict)
    for (l, o), c in (phi.items() if hasattr(phi, "items") else phi):
        rows[l][o] = c
    mapping: dict[int, int] = {}
    claimed: set[int] = set()
    pending: list[int] = []
    for seg in processing_order(segments):
        o_i = seg.instance
        if not o_i or o_i in mapping:
            continue
        if o_i not in pending:
            pending.append(o_i)
        row = rows.get(segment_labels[seg.id], {})
        candidates = [(c, -o) for o, c in row.items() if c > 0 and o not in claimed]
        if candidates:
            c, neg_o = max(candidates)
            mapping[o_i] = -neg_o
            claimed.add(-neg_o)
    for o_i in pending:
        if o_i not in mapping:
            mapping[o_i] = labels.new_instance_label()
    return mapping


def associate_frame(segments: list, volume, pose: RigidPose, labels: PersistentLabels,
                    threshold: float = TAU_PI, stride: int = 1) -> AssociationResult:
    overlaps = compute_3d_overlaps(segments, volume, pose, stride)
    seg_labels, matched = associate_segments(overlaps, segments, labels, threshold, stride)
    inst = associate_instances(segments, seg_labels, volume.counts.phi, labels)
    return AssociationResult(seg_labels, inst, overlaps, matched)
