"""3D instance segmentation scoring: per-class AP at an IoU threshold and mAP."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .volume import pack_keys


@dataclass
class Instance:
    id: int
    class_id: int
    voxels: np.ndarray  # (N, 3) integer voxel indices or packed int64 keys
    score: float = 0.0

    def keys(self) -> np.ndarray:
        v = np.asarray(self.voxels)
        return np.unique(pack_keys(v) if v.ndim == 2 else v.astype(np.int64))


def iou(a, b) -> float:
    """|a ∩ b| / |a ∪ b| of two voxel sets (arrays of indices or packed keys)."""
    ka = a.keys() if isinstance(a, Instance) else Instance(0, 0, a).keys()
    kb = b.keys() if isinstance(b, Instance) else Instance(0, 0, b).keys()
    inter = len(np.intersect1d(ka, kb, assume_unique=True))
    union = len(ka) + len(kb) - inter
    return inter / union if union else 0.0


def match_predictions(preds: list, gts: list, class_id: int, iou_thresh: float = 0.5):
    """Greedy matching in descending score order (ties by prediction id).

    Returns the list of TP flags in rank order and the GT count.
    """
    p = sorted((x for x in preds if x.class_id == class_id), key=lambda x: (-x.score, x.id))
    g = sorted((x for x in gts if x.class_id == class_id), key=lambda x: x.id)
    gkeys = [x.keys() for x in g]
    taken = [False] * len(g)
    flags = []
    for pred in p:
        pk = pred.keys()
        best, best_j = -1.0, -1
        for j, gk in enumerate(gkeys):
            if taken[j]:
                continue
            inter = len(np.intersect1d(pk, gk, assume_unique=True))
            v = inter / (len(pk) + len(gk) - inter)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(g)


def ap_from_flags(flags, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, np.finfo(float).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(preds: list, gts: list, class_id: int, iou_thresh: float = 0.5) -> float:
    """AP for one class; NaN when the class has no ground truth."""
    flags, n_gt = match_predictions(preds, gts, class_id, iou_thresh)
    return ap_from_flags(flags, n_gt)


def evaluate(preds: list, gts: list, iou_thresh: float = 0.5) -> dict:
    """Per-class AP for every class present in the ground truth."""
    classes = sorted({g.class_id for g in gts if g.class_id})
    return {c: average_precision(preds, gts, c, iou_thresh) for c in classes}


def mean_ap(per_class) -> float:
    vals = [v for v in (per_class.values() if isinstance(per_class, dict) else per_class) if not np.isnan(v)]
    if not vals:
        raise ValueError("no class with a defined AP")
    return float(np.mean(vals))


def predictions_from_volume(volume) -> list:
    """Group map segments into instances; rank score is the voxel count."""
    segs = volume.extract_segments()
    groups: dict[int, list] = {}
    for s in segs:
        if s.instance:
            groups.setdefault(s.instance, []).append(s)
    out = []
    for inst, members in sorted(groups.items()):
        votes: dict[int, int] = {}
        for s in members:
            for (l, c), n in volume.counts.psi.items():
                if l == s.label:
                    votes[c] = votes.get(c, 0) + n
        cls = min(votes, key=lambda c: (-votes[c], c)) if votes else 0
        vox = np.concatenate([s.voxels for s in members])
        keys = np.unique(pack_keys(vox))
        out.append(Instance(inst, cls, keys, float(len(keys))))
    return out


def ground_truth_instances(gt, observed_keys: np.ndarray | None = None) -> list:
    """Instances from a GroundTruthVolume, optionally restricted to observed voxels.

    Instances with class 0 (unrecognised scene parts) are skipped.
    """
    out = []
    for inst, vox in sorted(gt.instance_voxels().items()):
        cls = gt.classes.get(inst, 0)
        if not cls:
            continue
        keys = np.unique(pack_keys(vox))
        if observed_keys is not None:
            keys = np.intersect1d(keys, observed_keys, assume_unique=True)
        if len(keys):
            out.append(Instance(inst, cls, keys, float(len(keys))))
    return out


def format_table(per_class: dict, names: dict | None = None) -> tuple[str, str]:
    """(CSV, pretty text) renderings of per-class AP (x100) plus the mean."""
    names = names or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "class_name", "ap"])
    lines = [f"{'class':<20}{'AP':>8}"]
    for c, ap in sorted(per_class.items()):
        w.writerow([c, names.get(c, ""), "" if np.isnan(ap) else f"{100 * ap:.1f}"])
        lines.append(f"{names.get(c, str(c)):<20}{'-' if np.isnan(ap) else f'{100 * ap:.1f}':>8}")
    try:
        m = mean_ap(per_class)
        w.writerow(["mean", "", f"{100 * m:.1f}"])
        lines.append(f"{'mAP':<20}{100 * m:>8.1f}")
    except ValueError:
        lines.append(f"{'mAP':<20}{'-':>8}")
    return buf.getvalue(), "\n".join(lines) + "\n"
