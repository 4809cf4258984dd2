"""On-disk RGB-D dataset layout.

    <root>/intrinsics.txt          fx fy cx cy width height
    <root>/poses.txt               frame tx ty tz qw qx qy qz   (camera-to-world)
    <root>/depth/<frame>.png       16-bit depth, millimeters
    <root>/masks/<frame>.masks.png + <frame>.masks.json   (optional)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, DepthFrame, RigidPose
from .instances import MaskFrame, load_masks, save_masks


class DataError(Exception):
    pass


def _rows(path: Path):
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


def _frame_sort_key(frame: str):
    return (0, int(frame), frame) if frame.isdigit() else (1, 0, frame)


@dataclass
class Dataset:
    root: Path
    intrinsics: CameraIntrinsics
    poses: dict  # frame id -> RigidPose
    frames: list  # frame ids in timestamp order

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        try:
            rows = list(_rows(root / "intrinsics.txt"))
            fx, fy, cx, cy, w, h = rows[0]
            intr = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
        except (OSError, ValueError, IndexError) as exc:
            raise DataError(f"cannot read intrinsics in {root}: {exc}") from exc
        poses = {}
        try:
            for r in _rows(root / "poses.txt"):
                frame = r[0]
                tx, ty, tz, qw, qx, qy, qz = (float(x) for x in r[1:8])
                poses[frame] = RigidPose((qw, qx, qy, qz), (tx, ty, tz))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read poses in {root}: {exc}") from exc
        depth_dir = root / "depth"
        if not depth_dir.is_dir():
            raise DataError(f"{depth_dir} missing")
        frames = sorted((p.stem for p in depth_dir.glob("*.png")), key=_frame_sort_key)
        unposed = [f for f in frames if f not in poses]
        if unposed:
            raise DataError(f"depth frames without pose: {unposed[:5]}")
        return cls(root, intr, poses, frames)

    def depth(self, frame: str) -> DepthFrame:
        raw = np.asarray(Image.open(self.root / "depth" / f"{frame}.png"))
        if raw.shape != self.intrinsics.shape:
            raise DataError(f"depth frame {frame} is {raw.shape}, expected {self.intrinsics.shape}")
        return DepthFrame.from_millimeters(raw, frame)

    def masks(self, frame: str) -> MaskFrame:
        return load_masks(self.root / "masks", frame, self.intrinsics.shape)


def write_dataset(root, intr: CameraIntrinsics, frames):
    """``frames`` yields (frame id, pose, DepthFrame, MaskFrame | None)."""
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.txt").write_text(
        " ".join(repr(float(x)) for x in (intr.fx, intr.fy, intr.cx, intr.cy)) + f" {intr.width} {intr.height}\n")
    lines = []
    for frame, pose, depth, masks in frames:
        Image.fromarray(depth.to_millimeters()).save(root / "depth" / f"{frame}.png")
        t, q = pose.translation, pose.rotation
        lines.append(" ".join([frame] + [repr(float(x)) for x in (*t, *q)]))
        if masks is not None:
            save_masks(masks, root / "masks", frame)
    (root / "poses.txt").write_text("\n".join(lines) + "\n")
