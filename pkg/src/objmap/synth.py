"""Analytic scenes: exact ray casting of primitives and ground-truth volumes.

Everything here is closed form so the renderer can serve as the reference
for end-to-end tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataset import write_dataset
from .geometry import CameraIntrinsics, DepthFrame, RigidPose
from .instances import InstanceInfo, MaskFrame

_NO_HIT = np.inf


@dataclass(frozen=True)
class Primitive:
    instance: int
    class_id: int = 0
    class_name: str = ""

    def local_pose(self) -> RigidPose:
        return RigidPose()

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest positive ray parameter per ray (inf on miss). ``dirs`` need not be unit."""
        raise NotImplementedError

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self):
        """Axis-aligned (lo, hi) in world frame, or None when unbounded."""
        return None


@dataclass(frozen=True)
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, _NO_HIT))
        return np.where(hit, t, _NO_HIT)

    def sdf(self, points):
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Plane(Primitive):
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def _n(self):
        n = np.asarray(self.normal, dtype=np.float64)
        return n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        n = self._n()
        denom = dirs @ n
        num = (np.asarray(self.point) - origin) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 0), t, _NO_HIT)

    def sdf(self, points):
        return (points - np.asarray(self.point)) @ self._n()


def _box_slab(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = tmax >= np.maximum(tmin, 0.0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit & (t > 0), t, _NO_HIT)


def _box_sdf(p, lo, hi):
    c = (lo + hi) / 2
    h = (hi - lo) / 2
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


@dataclass(frozen=True)
class _Posed(Primitive):
    position: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)

    def local_pose(self):
        return RigidPose(np.asarray(self.rotation, dtype=np.float64), np.asarray(self.position, dtype=np.float64))

    def _to_local(self, origin, dirs=None):
        inv = self.local_pose().inverse()
        o = inv.transform(origin[None])[0]
        d = None if dirs is None else dirs @ inv.rotation_matrix.T
        return o, d

    def _parts(self):
        raise NotImplementedError

    def intersect(self, origin, dirs):
        o, d = self._to_local(origin, dirs)
        return np.min([_box_slab(o, d, lo, hi) for lo, hi in self._parts()], axis=0)

    def sdf(self, points):
        local = self.local_pose().inverse().transform(points.reshape(-1, 3))
        s = np.min([_box_sdf(local, lo, hi) for lo, hi in self._parts()], axis=0)
        return s.reshape(points.shape[:-1])

    def bounds(self):
        corners = []
        for lo, hi in self._parts():
            for i in range(8):
                corners.append([hi[k] if (i >> k) & 1 else lo[k] for k in range(3)])
        w = self.local_pose().transform(np.asarray(corners))
        return w.min(axis=0), w.max(axis=0)


@dataclass(frozen=True)
class Box(_Posed):
    """Oriented box; ``position`` is its center."""

    size: tuple = (1.0, 1.0, 1.0)

    def _parts(self):
        h = np.asarray(self.size, dtype=np.float64) / 2
        return [(-h, h)]


@dataclass(frozen=True)
class LPrism(_Posed):
    """Union of two orthogonal arms sharing the corner at the local origin.

    Arm one spans ``size[0]`` along local x, arm two ``size[1]`` along local y;
    both are ``thickness`` thick and extruded ``size[2]`` along local z.
    """

    size: tuple = (0.4, 0.4, 0.2)
    thickness: float = 0.1

    def _parts(self):
        sx, sy, sz = (float(s) for s in self.size)
        t = float(self.thickness)
        return [
            (np.array([0.0, 0.0, 0.0]), np.array([sx, t, sz])),
            (np.array([0.0, 0.0, 0.0]), np.array([t, sy, sz])),
        ]


_TYPES = {"sphere": Sphere, "plane": Plane, "box": Box, "lprism": LPrism}


@dataclass
class SceneSpec:
    primitives: list
    trajectory: list
    intrinsics: CameraIntrinsics
    noise_coeff: float = 0.0  # sigma = noise_coeff * z**2
    seed: int = 0
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.instance for p in self.primitives]
        if len(ids) != len(set(ids)):
            raise ValueError("primitive instance ids must be unique")
        if not self.trajectory:
            raise ValueError("trajectory is empty")

    def instance_classes(self) -> dict:
        return {p.instance: p.class_id for p in self.primitives}


def camera_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame ray directions with unit z, shape (H*W, 3)."""
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return d.reshape(-1, 3)


def render_depth(scene: SceneSpec, pose: RigidPose, rng: np.random.Generator | None = None):
    """Ray cast every pixel; returns (DepthFrame, instance id raster).

    Rays have unit camera-z, so the nearest ray parameter is the z-depth.
    """
    intr = scene.intrinsics
    dirs = camera_rays(intr) @ pose.rotation_matrix.T
    origin = pose.translation
    best = np.full(len(dirs), np.inf)
    ids = np.zeros(len(dirs), dtype=np.int32)
    for prim in scene.primitives:
        t = prim.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, prim.instance, ids)
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    if scene.noise_coeff > 0:
        rng = rng if rng is not None else np.random.default_rng(scene.seed)
        depth = np.where(hit, depth + rng.normal(0.0, 1.0, depth.shape) * scene.noise_coeff * depth ** 2, 0.0)
        depth = np.maximum(depth, 0.0)
    return DepthFrame(depth.reshape(intr.shape)), ids.reshape(intr.shape)


def render_sequence(scene: SceneSpec):
    rng = np.random.default_rng(scene.seed)
    for pose in scene.trajectory:
        yield pose, *render_depth(scene, pose, rng)


@dataclass
class GroundTruthVolume:
    voxel_size: float
    indices: np.ndarray  # (N, 3) integer voxel coordinates
    instances: np.ndarray  # (N,)
    classes: dict  # instance -> class id

    def instance_voxels(self) -> dict:
        out = {}
        order = np.argsort(self.instances, kind="stable")
        inst = self.instances[order]
        cuts = np.flatnonzero(np.diff(inst)) + 1
        for chunk in np.split(order, cuts):
            if len(chunk):
                out[int(self.instances[chunk[0]])] = self.indices[chunk]
        return out

    def save(self, path):
        cls = np.array(sorted(self.classes.items()), dtype=np.int64).reshape(-1, 2)
        np.savez_compressed(path, voxel_size=self.voxel_size, indices=self.indices,
                            instances=self.instances, classes=cls)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(float(z["voxel_size"]), z["indices"], z["instances"],
                       {int(a): int(b) for a, b in z["classes"]})


def ground_truth_volume(scene: SceneSpec, voxel_size: float, truncation: float | None = None,
                        bounds=None, chunk: int = 1 << 20) -> GroundTruthVolume:
    """Label each voxel with the primitive whose surface lies within
    ``truncation`` of the voxel center (nearest surface wins, ties to the
    lower instance id)."""
    trunc = 4 * voxel_size if truncation is None else truncation
    if bounds is None:
        boxes = [p.bounds() for p in scene.primitives if p.bounds() is not None]
        if not boxes:
            raise ValueError("unbounded scene needs explicit bounds")
        lo = np.min([b[0] for b in boxes], axis=0) - trunc
        hi = np.max([b[1] for b in boxes], axis=0) + trunc
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    ilo = np.floor(lo / voxel_size).astype(np.int64)
    ihi = np.floor(hi / voxel_size).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(ilo, ihi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    prims = sorted(scene.primitives, key=lambda p: p.instance)
    keep_idx, keep_inst = [], []
    for start in range(0, len(grid), chunk):
        idx = grid[start:start + chunk]
        centers = (idx + 0.5) * voxel_size
        d = np.stack([np.abs(p.sdf(centers)) for p in prims], axis=1)
        best = np.argmin(d, axis=1)  # first minimum = lowest instance id
        near = d[np.arange(len(d)), best] <= trunc
        keep_idx.append(idx[near])
        keep_inst.append(np.array([p.instance for p in prims])[best[near]])
    return GroundTruthVolume(voxel_size, np.concatenate(keep_idx), np.concatenate(keep_inst).astype(np.int64),
                             scene.instance_classes())


# --- declarative scene files ---------------------------------------------

def _pose_from_entry(entry) -> list:
    if "orbit" in entry:
        o = entry["orbit"]
        center = np.asarray(o["center"], dtype=np.float64)
        n = int(o["frames"])
        radius = float(o["radius"])
        height = float(o.get("height", 0.0))
        start = np.deg2rad(float(o.get("start_deg", 0.0)))
        sweep = np.deg2rad(float(o.get("sweep_deg", 360.0)))
        up = tuple(o.get("up", (0.0, 0.0, 1.0)))
        step = sweep / n if abs(sweep - 2 * np.pi) < 1e-9 else sweep / max(n - 1, 1)
        poses = []
        for k in range(n):
            a = start + k * step
            eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
            poses.append(RigidPose.look_at(eye, center, up=up))
        return poses
    if "look_at" in entry:
        la = entry["look_at"]
        up = tuple(la.get("up", (0.0, 0.0, 1.0)))
        pose = RigidPose.look_at(la["eye"], la["target"], up=up)
        return [pose] * int(entry.get("repeat", 1))
    pose = RigidPose(entry.get("rotation", (1.0, 0.0, 0.0, 0.0)), entry.get("translation", (0.0, 0.0, 0.0)))
    return [pose] * int(entry.get("repeat", 1))


def scene_from_dict(cfg: dict) -> SceneSpec:
    intr = CameraIntrinsics(**cfg["intrinsics"])
    prims = []
    names = {}
    for p in cfg["primitives"]:
        p = dict(p)
        kind = p.pop("type")
        if kind not in _TYPES:
            raise ValueError(f"unknown primitive type {kind!r}")
        p["instance"] = int(p.pop("instance"))
        p["class_id"] = int(p.pop("class", p.pop("class_id", 0)))
        p["class_name"] = str(p.get("class_name", ""))
        if p["class_id"] and p["class_name"]:
            names[p["class_id"]] = p["class_name"]
        for k, v in list(p.items()):
            if isinstance(v, list):
                p[k] = tuple(float(x) for x in v)
        prims.append(_TYPES[kind](**p))
    traj = []
    for entry in cfg["trajectory"]:
        traj.extend(_pose_from_entry(entry))
    noise = cfg.get("noise") or {}
    return SceneSpec(prims, traj, intr, float(noise.get("coeff", 0.0)), int(noise.get("seed", 0)), names)


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        return scene_from_dict(yaml.safe_load(f))


def scene_to_dict(scene: SceneSpec) -> dict:
    kinds = {v: k for k, v in _TYPES.items()}
    prims = []
    for p in scene.primitives:
        d = {"type": kinds[type(p)]}
        for k, v in p.__dict__.items():
            if k == "class_id":
                d["class"] = v
            elif isinstance(v, (tuple, np.ndarray)):
                d[k] = [float(x) for x in v]
            else:
                d[k] = v
        prims.append(d)
    i = scene.intrinsics
    return {
        "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height},
        "noise": {"coeff": scene.noise_coeff, "seed": scene.seed},
        "primitives": prims,
        "trajectory": [{"translation": [float(x) for x in p.translation],
                        "rotation": [float(x) for x in p.rotation]} for p in scene.trajectory],
    }


def save_scene(scene: SceneSpec, path):
    Path(path).write_text(yaml.safe_dump(scene_to_dict(scene), sort_keys=False))


def oracle_masks(scene: SceneSpec, ids: np.ndarray) -> MaskFrame:
    """Perfect detector: one mask per visible primitive with a nonzero class."""
    classes = {p.instance: (p.class_id, p.class_name) for p in scene.primitives}
    raster = np.where(np.isin(ids, [k for k, (c, _) in classes.items() if c]), ids, 0).astype(np.int32)
    table = {int(k): InstanceInfo(classes[k][0], 1.0, classes[k][1]) for k in np.unique(raster) if k}
    return MaskFrame(raster, table)


def write_synthetic_dataset(scene: SceneSpec, out, masks: bool = True, gt_voxel_size: float | None = 0.01) -> Path:
    """Render ``scene`` into a dataset directory, plus scene.yaml and (unless
    ``gt_voxel_size`` is None) groundtruth.npz."""
    out = Path(out)

    def frames():
        for i, (pose, depth, ids) in enumerate(render_sequence(scene)):
            yield f"{i:06d}", pose, depth, oracle_masks(scene, ids) if masks else None

    write_dataset(out, scene.intrinsics, frames())
    save_scene(scene, out / "scene.yaml")
    if gt_voxel_size is not None:
        ground_truth_volume(scene, gt_voxel_size).save(out / "groundtruth.npz")
    return out
