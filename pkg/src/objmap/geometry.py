"""Pinhole camera model, rigid poses and depth (un)projection."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_RANGE = 5.0


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term for stability
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class RigidPose:
    """Rotation as a unit quaternion (w, x, y, z) plus translation in meters.

    Poses passed around the mapper are camera-to-world.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("degenerate quaternion")
        q = q / n
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(_matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "RigidPose":
        """Camera-to-world pose with the optical axis (+z) toward ``target``
        and image rows running against the world ``up`` vector."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        # camera y points down in the image
        y = np.cross(z, x)
        return cls(_matrix_to_quat(np.stack([x, y, z], axis=1)), eye)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply ``other`` first."""
        q = _quat_mul(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return RigidPose(q, t)

    __matmul__ = compose

    def inverse(self) -> "RigidPose":
        w, x, y, z = self.rotation
        q = np.array([w, -x, -y, -z])
        return RigidPose(q, -(_quat_to_matrix(q) @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        # written out rather than a matmul so a point maps to the same bits
        # whether it is transformed alone or in a batch
        p = np.asarray(points, dtype=np.float64)
        r, t = self.rotation_matrix, self.translation
        cols = np.ascontiguousarray(np.moveaxis(p, -1, 0))
        out = np.empty_like(cols)
        tmp = np.empty_like(cols[0])
        for i in range(3):
            o = out[i]
            np.multiply(cols[0], r[i, 0], out=o)
            np.multiply(cols[1], r[i, 1], out=tmp)
            o += tmp
            np.multiply(cols[2], r[i, 2], out=tmp)
            o += tmp
            o += t[i]
        return np.moveaxis(out, 0, -1)


@dataclass(frozen=True)
class DepthFrame:
    """Depth raster in meters; 0 marks an invalid reading."""

    depth: np.ndarray
    frame_id: str = ""

    @classmethod
    def from_millimeters(cls, raw: np.ndarray, frame_id: str = "") -> "DepthFrame":
        return cls(np.asarray(raw, dtype=np.float64) / 1000.0, frame_id)

    def to_millimeters(self) -> np.ndarray:
        mm = np.rint(np.nan_to_num(self.depth) * 1000.0)
        return np.clip(mm, 0, 65535).astype(np.uint16)


@dataclass(frozen=True)
class VertexMap:
    points: np.ndarray  # (H, W, 3) camera frame
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def unproject_pixel(u: float, v: float, z: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point of pixel coordinate (u, v) at depth z; integer
    coordinates are pixel centers."""
    return np.array([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])


def unproject(depth: DepthFrame | np.ndarray, intr: CameraIntrinsics,
              max_range: float = DEFAULT_MAX_RANGE) -> VertexMap:
    d = depth.depth if isinstance(depth, DepthFrame) else np.asarray(depth, dtype=np.float64)
    if d.shape != intr.shape:
        raise DimensionError(f"depth image is {d.shape}, intrinsics expect {intr.shape}")
    d = np.nan_to_num(d.astype(np.float64), nan=0.0)
    valid = (d > 0) & (d <= max_range)
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    z = np.where(valid, d, 0.0)
    pts = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=-1)
    pts.flags.writeable = False
    valid.flags.writeable = False
    return VertexMap(pts, valid)


class Projection(enum.Enum):
    IN_FRAME = "in_frame"
    OUT_OF_FRAME = "out_of_frame"
    BEHIND = "behind_camera"


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    z: float
    status: Projection

    @property
    def ok(self) -> bool:
        return self.status is Projection.IN_FRAME


def project(point, pose: RigidPose, intr: CameraIntrinsics) -> ProjectedPoint:
    """Project a world point through a camera-to-world ``pose``."""
    u, v, z, status = project_points(np.asarray(point, dtype=np.float64)[None], pose, intr)
    return ProjectedPoint(float(u[0]), float(v[0]), float(z[0]), list(Projection)[status[0]])


def project_points(points: np.ndarray, pose: RigidPose, intr: CameraIntrinsics):
    """Vectorized :func:`project`; status is an index into ``list(Projection)``."""
    cam = pose.inverse().transform(points)
    z = cam[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = intr.fx * cam[:, 0] / safe_z + intr.cx
    v = intr.fy * cam[:, 1] / safe_z + intr.cy
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    inside = front & (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)
    status = np.where(front, np.where(inside, 0, 1), 2)
    return u, v, z, status
