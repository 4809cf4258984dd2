"""Voxel-hashed TSDF volume with per-voxel segment labels and the
segment/instance/class pair-count tables."""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter

from .association import PersistentLabels
from .geometry import DEFAULT_MAX_RANGE, CameraIntrinsics, DepthFrame, RigidPose, unproject

BLOCK_SIZE = 16
_KEY_BIAS = 1 << 20
_KEY_MASK = (1 << 21) - 1


class MapFormatError(ValueError):
    pass


def pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack integer (N, 3) coordinates into sortable int64 keys."""
    b = np.asarray(idx, dtype=np.int64) + _KEY_BIAS
    return b[:, 0] << 42 | b[:, 1] << 21 | b[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([keys >> 42 & _KEY_MASK, keys >> 21 & _KEY_MASK, keys & _KEY_MASK], axis=1) - _KEY_BIAS


@dataclass
class CountTables:
    """Pair counts (segment label, instance label) and (segment label, class)."""

    phi: dict = field(default_factory=lambda: defaultdict(int))
    psi: dict = field(default_factory=lambda: defaultdict(int))

    def update(self, segments: list, segment_labels: dict, instance_labels: dict):
        """One increment per segment that carries a frame instance."""
        for seg in segments:
            if seg.instance == 0:
                continue
            label = segment_labels[seg.id]
            self.phi[(label, instance_labels[seg.instance])] += 1
            self.psi[(label, seg.class_id)] += 1

    @staticmethod
    def _argmax(table: dict, label: int) -> int:
        best, best_c = 0, 0
        for (l, x), c in table.items():
            if l == label and c > 0 and (c > best_c or (c == best_c and x < best)):
                best, best_c = x, c
        return best

    def instance_of(self, label: int) -> int:
        return self._argmax(self.phi, label)

    def class_of(self, label: int) -> int:
        return self._argmax(self.psi, label) if self.instance_of(label) else 0

    def rows(self) -> dict:
        """label -> (instance, class) argmax for every label with a Φ row."""
        inst = _argmax_rows(self.phi)
        cls = _argmax_rows(self.psi)
        return {l: (o, cls.get(l, 0)) for l, o in inst.items()}

    def __eq__(self, other):
        return (isinstance(other, CountTables) and dict(self.phi) == dict(other.phi)
                and dict(self.psi) == dict(other.psi))


def _argmax_rows(table: dict) -> dict:
    best: dict[int, tuple[int, int]] = {}
    for (l, x), c in table.items():
        cur = best.get(l)
        if c > 0 and (cur is None or c > cur[0] or (c == cur[0] and x < cur[1])):
            best[l] = (c, x)
    return {l: x for l, (c, x) in best.items()}


@dataclass
class GlobalSegment:
    label: int
    voxels: np.ndarray  # (N, 3) global voxel indices
    instance: int = 0
    class_id: int = 0

    @property
    def size(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class IntegrationParams:
    truncation_voxels: float = 4.0
    max_weight: float = 10000.0
    max_range: float = DEFAULT_MAX_RANGE
    carve_free_space: bool = True
    carve_pixel_stride: int = 8  # ray subsampling when allocating free-space blocks
    chunk_blocks: int = 256


class TsdfVolume:
    """Sparse TSDF grid of ``BLOCK_SIZE``³ voxel blocks keyed by block coordinates.

    Voxel ``i`` covers ``[i, i+1) * voxel_size`` on every axis; its sample
    point is the center. Block data lives in pooled arrays indexed by slot.
    """

    def __init__(self, voxel_size: float = 0.01, params: IntegrationParams = IntegrationParams()):
        self.voxel_size = float(voxel_size)
        self.params = params
        self.truncation = params.truncation_voxels * self.voxel_size
        self.counts = CountTables()
        self.labels = PersistentLabels()
        self._slots: dict[int, int] = {}
        n = BLOCK_SIZE ** 3
        self._keys = np.zeros((0, 3), dtype=np.int64)
        self.sdf = np.zeros((0, n), dtype=np.float32)
        self.weight = np.zeros((0, n), dtype=np.float32)
        self.label = np.zeros((0, n), dtype=np.uint32)
        self.confidence = np.zeros((0, n), dtype=np.uint32)
        local = np.stack(np.meshgrid(*[np.arange(BLOCK_SIZE)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        self._local = local

    # -- block bookkeeping -------------------------------------------------
    @property
    def num_blocks(self) -> int:
        return len(self._slots)

    @property
    def block_keys(self) -> np.ndarray:
        return self._keys[: self.num_blocks]

    def _grow(self, extra: int):
        n = self.num_blocks + extra
        cap = len(self.sdf)
        if n <= cap:
            return
        new_cap = max(n, 2 * cap, 64)
        for name, fill in (("sdf", 0.0), ("weight", 0.0), ("label", 0), ("confidence", 0)):
            old = getattr(self, name)
            arr = np.full((new_cap, old.shape[1]), fill, dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)
        keys = np.zeros((new_cap, 3), dtype=np.int64)
        keys[:cap] = self._keys
        self._keys = keys

    def allocate(self, block_idx: np.ndarray) -> np.ndarray:
        """Slots for the given (N, 3) block coordinates, allocating missing blocks in input order."""
        packed = pack_keys(block_idx)
        missing = [i for i, k in enumerate(packed.tolist()) if k not in self._slots]
        if missing:
            self._grow(len(missing))
            for i in missing:
                k = int(packed[i])
                if k not in self._slots:
                    slot = len(self._slots)
                    self._slots[k] = slot
                    self._keys[slot] = block_idx[i]
        return np.array([self._slots[k] for k in packed.tolist()], dtype=np.int64)

    def slots_of(self, block_idx: np.ndarray) -> np.ndarray:
        """Slot per block coordinate, -1 where unallocated."""
        packed = pack_keys(block_idx)
        return np.array([self._slots.get(k, -1) for k in packed.tolist()], dtype=np.int64)

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def _locate(self, vox: np.ndarray):
        """(slot, linear offset) per voxel index; slot -1 if unallocated."""
        blk = np.floor_divide(vox, BLOCK_SIZE)
        loc = vox - blk * BLOCK_SIZE
        if len(vox) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        uniq, inv = np.unique(pack_keys(blk), return_inverse=True)
        slot_u = np.array([self._slots.get(k, -1) for k in uniq.tolist()], dtype=np.int64)
        lin = (loc[:, 0] * BLOCK_SIZE + loc[:, 1]) * BLOCK_SIZE + loc[:, 2]
        return slot_u[inv.ravel()], lin

    # -- queries -----------------------------------------------------------
    def lookup_labels(self, points: np.ndarray) -> np.ndarray:
        """Segment label of the voxel containing each world point (0 = none)."""
        slot, lin = self._locate(self.voxel_index(np.asarray(points).reshape(-1, 3)))
        out = np.zeros(len(slot), dtype=np.uint32)
        ok = slot >= 0
        out[ok] = np.where(self.weight[slot[ok], lin[ok]] > 0, self.label[slot[ok], lin[ok]], 0)
        return out

    def lookup_voxel_label(self, point):
        label = int(self.lookup_labels(np.asarray(point, dtype=np.float64)[None])[0])
        return label or None

    def query(self, points: np.ndarray) -> dict:
        """sdf / weight / label / confidence of the voxels containing ``points`` (weight 0 if unallocated)."""
        slot, lin = self._locate(self.voxel_index(np.asarray(points).reshape(-1, 3)))
        ok = slot >= 0
        out = {}
        for name in ("sdf", "weight", "label", "confidence"):
            arr = getattr(self, name)
            vals = np.zeros(len(slot), dtype=arr.dtype)
            vals[ok] = arr[slot[ok], lin[ok]]
            out[name] = vals
        return out

    def voxel_centers(self, slots: np.ndarray) -> np.ndarray:
        idx = self._keys[slots][:, None, :] * BLOCK_SIZE + self._local[None]
        return (idx + 0.5) * self.voxel_size

    def observed_voxels(self):
        """(global voxel indices, slot, linear offset) of every voxel with weight > 0."""
        n = self.num_blocks
        s, l = np.nonzero(self.weight[:n] > 0)
        idx = self._keys[s] * BLOCK_SIZE + self._local[l]
        return idx, s, l

    # -- integration -------------------------------------------------------
    def _band_samples(self, vmap, pose: RigidPose, stride: int = 1):
        """March every valid pixel ray through the truncation band.

        Returns (packed voxel keys, signed distance observation, pixel flat
        index) with consecutive repeats of a voxel along one ray removed.
        """
        h, w = vmap.valid.shape
        sel = np.zeros((h, w), dtype=bool)
        sel[::stride, ::stride] = True
        sel &= vmap.valid
        pix = np.flatnonzero(sel)
        pts = vmap.points.reshape(-1, 3)[pix]
        rng = np.linalg.norm(pts, axis=1)
        unit = pts / rng[:, None]
        steps = int(np.ceil(self.truncation / self.voxel_size))
        offsets = np.arange(-steps, steps + 1) * self.voxel_size
        world_unit = unit @ pose.rotation_matrix.T
        origin = pose.translation
        surface = origin + world_unit * rng[:, None]
        keys, obs, owner = [], [], []
        prev = None
        for off in offsets:
            sample = surface + world_unit * off
            vox = np.floor(sample / self.voxel_size).astype(np.int64)
            k = pack_keys(vox)
            center = (vox + 0.5) * self.voxel_size
            d = np.einsum("ij,ij->i", surface - center, world_unit)
            fresh = np.ones(len(k), dtype=bool) if prev is None else k != prev
            prev = k
            keys.append(k[fresh])
            obs.append(d[fresh])
            owner.append(pix[fresh])
        return np.concatenate(keys), np.concatenate(obs), np.concatenate(owner)

    def _free_space_blocks(self, vmap, pose: RigidPose) -> np.ndarray:
        block_len = self.voxel_size * BLOCK_SIZE
        s = self.params.carve_pixel_stride
        sub = np.zeros_like(vmap.valid)
        sub[::s, ::s] = True
        sub &= vmap.valid
        p = vmap.points[sub]
        if len(p) == 0:
            return np.zeros(0, dtype=np.int64)
        r = np.linalg.norm(p, axis=1)
        u = p / r[:, None]
        far = r - self.truncation
        keys = []
        n_steps = int(np.ceil(far.max(initial=0.0) / (0.5 * block_len)))
        for k in range(n_steps + 1):
            live = k * 0.5 * block_len < far
            if not live.any():
                break
            sample = pose.transform(u[live] * (k * 0.5 * block_len))
            keys.append(np.unique(pack_keys(np.floor(sample / block_len).astype(np.int64))))
        return np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)

    def integrate_frame(self, depth: DepthFrame, pose: RigidPose, intr: CameraIntrinsics,
                        label_raster: np.ndarray | None = None):
        """Fuse one depth frame; ``label_raster`` holds the persistent segment
        label per pixel (0 = no label vote).

        Surface band: each valid pixel ray is marched through
        ``[-truncation, +truncation]`` around its surface point; every voxel
        met gets the mean of its along-ray distances for this frame and a
        label vote (majority of the labelled pixels that reached it).
        Free space: voxels of the blocks between camera and band that lie
        more than one truncation in front of every depth reading in a 3x3
        pixel neighbourhood get ``+truncation`` without a label.
        Each voxel is updated at most once per frame with unit weight.
        """
        vmap = unproject(depth, intr, self.params.max_range)
        if not vmap.valid.any():
            return
        keys, obs, owner = self._band_samples(vmap, pose)
        vkeys, inv = np.unique(keys, return_inverse=True)
        inv = inv.ravel()
        n_obs = np.bincount(inv)
        mean_obs = np.bincount(inv, weights=obs) / n_obs
        vox = unpack_keys(vkeys)
        blk = np.floor_divide(vox, BLOCK_SIZE)
        band_blocks = np.unique(pack_keys(blk))
        blocks = band_blocks
        if self.params.carve_free_space:
            blocks = np.union1d(blocks, self._free_space_blocks(vmap, pose))
        slots = self.allocate(unpack_keys(blocks))
        band_slot = slots[np.searchsorted(blocks, pack_keys(blk))]  # blocks is sorted and unique
        loc = vox - blk * BLOCK_SIZE
        band_lin = (loc[:, 0] * BLOCK_SIZE + loc[:, 1]) * BLOCK_SIZE + loc[:, 2]
        band_obs = np.clip(mean_obs, -self.truncation, self.truncation)

        if self.params.carve_free_space:
            self._carve(vmap, pose, intr, slots, band_slot, band_lin)
        self._fuse(band_slot, band_lin, band_obs)

        if label_raster is None:
            return
        labels = np.asarray(label_raster, dtype=np.int64).ravel()[owner]
        has = labels > 0
        if not has.any():
            return
        width = int(labels.max()) + 1
        pair = inv[has] * width + labels[has]
        pairs, counts = np.unique(pair, return_counts=True)
        pv, pl = pairs // width, pairs % width
        # per voxel: most frequent label, smaller label on ties
        order = np.lexsort((pl, -counts, pv))
        pv, pl = pv[order], pl[order]
        first = np.ones(len(pv), dtype=bool)
        first[1:] = pv[1:] != pv[:-1]
        tv, tl = pv[first], pl[first]
        self._vote(band_slot[tv], band_lin[tv], tl.astype(np.uint32))

    def _fuse(self, s, l, obs):
        w = self.weight[s, l].astype(np.float64)
        old = self.sdf[s, l].astype(np.float64)
        self.sdf[s, l] = ((w * old + obs) / (w + 1.0)).astype(np.float32)
        self.weight[s, l] = np.minimum(w + 1.0, self.params.max_weight).astype(np.float32)

    def _fuse_rows(self, s, mask, obs):
        w = self.weight[s].astype(np.float64)
        old = self.sdf[s].astype(np.float64)
        self.sdf[s] = np.where(mask, (w * old + obs) / (w + 1.0), old).astype(np.float32)
        self.weight[s] = np.where(mask, np.minimum(w + 1.0, self.params.max_weight), w).astype(np.float32)

    def _carve(self, vmap, pose, intr, slots, band_slot, band_lin):
        """Free-space update of the voxels of ``slots`` (see ``integrate_frame``).

        Blocks lying wholly more than one truncation in front of the nearest
        depth reading under their image footprint are updated as a whole;
        the rest are tested voxel by voxel.
        """
        zbuf = np.where(vmap.valid, vmap.points[..., 2], np.inf)
        near = minimum_filter(zbuf, size=3, mode="constant", cval=np.inf)
        near = np.where(vmap.valid, near, 0.0).astype(np.float32)
        # ray length per unit depth, so the along-ray gap is (d - z) * stretch
        uu, vv = np.meshgrid((np.arange(intr.width) - intr.cx) / intr.fx, (np.arange(intr.height) - intr.cy) / intr.fy)
        stretch = np.sqrt(uu * uu + vv * vv + 1.0).astype(np.float32)
        in_band = np.zeros(self.sdf.shape, dtype=bool)
        in_band[band_slot, band_lin] = True
        world_to_cam = pose.inverse()
        trunc = self.truncation

        full = self._free_blocks(slots, world_to_cam, intr, near)
        if full.any():
            self._fuse_rows(slots[full], ~in_band[slots[full]], trunc)
        partial = slots[~full]

        local_cam = (((self._local + 0.5) * self.voxel_size) @ world_to_cam.rotation_matrix.T).astype(np.float32)
        lx, ly, lz = (np.ascontiguousarray(local_cam[:, i]) for i in range(3))
        near_flat, stretch_flat = near.ravel(), stretch.ravel()
        for start in range(0, len(partial), self.params.chunk_blocks):
            sl = partial[start:start + self.params.chunk_blocks]
            origin = world_to_cam.transform(self._keys[sl] * BLOCK_SIZE * self.voxel_size).astype(np.float32)
            z = origin[:, 2:3] + lz
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.rint(intr.fx * (origin[:, 0:1] + lx) / z + intr.cx)
                v = np.rint(intr.fy * (origin[:, 1:2] + ly) / z + intr.cy)
            vis = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
            b, l = np.nonzero(vis)
            pix = v[b, l].astype(np.intp) * intr.width + u[b, l].astype(np.intp)
            zz = z[b, l]
            d = near_flat[pix]
            free = (d > 0) & ((d - zz) * stretch_flat[pix] > trunc)
            s = sl[b[free]]
            l = l[free]
            keep = ~in_band[s, l]
            self._fuse(s[keep], l[keep], np.full(int(keep.sum()), trunc))

    def _free_blocks(self, slots, world_to_cam, intr, near) -> np.ndarray:
        """Blocks whose every point projects into the image at least one
        truncation in front of the nearest depth in its pixel footprint."""
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
        world = (self._keys[slots][:, None, :] + corners[None]) * BLOCK_SIZE * self.voxel_size
        cam = world_to_cam.transform(world.reshape(-1, 3)).reshape(len(slots), 8, 3)
        z = cam[..., 2]
        out = np.zeros(len(slots), dtype=bool)
        ahead = np.all(z > 1e-6, axis=1)
        if not ahead.any():
            return out
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * cam[..., 0] / z + intr.cx
            v = intr.fy * cam[..., 1] / z + intr.cy
        u0, u1 = np.floor(u.min(axis=1)), np.ceil(u.max(axis=1))
        v0, v1 = np.floor(v.min(axis=1)), np.ceil(v.max(axis=1))
        inside = ahead & (u0 >= 0) & (u1 < intr.width) & (v0 >= 0) & (v1 < intr.height)
        zmax = z.max(axis=1)
        for i in np.flatnonzero(inside):
            patch = near[int(v0[i]):int(v1[i]) + 1, int(u0[i]):int(u1[i]) + 1]
            out[i] = patch.min() - zmax[i] > self.truncation
        return out

    def _vote(self, s, l, incoming):
        cur = self.label[s, l]
        conf = self.confidence[s, l].astype(np.int64)
        empty = cur == 0
        same = cur == incoming
        conf = np.where(empty, 1, np.where(same, conf + 1, conf - 1))
        flip = ~empty & ~same & (conf == 0)
        new_label = np.where(empty | flip, incoming, cur)
        conf = np.where(flip, 1, conf)
        self.label[s, l] = new_label
        self.confidence[s, l] = conf.astype(np.uint32)

    def update_counts(self, segments, segment_labels, instance_labels):
        self.counts.update(segments, segment_labels, instance_labels)

    # -- extraction --------------------------------------------------------
    def extract_segments(self) -> list:
        idx, s, l = self.observed_voxels()
        lab = self.label[s, l]
        keep = lab > 0
        idx, lab = idx[keep], lab[keep]
        order = np.argsort(lab, kind="stable")
        idx, lab = idx[order], lab[order]
        uniq, starts = np.unique(lab, return_index=True)
        rows = self.counts.rows()
        out = []
        for label, chunk in zip(uniq.tolist(), np.split(idx, starts[1:])):
            inst, cls = rows.get(label, (0, 0))
            out.append(GlobalSegment(label, chunk, inst, cls))
        return out

    def extract_mesh(self, filter: str = "all"):
        from .mesh import extract_mesh

        return extract_mesh(self, filter)

    # -- serialization -----------------------------------------------------
    MAGIC = b"OBJMAP\x00\x00"
    VERSION = 1

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        n = BLOCK_SIZE ** 3
        p = self.params
        head = struct.pack("<8sIdIddddIIQQQ", self.MAGIC, self.VERSION, self.voxel_size, BLOCK_SIZE,
                           p.truncation_voxels, p.max_weight, p.max_range, 0.0,
                           int(p.carve_free_space), p.carve_pixel_stride,
                           self.labels.next_segment_label, self.labels.next_instance_label, self.num_blocks)
        parts = [head]
        keys = self.block_keys
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        for slot in order:
            parts.append(keys[slot].astype("<i4").tobytes())
            parts.append(self.sdf[slot].astype("<f4").tobytes())
            parts.append(self.weight[slot].astype("<f4").tobytes())
            parts.append(self.label[slot].astype("<u4").tobytes())
            parts.append(self.confidence[slot].astype("<u4").tobytes())
        assert all(len(x) in (len(head), 12, 4 * n) for x in parts)
        for table in (self.counts.phi, self.counts.psi):
            items = sorted((k, c) for k, c in table.items() if c > 0)
            parts.append(struct.pack("<Q", len(items)))
            parts.append(b"".join(struct.pack("<IIQ", a, b, c) for (a, b), c in items))
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TsdfVolume":
        fmt = "<8sIdIddddIIQQQ"
        hsize = struct.calcsize(fmt)
        if len(data) < hsize:
            raise MapFormatError("map file truncated in header")
        (magic, version, voxel_size, block, tv, wmax, max_range, _reserved, carve, carve_stride,
         next_seg, next_inst, n_blocks) = struct.unpack_from(fmt, data)
        if magic != cls.MAGIC:
            raise MapFormatError("not a map file (bad magic)")
        if version != cls.VERSION:
            raise MapFormatError(f"unsupported map version {version} (expected {cls.VERSION})")
        if block != BLOCK_SIZE:
            raise MapFormatError(f"unsupported block size {block}")
        params = IntegrationParams(truncation_voxels=tv, max_weight=wmax, max_range=max_range,
                                   carve_free_space=bool(carve), carve_pixel_stride=carve_stride)
        vol = cls(voxel_size, params)
        vol.labels = PersistentLabels(next_seg, next_inst)
        n = BLOCK_SIZE ** 3
        rec = 12 + 16 * n
        pos = hsize
        if len(data) < pos + rec * n_blocks:
            raise MapFormatError("map file truncated in block table")
        if n_blocks:
            raw = np.frombuffer(data, dtype=np.uint8, count=rec * n_blocks, offset=pos).reshape(n_blocks, rec)
            keys = raw[:, :12].copy().view("<i4").astype(np.int64)
            vol.allocate(keys)
            vol.sdf[:n_blocks] = raw[:, 12:12 + 4 * n].copy().view("<f4")
            vol.weight[:n_blocks] = raw[:, 12 + 4 * n:12 + 8 * n].copy().view("<f4")
            vol.label[:n_blocks] = raw[:, 12 + 8 * n:12 + 12 * n].copy().view("<u4")
            vol.confidence[:n_blocks] = raw[:, 12 + 12 * n:].copy().view("<u4")
        pos += rec * n_blocks
        for table in (vol.counts.phi, vol.counts.psi):
            if len(data) < pos + 8:
                raise MapFormatError("map file truncated in count tables")
            (m,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if len(data) < pos + 16 * m:
                raise MapFormatError("map file truncated in count tables")
            for i in range(m):
                a, b, c = struct.unpack_from("<IIQ", data, pos + 16 * i)
                table[(a, b)] = c
            pos += 16 * m
        if pos != len(data):
            raise MapFormatError("trailing bytes after count tables")
        return vol
