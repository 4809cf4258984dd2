"""Marching-cubes mesh extraction from the TSDF volume and PLY export."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from skimage.measure import marching_cubes

from .volume import BLOCK_SIZE, pack_keys

_NEIGHBORS = [o for o in product((0, 1), repeat=3) if any(o)]


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3) world, meters
    faces: np.ndarray  # (M, 3) vertex indices
    labels: np.ndarray  # (N,) dominant segment label per vertex

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.uint32))

    def __len__(self):
        return len(self.faces)

    def face_labels(self) -> np.ndarray:
        fl = self.labels[self.faces]
        # majority of the three corners, first corner otherwise
        a, b, c = fl[:, 0], fl[:, 1], fl[:, 2]
        return np.where((b == c) & (a != b), b, a)

    def submesh(self, face_mask: np.ndarray) -> "Mesh":
        faces = self.faces[face_mask]
        used, inv = np.unique(faces.ravel(), return_inverse=True)
        return Mesh(self.vertices[used], inv.reshape(-1, 3), self.labels[used])

    def colors(self) -> np.ndarray:
        return label_colors(self.labels)


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Deterministic RGB per label; label 0 is grey."""
    x = np.asarray(labels, dtype=np.uint64)
    h = (x * np.uint64(2654435761) + np.uint64(0x9E3779B9)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(15)
    h = (h * np.uint64(0x85EBCA6B)) & np.uint64(0xFFFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=-1).astype(np.uint8)
    rgb = (rgb // 2 + 64).astype(np.uint8)
    rgb[x == 0] = 200
    return rgb


def write_ply(mesh: Mesh, path):
    """ASCII PLY with per-vertex RGB encoding the segment label."""
    rgb = mesh.colors()
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uint label",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, c, l in zip(mesh.vertices, rgb, mesh.labels):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {l}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    with open(path) as fh:
        text = fh.read().splitlines()
    end = text.index("end_header")
    nv = nf = 0
    for line in text[:end]:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    body = text[end + 1:]
    verts = np.array([[float(x) for x in l.split()[:3]] for l in body[:nv]]).reshape(-1, 3)
    labels = np.array([int(l.split()[6]) for l in body[:nv]], dtype=np.uint32)
    faces = np.array([[int(x) for x in l.split()[1:4]] for l in body[nv:nv + nf]], dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces, labels)


def _padded_block(volume, slot: int, key: np.ndarray):
    """(B+1)³ sdf/weight/label/confidence arrays, borrowing the +1 layer from neighbour blocks."""
    n = BLOCK_SIZE + 1
    out = {name: np.zeros((n, n, n), dtype=getattr(volume, name).dtype)
           for name in ("sdf", "weight", "label", "confidence")}
    shape = (BLOCK_SIZE,) * 3
    for name in out:
        out[name][:BLOCK_SIZE, :BLOCK_SIZE, :BLOCK_SIZE] = getattr(volume, name)[slot].reshape(shape)
    nb_keys = key[None] + np.array(_NEIGHBORS)
    nb_slots = volume.slots_of(nb_keys)
    for (dx, dy, dz), s in zip(_NEIGHBORS, nb_slots):
        if s < 0:
            continue
        src = (slice(0, 1) if dx else slice(None), slice(0, 1) if dy else slice(None), slice(0, 1) if dz else slice(None))
        dst = tuple(slice(BLOCK_SIZE, n) if d else slice(0, BLOCK_SIZE) for d in (dx, dy, dz))
        for name in out:
            out[name][dst] = getattr(volume, name)[s].reshape(shape)[src]
    return out


def _vertex_labels(verts: np.ndarray, label: np.ndarray, conf: np.ndarray) -> np.ndarray:
    """Label of the most confident labelled corner of the cell holding each vertex."""
    base = np.clip(np.floor(verts).astype(np.int64), 0, BLOCK_SIZE - 1)
    corners = np.array(list(product((0, 1), repeat=3)))
    idx = base[:, None, :] + corners[None]
    lab = label[idx[..., 0], idx[..., 1], idx[..., 2]]
    cf = conf[idx[..., 0], idx[..., 1], idx[..., 2]].astype(np.int64)
    cf = np.where(lab > 0, cf, -1)
    pick = np.argmax(cf, axis=1)
    return lab[np.arange(len(lab)), pick]


def extract_global_mesh(volume) -> Mesh:
    verts, faces, labels = [], [], []
    offset = 0
    keys = volume.block_keys
    order = np.argsort(pack_keys(keys), kind="stable")
    for slot in order:
        blk = _padded_block(volume, int(slot), keys[slot])
        observed = blk["weight"] > 0
        # a cell is meshed only when all eight corners were observed
        cell = observed[:-1, :-1, :-1].copy()
        for dx, dy, dz in _NEIGHBORS:
            cell &= observed[dx:BLOCK_SIZE + dx, dy:BLOCK_SIZE + dy, dz:BLOCK_SIZE + dz]
        if not cell.any():
            continue
        vals = blk["sdf"][:-1, :-1, :-1][cell]
        corner_vals = np.concatenate([blk["sdf"][dx:BLOCK_SIZE + dx, dy:BLOCK_SIZE + dy, dz:BLOCK_SIZE + dz][cell]
                                      for dx, dy, dz in _NEIGHBORS] + [vals])
        if corner_vals.min() >= 0 or corner_vals.max() <= 0:
            continue
        # skimage keys each cube by its upper corner
        mask = np.zeros_like(observed)
        mask[1:, 1:, 1:] = cell
        sdf = np.where(observed, blk["sdf"], volume.truncation).astype(np.float64)
        try:
            v, f, _, _ = marching_cubes(sdf, level=0.0, mask=mask, allow_degenerate=False)
        except (ValueError, RuntimeError):
            continue
        if len(f) == 0:
            continue
        labels.append(_vertex_labels(v, blk["label"], blk["confidence"]))
        verts.append((v + keys[slot] * BLOCK_SIZE + 0.5) * volume.voxel_size)
        faces.append(f + offset)
        offset += len(v)
    if not verts:
        return Mesh.empty()
    return Mesh(np.concatenate(verts), np.concatenate(faces).astype(np.int64), np.concatenate(labels))


def extract_mesh(volume, filter: str = "all"):
    """``"all"`` -> one Mesh; ``"segment"`` -> {label: Mesh};
    ``"instance"`` -> {instance: Mesh} joining every segment whose argmax
    instance matches."""
    mesh = extract_global_mesh(volume)
    if filter == "all":
        return mesh
    fl = mesh.face_labels()
    if filter in ("segment", "per-segment"):
        return {int(l): mesh.submesh(fl == l) for l in np.unique(fl) if l > 0}
    if filter in ("instance", "per-instance"):
        groups: dict[int, list] = {}
        for label, (inst, _) in sorted(volume.counts.rows().items()):
            groups.setdefault(inst, []).append(label)
        out = {}
        for inst, labels in sorted(groups.items()):
            sel = np.isin(fl, labels)
            if sel.any():
                out[inst] = mesh.submesh(sel)
        return out
    raise ValueError(f"unknown mesh filter {filter!r}")
