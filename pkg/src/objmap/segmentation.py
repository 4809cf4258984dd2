"""Convexity-based geometric segmentation of single depth frames."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import VertexMap


@dataclass(frozen=True)
class SegmentationParams:
    concave_angle_deg: float = 10.0
    min_distance: float = 0.03  # meters
    distance_per_meter: float = 0.05  # discontinuity threshold growth with depth
    min_region_size: int = 100
    normal_step: int = 1  # pixel offset of the differences used for normals
    smoothing_radius: int = 0  # edge-preserving depth pre-filter, 0 = off

    def distance_threshold(self, z):
        return np.maximum(self.min_distance, self.distance_per_meter * z)


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray  # (H, W, 3), unit, facing the camera
    valid: np.ndarray


@dataclass(frozen=True)
class Region2D:
    id: int
    pixels: np.ndarray  # sorted flat (row-major) pixel indices

    @property
    def size(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class FrameSegment:
    region: Region2D
    points: np.ndarray  # (N, 3) camera frame, one per region pixel
    instance: int = 0  # frame-local mask id, 0 = none
    class_id: int = 0

    @property
    def id(self) -> int:
        return self.region.id

    @property
    def size(self) -> int:
        return self.region.size


class Segmentation(NamedTuple):
    regions: list
    segments: list
    raster: np.ndarray  # (H, W) region id per pixel, 0 = unassigned


_STEP_RATIO = 2.0  # half-steps more unequal than this count as a discontinuity
_CREASE_COS = math.cos(math.radians(30.0))  # half-steps bending more than this straddle a crease


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def _edge_aware_diff(pts, valid, s, axis):
    """Per pixel tangent along ``axis`` from half-steps of ``s`` pixels.

    Central difference by default. A pixel next to a depth discontinuity
    (half-steps of very unequal length) uses its shorter valid half-step; a
    pixel on a crease (half-steps bending sharply) uses the half-step that
    agrees best with the next one further out, i.e. the one lying on a single
    face. Returns (tangent, length of the span used; inf when none).
    """
    n = valid.shape[axis]
    pad = [(0, 0)] * 3
    pad[axis] = (2 * s, 2 * s)
    P = np.pad(pts, pad)
    V = np.pad(valid, pad[:2])

    def at(k):
        sl = [slice(None)] * 2
        sl[axis] = slice(2 * s + k, 2 * s + k + n)
        return P[tuple(sl)], V[tuple(sl)]

    (pf, vf), (pf2, vf2) = at(s), at(2 * s)
    (pb, vb), (pb2, vb2) = at(-s), at(-2 * s)
    fwd, bwd = pf - pts, pts - pb
    lf = np.where(vf, np.linalg.norm(fwd, axis=-1), np.inf)
    lb = np.where(vb, np.linalg.norm(bwd, axis=-1), np.inf)
    short, long_ = np.minimum(lf, lb), np.maximum(lf, lb)
    uf, ub = _unit(fwd), _unit(bwd)
    central = (long_ <= _STEP_RATIO * short) & (np.einsum("...k,...k", uf, ub) >= _CREASE_COS)
    # which single side to trust: the shorter one, or on a crease the straighter one
    straight_f = np.where(vf & vf2, np.einsum("...k,...k", uf, _unit(pf2 - pf)), -2.0)
    straight_b = np.where(vb & vb2, np.einsum("...k,...k", ub, _unit(pb - pb2)), -2.0)
    comparable = long_ <= _STEP_RATIO * short
    use_f = np.where(comparable, straight_f >= straight_b, lf <= lb)
    one_sided = np.where(use_f[..., None], fwd, bwd)
    span = np.where(central, long_, np.where(use_f, lf, lb))
    return np.where(central[..., None], fwd + bwd, one_sided), span


def smooth_depth(depth: np.ndarray, radius: int, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    """Mean over a (2r+1)² window of the valid neighbours whose depth lies
    within half the discontinuity threshold of the center; invalid pixels
    stay invalid. Noise is averaged out along surfaces but not across depth
    edges."""
    d = np.asarray(depth, dtype=np.float64)
    if radius <= 0:
        return d.copy()
    h, w = d.shape
    tol = 0.5 * params.distance_threshold(d)
    padded = np.pad(d, radius)
    total = np.zeros_like(d)
    count = np.zeros_like(d)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            nb = padded[dy:dy + h, dx:dx + w]
            ok = (nb > 0) & (np.abs(nb - d) < tol)
            total += np.where(ok, nb, 0.0)
            count += ok
    return np.where(d > 0, total / np.maximum(count, 1), 0.0)


def estimate_normals(vmap: VertexMap, step: int = 1,
                     params: SegmentationParams | None = None) -> NormalMap:
    """Cross product of edge-aware differences along u and v.

    A normal is invalid when the pixel is invalid or has no valid neighbour
    on some axis; with ``params`` given, also when the difference used still
    spans more than the discontinuity threshold.
    """
    pts, valid = vmap.points, vmap.valid
    du, lu = _edge_aware_diff(pts, valid, step, 1)
    dv, lv = _edge_aware_diff(pts, valid, step, 0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = valid & np.isfinite(lu) & np.isfinite(lv) & (norm > 1e-12)
    if params is not None:
        thresh = params.distance_threshold(pts[..., 2]) * step
        ok &= (lu <= thresh) & (lv <= thresh)
    n = n / np.where(ok, norm, 1.0)[..., None]
    flip = np.einsum("ijk,ijk->ij", n, pts) > 0
    n[flip] *= -1
    n[~ok] = 0.0
    return NormalMap(n, ok)


def edge_classify(vmap: VertexMap, nmap: NormalMap, p, q, params: SegmentationParams = SegmentationParams()) -> str:
    """Classify the edge between 4-adjacent pixels ``p`` and ``q`` ((row, col) tuples).

    Returns ``"connected"`` or ``"boundary"``. Written per pixel pair on
    purpose: it is the reference the vectorized path is checked against.
    """
    (pr, pc), (qr, qc) = p, q
    if abs(pr - qr) + abs(pc - qc) != 1:
        raise ValueError("pixels are not 4-adjacent")
    for r, c in (p, q):
        if not (vmap.valid[r, c] and nmap.valid[r, c]):
            return "boundary"
    vp = [float(x) for x in vmap.points[pr, pc]]
    vq = [float(x) for x in vmap.points[qr, qc]]
    npn = [float(x) for x in nmap.normals[pr, pc]]
    nqn = [float(x) for x in nmap.normals[qr, qc]]
    diff = [b - a for a, b in zip(vp, vq)]
    dist = math.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
    if dist > max(params.min_distance, params.distance_per_meter * min(vp[2], vq[2])):
        return "boundary"
    cos_angle = npn[0] * nqn[0] + npn[1] * nqn[1] + npn[2] * nqn[2]
    # convex only if the step clearly drops behind both tangent planes; tested
    # from both ends so the relation is symmetric
    margin = -dist * math.sin(math.radians(params.concave_angle_deg) / 2)
    concave_step = (diff[0] * npn[0] + diff[1] * npn[1] + diff[2] * npn[2]) > margin \
        or (-diff[0] * nqn[0] + -diff[1] * nqn[1] + -diff[2] * nqn[2]) > margin
    if cos_angle < math.cos(math.radians(params.concave_angle_deg)) and concave_step:
        return "boundary"
    return "connected"


def _dot(a, b):
    # same operation order as the scalar reference, so both round identically
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _connected_edges(vmap: VertexMap, nmap: NormalMap, params: SegmentationParams, axis: int) -> np.ndarray:
    """Connectivity of every edge from a pixel to its right (axis=1) or lower (axis=0) neighbour."""
    pts, nrm = vmap.points, nmap.normals
    ok = vmap.valid & nmap.valid
    if axis == 1:
        a, b = np.s_[:, :-1], np.s_[:, 1:]
    else:
        a, b = np.s_[:-1, :], np.s_[1:, :]
    diff = pts[b] - pts[a]
    dist = np.sqrt(_dot(diff, diff))
    zmin = np.minimum(pts[a][..., 2], pts[b][..., 2])
    far = dist > params.distance_threshold(zmin)
    cos_angle = _dot(nrm[a], nrm[b])
    margin = -dist * math.sin(math.radians(params.concave_angle_deg) / 2)
    concave = (cos_angle < math.cos(math.radians(params.concave_angle_deg))) & (
        (_dot(diff, nrm[a]) > margin) | (_dot(-diff, nrm[b]) > margin))
    return ok[a] & ok[b] & ~far & ~concave


def segment_frame(vmap: VertexMap, nmap: NormalMap,
                  params: SegmentationParams = SegmentationParams()) -> Segmentation:
    """Connected components over the ``connected`` edge relation.

    Components below ``min_region_size`` pixels are dropped; survivors are
    numbered 1..n in row-major order of their first pixel.
    """
    if vmap.valid.shape != nmap.valid.shape:
        raise ValueError("vertex and normal maps differ in shape")
    h, w = vmap.valid.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    right = _connected_edges(vmap, nmap, params, axis=1)
    down = _connected_edges(vmap, nmap, params, axis=0)
    src = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    dst = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)

    ok = (vmap.valid & nmap.valid).ravel()
    comp = np.where(ok, comp, -1)
    raster = np.zeros(n, dtype=np.int32)
    if not ok.any():
        return Segmentation([], [], raster.reshape(h, w))
    pix = np.flatnonzero(ok)
    labels = comp[pix]
    uniq, first, counts = np.unique(labels, return_index=True, return_counts=True)
    keep = counts >= params.min_region_size
    # pix is sorted, so ``first`` is the row-major first pixel of each component
    order = np.argsort(pix[first[keep]], kind="stable")
    kept = uniq[keep][order]
    lut = np.zeros(len(uniq), dtype=np.int32)
    lut[np.flatnonzero(keep)[order]] = np.arange(1, len(kept) + 1)
    raster[pix] = lut[np.searchsorted(uniq, labels)]

    regions, segments = [], []
    flat_pts = vmap.points.reshape(-1, 3)
    sel = np.flatnonzero(raster)
    by_region = np.argsort(raster[sel], kind="stable")
    sorted_pix = sel[by_region]
    bounds = np.searchsorted(raster[sorted_pix], np.arange(1, len(kept) + 2))
    for rid in range(1, len(kept) + 1):
        pixels = sorted_pix[bounds[rid - 1]:bounds[rid]]
        region = Region2D(rid, pixels)
        regions.append(region)
        segments.append(FrameSegment(region, flat_pts[pixels]))
    return Segmentation(regions, segments, raster.reshape(h, w))
