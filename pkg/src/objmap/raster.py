"""Software rasterizer: depth buffer, instance ids, contours and tight boxes.

Pixel (i, j) covers [i, i+1) x [j, j+1) with its center at (i+0.5, j+0.5).
A pixel is covered when its center lies inside the projected triangle, with
the top-left rule on shared edges. Depth is the camera z coordinate,
interpolated perspective-correctly through 1/z. Boxes are half-open pixel
rectangles [x0, y0, x1, y1] with x1, y1 one past the last pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import RigidTransform

NEAR = 0.01


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
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls) -> "CameraIntrinsics":
        # ~65 degree horizontal field of view at the desk-scale resolution
        return cls(250.0, 250.0, 160.0, 120.0, 320, 240)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                                int(round(self.width * factor)), int(round(self.height * factor)))

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], -1)

    def back_project(self, u, v):
        """Normalized bearing (x, y) of image point (u, v)."""
        return (u - self.cx) / self.fx, (v - self.cy) / self.fy

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class RenderBuffers:
    depth: np.ndarray
    instance: np.ndarray
    contour: np.ndarray
    boxes: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _top_left(dx, dy):
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


@njit(cache=True)
def _raster_tri(ax, ay, az, bx, by, bz, cx_, cy_, cz, fx, fy, cx, cy, ox, oy, depth):
    """Rasterize one camera-space triangle (all z >= near) into ``depth``,
    a window whose pixel (0, 0) is image pixel (ox, oy)."""
    h, w = depth.shape
    u0, v0 = fx * ax / az + cx, fy * ay / az + cy
    u1, v1 = fx * bx / bz + cx, fy * by / bz + cy
    u2, v2 = fx * cx_ / cz + cx, fy * cy_ / cz + cy
    iz0, iz1, iz2 = 1.0 / az, 1.0 / bz, 1.0 / cz
    area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
    if area == 0.0 or not math.isfinite(area):
        return
    if area < 0.0:
        u1, v1, iz1, u2, v2, iz2 = u2, v2, iz2, u1, v1, iz1
        area = -area
    umin, umax = min(u0, u1, u2), max(u0, u1, u2)
    vmin, vmax = min(v0, v1, v2), max(v0, v1, v2)
    i0 = max(int(math.ceil(umin - 0.5)), ox)
    i1 = min(int(math.floor(umax - 0.5)), ox + w - 1)
    j0 = max(int(math.ceil(vmin - 0.5)), oy)
    j1 = min(int(math.floor(vmax - 0.5)), oy + h - 1)
    if i0 > i1 or j0 > j1:
        return
    # edge k is opposite vertex k
    e0x, e0y = u2 - u1, v2 - v1
    e1x, e1y = u0 - u2, v0 - v2
    e2x, e2y = u1 - u0, v1 - v0
    tl0, tl1, tl2 = _top_left(e0x, e0y), _top_left(e1x, e1y), _top_left(e2x, e2y)
    inv_area = 1.0 / area
    for j in range(j0, j1 + 1):
        py = j + 0.5
        # analytic span of the row, widened by a pixel; the exact edge test decides
        lo, hi = umin, umax
        a0 = e0x * (py - v1) + e0y * u1
        a1 = e1x * (py - v2) + e1y * u2
        a2 = e2x * (py - v0) + e2y * u0
        if e0y > 0.0:
            hi = min(hi, a0 / e0y)
        elif e0y < 0.0:
            lo = max(lo, a0 / e0y)
        if e1y > 0.0:
            hi = min(hi, a1 / e1y)
        elif e1y < 0.0:
            lo = max(lo, a1 / e1y)
        if e2y > 0.0:
            hi = min(hi, a2 / e2y)
        elif e2y < 0.0:
            lo = max(lo, a2 / e2y)
        s0 = max(int(math.ceil(lo - 0.5)) - 1, i0)
        s1 = min(int(math.floor(hi - 0.5)) + 1, i1)
        for i in range(s0, s1 + 1):
            px = i + 0.5
            w0 = e0x * (py - v1) - e0y * (px - u1)
            w1 = e1x * (py - v2) - e1y * (px - u2)
            w2 = e2x * (py - v0) - e2y * (px - u0)
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                continue
            z = 1.0 / ((w0 * iz0 + w1 * iz1 + w2 * iz2) * inv_area)
            if z < depth[j - oy, i - ox]:
                depth[j - oy, i - ox] = z


@njit(cache=True)
def _raster_mesh(P, F, fx, fy, cx, cy, near, ox, oy, depth, cull):
    """Rasterize camera-space vertices ``P`` with faces ``F``, clipping
    against the plane z = near (Sutherland-Hodgman, then a triangle fan).

    With ``cull`` set, faces whose outward normal points away from the
    camera are skipped; only valid for closed, outward-oriented meshes.
    """
    poly = np.empty((4, 3))
    for f in range(F.shape[0]):
        a, b, c = F[f, 0], F[f, 1], F[f, 2]
        za, zb, zc = P[a, 2], P[b, 2], P[c, 2]
        if cull:
            e1x, e1y, e1z = P[b, 0] - P[a, 0], P[b, 1] - P[a, 1], zb - za
            e2x, e2y, e2z = P[c, 0] - P[a, 0], P[c, 1] - P[a, 1], zc - za
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            if nx * P[a, 0] + ny * P[a, 1] + nz * za >= 0.0:
                continue
        if za >= near and zb >= near and zc >= near:
            _raster_tri(P[a, 0], P[a, 1], za, P[b, 0], P[b, 1], zb, P[c, 0], P[c, 1], zc,
                        fx, fy, cx, cy, ox, oy, depth)
            continue
        if za < near and zb < near and zc < near:
            continue
        n = 0
        idx = (a, b, c)
        for k in range(3):
            s, e = idx[k], idx[(k + 1) % 3]
            zs, ze = P[s, 2], P[e, 2]
            if zs >= near:
                poly[n, 0], poly[n, 1], poly[n, 2] = P[s, 0], P[s, 1], zs
                n += 1
            if (zs >= near) != (ze >= near):
                t = (near - zs) / (ze - zs)
                poly[n, 0] = P[s, 0] + t * (P[e, 0] - P[s, 0])
                poly[n, 1] = P[s, 1] + t * (P[e, 1] - P[s, 1])
                poly[n, 2] = near
                n += 1
        for k in range(1, n - 1):
            _raster_tri(poly[0, 0], poly[0, 1], poly[0, 2], poly[k, 0], poly[k, 1], poly[k, 2],
                        poly[k + 1, 0], poly[k + 1, 1], poly[k + 1, 2], fx, fy, cx, cy, ox, oy, depth)


@njit(cache=True)
def _composite(depths, ids, depth_out, inst_out):
    """Nearest object per pixel; equal depths go to the smaller id."""
    n, h, w = depths.shape
    for j in range(h):
        for i in range(w):
            best, bid = np.inf, 0
            for k in range(n):
                z = depths[k, j, i]
                if z < best or (z == best and z < np.inf and ids[k] < bid):
                    best, bid = z, ids[k]
            depth_out[j, i] = best
            inst_out[j, i] = bid


@njit(cache=True)
def _contour(inst, out):
    """Object pixels with a 4-neighbor (inside the image) of another id."""
    h, w = inst.shape
    for j in range(h):
        for i in range(w):
            v = inst[j, i]
            if v == 0:
                out[j, i] = False
                continue
            out[j, i] = (
                (i > 0 and inst[j, i - 1] != v)
                or (i < w - 1 and inst[j, i + 1] != v)
                or (j > 0 and inst[j - 1, i] != v)
                or (j < h - 1 and inst[j + 1, i] != v)
            )


@njit(cache=True, inline="always")
def _reflect(i, n):
    # scipy.ndimage 'reflect' for a one-pixel overhang
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


@njit(cache=True)
def _score_particles(V, F, vstart, vcount, fstart, fcount, cull, shape_idx, R, t,
                     fx, fy, cx, cy, width, height, near, other_depth, other_id, self_id, max_samples,
                     out_box, out_nvis, out_ncont, out_nsil, out_pts, out_nrm):
    """Per particle: render the shape at (R, t) against the other objects'
    Z-buffer, extract the visible contour and its tight box, and take up to
    ``max_samples`` evenly spaced edge samples with Sobel mask normals.

    Edge samples come from the particle's own silhouette only. Where another
    object cuts it off, the boundary is that object's edge and is left out."""
    N = R.shape[0]
    for p in range(N):
        s = shape_idx[p]
        v0, nv = vstart[s], vcount[s]
        P = np.empty((nv, 3))
        behind = False
        umin, umax, vmin, vmax = np.inf, -np.inf, np.inf, -np.inf
        for k in range(nv):
            for a in range(3):
                P[k, a] = R[p, a, 0] * V[v0 + k, 0] + R[p, a, 1] * V[v0 + k, 1] + R[p, a, 2] * V[v0 + k, 2] + t[p, a]
            if P[k, 2] < near:
                behind = True
            else:
                u = fx * P[k, 0] / P[k, 2] + cx
                v = fy * P[k, 1] / P[k, 2] + cy
                umin, umax = min(umin, u), max(umax, u)
                vmin, vmax = min(vmin, v), max(vmax, v)
        out_box[p, 0] = out_box[p, 1] = out_box[p, 2] = out_box[p, 3] = 0
        out_nvis[p] = 0
        out_ncont[p] = 0
        out_nsil[p] = 0
        if behind:
            ox, oy, ex, ey = 0, 0, width, height
        else:
            ox = max(int(math.ceil(umin - 0.5)) - 2, 0)
            oy = max(int(math.ceil(vmin - 0.5)) - 2, 0)
            ex = min(int(math.floor(umax - 0.5)) + 3, width)
            ey = min(int(math.floor(vmax - 0.5)) + 3, height)
            if ox >= ex or oy >= ey:
                continue
        h, w = ey - oy, ex - ox
        depth = np.full((h, w), np.inf)
        f0 = fstart[s]
        _raster_mesh(P, F[f0:f0 + fcount[s]] - v0, fx, fy, cx, cy, near, ox, oy, depth, cull[s])
        vis = np.zeros((h, w), dtype=np.bool_)
        nvis = 0
        for j in range(h):
            for i in range(w):
                z = depth[j, i]
                if z < np.inf:
                    oz = other_depth[oy + j, ox + i]
                    if z < oz or (z == oz and self_id < other_id[oy + j, ox + i]):
                        vis[j, i] = True
                        nvis += 1
        out_nvis[p] = nvis
        if nvis == 0:
            continue
        # contour: visible pixel with an in-image 4-neighbor that is not ours;
        # silhouette: the subset whose such neighbor is not covered by our mesh
        sil = np.zeros((h, w), dtype=np.bool_)
        nc = 0
        nsil = 0
        bx0, by0, bx1, by1 = width, height, -1, -1
        for j in range(h):
            gy = oy + j
            for i in range(w):
                if not vis[j, i]:
                    continue
                gx = ox + i
                edge = False
                own = False
                if gx > 0:
                    if i == 0 or depth[j, i - 1] == np.inf:
                        own = True
                    elif not vis[j, i - 1]:
                        edge = True
                if gx < width - 1:
                    if i == w - 1 or depth[j, i + 1] == np.inf:
                        own = True
                    elif not vis[j, i + 1]:
                        edge = True
                if gy > 0:
                    if j == 0 or depth[j - 1, i] == np.inf:
                        own = True
                    elif not vis[j - 1, i]:
                        edge = True
                if gy < height - 1:
                    if j == h - 1 or depth[j + 1, i] == np.inf:
                        own = True
                    elif not vis[j + 1, i]:
                        edge = True
                if edge or own:
                    nc += 1
                    bx0, by0 = min(bx0, gx), min(by0, gy)
                    bx1, by1 = max(bx1, gx), max(by1, gy)
                if own:
                    sil[j, i] = True
                    nsil += 1
        out_ncont[p] = nc
        out_nsil[p] = nsil
        if nc == 0:
            continue
        out_box[p, 0], out_box[p, 1], out_box[p, 2], out_box[p, 3] = bx0, by0, bx1 + 1, by1 + 1
        ns = min(nsil, max_samples)
        k = 0
        nxt = 0
        m = 0
        for j in range(h):
            for i in range(w):
                if not sil[j, i]:
                    continue
                if m < ns and k == nxt:
                    gx, gy = ox + i, oy + j
                    gxs = 0.0
                    gys = 0.0
                    for dj in range(-1, 2):
                        wy = 2.0 if dj == 0 else 1.0
                        for di in range(-1, 2):
                            wx = 2.0 if di == 0 else 1.0
                            yy = _reflect(gy + dj, height) - oy
                            xx = _reflect(gx + di, width) - ox
                            val = 1.0 if (0 <= yy < h and 0 <= xx < w and depth[yy, xx] < np.inf) else 0.0
                            gxs += di * wy * val
                            gys += dj * wx * val
                    nrm = math.sqrt(gxs * gxs + gys * gys)
                    out_pts[p, m, 0], out_pts[p, m, 1] = gx, gy
                    if nrm > 0.0:
                        out_nrm[p, m, 0], out_nrm[p, m, 1] = gxs / nrm, gys / nrm
                    else:
                        out_nrm[p, m, 0], out_nrm[p, m, 1] = 1.0, 0.0
                    m += 1
                    nxt = (m * nsil) // ns
                k += 1


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def render_depth(mesh, g_cam: RigidTransform, K: CameraIntrinsics, near: float = NEAR) -> np.ndarray:
    """Depth buffer of a single mesh posed in the camera frame (+inf where empty)."""
    depth = np.full((K.height, K.width), np.inf)
    P = np.ascontiguousarray(g_cam.apply(mesh.vertices))
    _raster_mesh(P, mesh.triangles, float(K.fx), float(K.fy), float(K.cx), float(K.cy), near, 0, 0, depth,
                 mesh.is_closed_oriented())
    return depth


def contour_from_instance(instance: np.ndarray) -> np.ndarray:
    out = np.zeros(instance.shape, dtype=bool)
    _contour(np.ascontiguousarray(instance, dtype=np.int64), out)
    return out


def mask_box(mask: np.ndarray):
    """Tight half-open box of a boolean mask, or None if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def composite(depths: list, ids: list, K: CameraIntrinsics):
    depth = np.full((K.height, K.width), np.inf)
    inst = np.zeros((K.height, K.width), dtype=np.int64)
    if depths:
        _composite(np.stack(depths), np.asarray(ids, dtype=np.int64), depth, inst)
    return depth, inst


def render_scene(objects, K: CameraIntrinsics, near: float = NEAR) -> RenderBuffers:
    """Render ``objects`` -- (id, mesh, camera-frame transform) triples with
    positive ids -- into depth, instance, contour buffers and per-object boxes.

    Depth ties are broken toward the smaller id, so the result does not
    depend on the order of ``objects``.
    """
    ids = [int(o[0]) for o in objects]
    if any(i <= 0 for i in ids) or len(set(ids)) != len(ids):
        raise ValueError("object ids must be unique positive integers")
    depths = [render_depth(mesh, g, K, near) for _, mesh, g in objects]
    depth, inst = composite(depths, ids, K)
    contour = contour_from_instance(inst)
    boxes = {}
    for i in sorted(ids):
        b = mask_box(contour & (inst == i))
        if b is not None:
            boxes[i] = b
    return RenderBuffers(depth, inst, contour, boxes)


def visible_contour(buffers: RenderBuffers, obj_id: int) -> np.ndarray:
    return buffers.contour & (buffers.instance == obj_id)


def projection_mask(buffers: RenderBuffers, obj_id: int) -> np.ndarray:
    return buffers.instance == obj_id


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def box_iou(a, b) -> float:
    """IoU of two half-open boxes [x0, y0, x1, y1]."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (M, 4) and (G, 4) box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)[:, None, :]
    b = np.asarray(b, dtype=float).reshape(-1, 4)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


class MeshPack:
    """Concatenated database meshes in the flat layout the particle kernel reads."""

    def __init__(self, meshes):
        self.meshes = list(meshes)
        vs, fs, vstart, vcount, fstart, fcount = [], [], [], [], [], []
        nv = nf = 0
        for m in self.meshes:
            vstart.append(nv)
            vcount.append(m.n_vertices)
            fstart.append(nf)
            fcount.append(m.n_faces)
            vs.append(m.vertices)
            fs.append(m.triangles + nv)
            nv += m.n_vertices
            nf += m.n_faces
        self.V = np.ascontiguousarray(np.vstack(vs))
        self.F = np.ascontiguousarray(np.vstack(fs))
        self.vstart = np.array(vstart, dtype=np.int64)
        self.vcount = np.array(vcount, dtype=np.int64)
        self.fstart = np.array(fstart, dtype=np.int64)
        self.fcount = np.array(fcount, dtype=np.int64)
        self.cull = np.array([m.is_closed_oriented() for m in self.meshes], dtype=np.bool_)


@dataclass(frozen=True, eq=False)
class ParticleRenders:
    boxes: np.ndarray  # (N, 4) int, zeros when nothing visible
    n_visible: np.ndarray  # (N,)
    n_contour: np.ndarray  # (N,) visible contour, occlusion boundaries included
    n_silhouette: np.ndarray  # (N,) visible contour on the particle's own silhouette
    samples: np.ndarray  # (N, S, 2) int pixel coords, silhouette only
    normals: np.ndarray  # (N, S, 2)

    @property
    def n_samples(self) -> np.ndarray:
        return np.minimum(self.n_silhouette, self.samples.shape[1])


def render_particles(pack: MeshPack, shape_idx, R_co, t_co, K: CameraIntrinsics, other_depth=None, other_id=None,
                     self_id: int = 1, max_samples: int = 200, near: float = NEAR) -> ParticleRenders:
    """Batched per-particle render against a fixed Z-buffer of other objects.

    ``shape_idx`` indexes ``pack.meshes``; (R_co, t_co) map object to camera.
    """
    N = len(shape_idx)
    if other_depth is None:
        other_depth = np.full((K.height, K.width), np.inf)
        other_id = np.zeros((K.height, K.width), dtype=np.int64)
    boxes = np.zeros((N, 4), dtype=np.int64)
    nvis = np.zeros(N, dtype=np.int64)
    ncont = np.zeros(N, dtype=np.int64)
    nsil = np.zeros(N, dtype=np.int64)
    pts = np.zeros((N, max_samples, 2), dtype=np.int64)
    nrm = np.zeros((N, max_samples, 2))
    _score_particles(pack.V, pack.F, pack.vstart, pack.vcount, pack.fstart, pack.fcount, pack.cull,
                     np.ascontiguousarray(shape_idx, dtype=np.int64),
                     np.ascontiguousarray(R_co, dtype=float), np.ascontiguousarray(t_co, dtype=float),
                     float(K.fx), float(K.fy), float(K.cx), float(K.cy), int(K.width), int(K.height), near,
                     np.ascontiguousarray(other_depth, dtype=float), np.ascontiguousarray(other_id, dtype=np.int64),
                     int(self_id), int(max_samples), boxes, nvis, ncont, nsil, pts, nrm)
    return ParticleRenders(boxes, nvis, ncont, nsil, pts, nrm)


# ---------------------------------------------------------------------------
# debug images
# ---------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit graymap (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Binary 8-bit RGB pixmap (P6)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_netpbm(path, magic: bytes):
    data = open(path, "rb").read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return np.frombuffer(data, dtype=np.uint8, offset=pos + 1), w, h


def read_pgm(path) -> np.ndarray:
    buf, w, h = _read_netpbm(path, b"P5")
    return buf[: w * h].reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    buf, w, h = _read_netpbm(path, b"P6")
    return buf[: w * h * 3].reshape(h, w, 3).copy()


def depth_to_gray(depth: np.ndarray, max_depth: float = 10.0) -> np.ndarray:
    """Depth scaling for P5 dumps: gray = round(255 * z / max_depth), 255 = empty or beyond."""
    g = np.where(np.isfinite(depth), np.round(255.0 * np.clip(depth / max_depth, 0.0, 1.0)), 255.0)
    return g.astype(np.uint8)


def instance_to_gray(instance: np.ndarray) -> np.ndarray:
    """Instance ids written verbatim (ids above 255 saturate)."""
    return np.clip(instance, 0, 255).astype(np.uint8)
