"""Triangle meshes, the shape database, surface sampling and exact
point-to-mesh distance queries (brute force and BVH-accelerated)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .geometry import RigidTransform

log = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-12
SOFT_MAX_FACES = 5000
BVH_LEAF_SIZE = 4


class MeshFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MeshIndexError(MeshFormatError):
    pass


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    _bvh: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh has non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))[0])
            raise MeshIndexError(f"triangle {bad} references a vertex outside 0..{len(v) - 1}")
        if f.size:
            areas = _triangle_areas(v, f)
            if areas.min() <= MIN_TRIANGLE_AREA:
                raise ValueError(f"degenerate triangle {int(np.argmin(areas))} (area {areas.min():.3g})")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def is_closed_oriented(self) -> bool:
        """Every directed edge appears once and its reverse once, with
        positive enclosed volume: back faces can then be culled safely."""
        f = self.triangles
        if len(f) == 0:
            return False
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        n = self.n_vertices
        fwd = e[:, 0] * n + e[:, 1]
        rev = e[:, 1] * n + e[:, 0]
        if len(np.unique(fwd)) != len(fwd):
            return False
        if not np.array_equal(np.sort(fwd), np.sort(rev)):
            return False
        tri = self.vertices[f]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
        return bool(vol > 0.0)

    def bvh(self) -> "BVH":
        if self._bvh is None:
            object.__setattr__(self, "_bvh", BVH.build(self))
        return self._bvh


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(-1, 3))

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_mesh(path) -> TriMesh:
    """Read ``v x y z`` / ``f i j k`` lines (1-based, triangles only)."""
    verts, faces, face_lines = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError("vertex needs 3 coordinates", lineno)
                try:
                    verts.append([float(s) for s in parts[1:4]])
                except ValueError as e:
                    raise MeshFormatError(str(e), lineno) from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshFormatError("only triangular faces are supported", lineno)
                try:
                    idx = [int(s.split("/")[0]) for s in parts[1:]]
                except ValueError as e:
                    raise MeshFormatError(str(e), lineno) from None
                faces.append(idx)
                face_lines.append(lineno)
    n = len(verts)
    for idx, lineno in zip(faces, face_lines):
        for i in idx:
            if i < 1 or i > n:
                raise MeshIndexError(f"face references vertex {i} but only {n} vertices exist", lineno)
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3) - 1)


def format_float(x: float) -> str:
    """Shortest round-tripping decimal, without a trailing '.0'."""
    s = repr(float(x))
    if s.endswith(".0"):
        s = s[:-2]
    return "0" if s == "-0" else s


def save_mesh(mesh: TriMesh, path) -> None:
    lines = ["v " + " ".join(format_float(c) for c in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def transform_mesh(mesh: TriMesh, g: RigidTransform) -> TriMesh:
    return TriMesh(g.apply(mesh.vertices), mesh.triangles)


def merge_meshes(meshes) -> TriMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += m.n_vertices
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.vstack(verts), np.vstack(tris))


_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # bottom (-z)
        [4, 5, 6], [4, 6, 7],  # top (+z)
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [3, 0, 4], [3, 4, 7],  # -x
    ]
)


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    hx, hy, hz = (0.5 * float(s) for s in size)
    cx, cy, cz = center
    v = np.array(
        [
            [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
            [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
        ]
    ) + np.array([cx, cy, cz])
    return TriMesh(v, _BOX_FACES)


def quad_mesh(half_width: float, z: float = 0.0) -> TriMesh:
    """Square in the plane z=const, normal +z."""
    h = half_width
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]], dtype=float)
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def centered(mesh: TriMesh) -> TriMesh:
    """Translate so the bounding-box center is the origin."""
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    return TriMesh(mesh.vertices - 0.5 * (lo + hi), mesh.triangles)


# ---------------------------------------------------------------------------
# shape database
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShapeEntry:
    shape_id: int
    category: int
    mesh: TriMesh
    name: str = ""


class ShapeDatabase:
    """Ordered shapes with dense ids 1..K and a deterministic category map."""

    def __init__(self, entries):
        entries = sorted(entries, key=lambda e: e.shape_id)
        ids = [e.shape_id for e in entries]
        if ids != list(range(1, len(entries) + 1)):
            raise ValueError(f"shape ids must be dense 1..K, got {ids}")
        for e in entries:
            if e.mesh.n_faces == 0:
                raise ValueError(f"shape {e.shape_id} has an empty mesh")
            if e.mesh.n_faces > SOFT_MAX_FACES:
                log.warning("shape %d has %d faces (expected <= ~%d)", e.shape_id, e.mesh.n_faces, SOFT_MAX_FACES)
        self.entries = tuple(entries)
        self._category = np.array([0] + [e.category for e in entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)

    @property
    def K(self) -> int:
        return len(self.entries)

    @property
    def shape_ids(self) -> list[int]:
        return [e.shape_id for e in self.entries]

    def __contains__(self, k) -> bool:
        return isinstance(k, (int, np.integer)) and 1 <= int(k) <= self.K

    def mesh(self, k: int) -> TriMesh:
        return self.entry(k).mesh

    def entry(self, k: int) -> ShapeEntry:
        if k not in self:
            raise KeyError(f"unknown shape id {k}")
        return self.entries[int(k) - 1]

    def category_of(self, k):
        """c(k); vectorized over integer arrays."""
        return self._category[k] if isinstance(k, np.ndarray) else int(self._category[int(k)])

    def categories(self) -> list[int]:
        return sorted({e.category for e in self.entries})

    def shapes_in_category(self, c: int) -> list[int]:
        return [e.shape_id for e in self.entries if e.category == c]

    @classmethod
    def load(cls, manifest_path) -> "ShapeDatabase":
        manifest_path = Path(manifest_path)
        doc = json.loads(manifest_path.read_text())
        entries = []
        for rec in doc["shapes"]:
            mesh = load_mesh(manifest_path.parent / rec["mesh"])
            entries.append(ShapeEntry(int(rec["shape_id"]), int(rec["category"]), mesh, rec.get("name", "")))
        return cls(entries)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        recs = []
        for e in self.entries:
            fname = f"shape_{e.shape_id:03d}.obj"
            save_mesh(e.mesh, directory / fname)
            recs.append({"shape_id": e.shape_id, "category": e.category, "mesh": fname, "name": e.name})
        path = directory / "database.json"
        path.write_text(json.dumps({"shapes": recs}, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_surface(mesh: TriMesh, n: int, seed=None) -> PointCloud:
    """Area-weighted samples: each triangle gets floor(n * a_i / A) points,
    the remainder is drawn multinomially from the fractional parts."""
    if mesh.n_faces == 0:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    expected = n * areas / areas.sum()
    counts = np.floor(expected).astype(np.int64)
    rest = n - int(counts.sum())
    if rest > 0:
        frac = expected - counts
        counts += rng.multinomial(rest, frac / frac.sum())
    face = np.repeat(np.arange(mesh.n_faces), counts)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    tri = mesh.vertices[mesh.triangles[face]]
    pts = (1.0 - s)[:, None] * tri[:, 0] + (s * (1.0 - r2))[:, None] * tri[:, 1] + (s * r2)[:, None] * tri[:, 2]
    return PointCloud(pts, mesh.face_normals()[face])


# ---------------------------------------------------------------------------
# point-to-triangle distance
# ---------------------------------------------------------------------------


@njit(cache=True)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle abc to p, by Voronoi region of the triangle."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _tri_d2(p, V, F, f):
    i, j, k = F[f, 0], F[f, 1], F[f, 2]
    qx, qy, qz = _closest_on_triangle(
        p[0], p[1], p[2], V[i, 0], V[i, 1], V[i, 2], V[j, 0], V[j, 1], V[j, 2], V[k, 0], V[k, 1], V[k, 2]
    )
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz, qx, qy, qz


@njit(cache=True)
def _brute_force(points, V, F, out_d2, out_idx, out_q):
    for n in range(points.shape[0]):
        best, bi = np.inf, -1
        bq0 = bq1 = bq2 = 0.0
        for f in range(F.shape[0]):
            d2, qx, qy, qz = _tri_d2(points[n], V, F, f)
            if d2 < best:
                best, bi, bq0, bq1, bq2 = d2, f, qx, qy, qz
        out_d2[n] = best
        out_idx[n] = bi
        out_q[n, 0], out_q[n, 1], out_q[n, 2] = bq0, bq1, bq2


@njit(cache=True)
def _box_d2(p, lo, hi):
    s = 0.0
    for a in range(3):
        if p[a] < lo[a]:
            d = lo[a] - p[a]
            s += d * d
        elif p[a] > hi[a]:
            d = p[a] - hi[a]
            s += d * d
    return s


@njit(cache=True)
def _bvh_query(points, V, F, node_lo, node_hi, node_left, node_right, node_start, node_count, order,
               out_d2, out_idx, out_q):
    stack = np.empty(128, dtype=np.int64)
    for n in range(points.shape[0]):
        p = points[n]
        best, bi = np.inf, -1
        bq0 = bq1 = bq2 = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slack keeps ties and rounding from pruning the brute-force winner
            if _box_d2(p, node_lo[node], node_hi[node]) > best * (1.0 + 1e-12) + 1e-300:
                continue
            if node_left[node] < 0:
                for s in range(node_start[node], node_start[node] + node_count[node]):
                    f = order[s]
                    d2, qx, qy, qz = _tri_d2(p, V, F, f)
                    if d2 < best or (d2 == best and f < bi):
                        best, bi, bq0, bq1, bq2 = d2, f, qx, qy, qz
            else:
                l, r = node_left[node], node_right[node]
                dl = _box_d2(p, node_lo[l], node_hi[l])
                dr = _box_d2(p, node_lo[r], node_hi[r])
                # push the farther child first so the nearer is visited first
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        out_d2[n] = best
        out_idx[n] = bi
        out_q[n, 0], out_q[n, 1], out_q[n, 2] = bq0, bq1, bq2


@dataclass(frozen=True, eq=False)
class BVH:
    """Axis-aligned bounding-volume hierarchy over triangles (median split)."""

    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    order: np.ndarray

    @classmethod
    def build(cls, mesh: TriMesh, leaf_size: int = BVH_LEAF_SIZE) -> "BVH":
        tri = mesh.vertices[mesh.triangles]
        t_lo, t_hi = tri.min(1), tri.max(1)
        cent = tri.mean(1)
        order = np.arange(mesh.n_faces)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s, e):
            idx = order[s:e]
            lo.append(t_lo[idx].min(0))
            hi.append(t_hi[idx].max(0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        root = new_node(0, len(order))
        todo = [(root, 0, len(order))]
        while todo:
            node, s, e = todo.pop()
            if e - s <= leaf_size:
                continue
            idx = order[s:e]
            c = cent[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
            m = (s + e) // 2
            left[node] = new_node(s, m)
            right[node] = new_node(m, e)
            count[node] = 0
            todo.append((left[node], s, m))
            todo.append((right[node], m, e))
        depth_bound = 2 * math.ceil(math.log2(max(len(order), 2))) + 4
        if depth_bound > 120:
            raise ValueError("mesh too large for the fixed traversal stack")
        return cls(np.array(lo), np.array(hi), np.array(left), np.array(right), np.array(start), np.array(count), order)


def closest_points(points, mesh: TriMesh, accelerated: bool = True):
    """Exact closest points on ``mesh``.

    Returns (distances, triangle indices, closest points). The accelerated
    and brute-force paths share the same per-triangle kernel and tie-break
    (lowest triangle index), so they agree bit for bit.
    """
    if mesh.n_faces == 0:
        raise ValueError("mesh is empty")
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    d2 = np.empty(len(pts))
    idx = np.empty(len(pts), dtype=np.int64)
    q = np.empty((len(pts), 3))
    V, F = mesh.vertices, mesh.triangles
    if accelerated:
        b = mesh.bvh()
        _bvh_query(pts, V, F, b.node_lo, b.node_hi, b.node_left, b.node_right, b.node_start, b.node_count, b.order,
                   d2, idx, q)
    else:
        _brute_force(pts, V, F, d2, idx, q)
    return np.sqrt(d2), idx, q


def point_to_mesh_distance(p, mesh: TriMesh, accelerated: bool = True) -> tuple[float, int]:
    d, idx, _ = closest_points(np.asarray(p, dtype=float).reshape(1, 3), mesh, accelerated)
    return float(d[0]), int(idx[0])


def point_to_mesh_distances(points, mesh: TriMesh, accelerated: bool = True):
    d, idx, _ = closest_points(points, mesh, accelerated)
    return d, idx


def synthetic_database() -> ShapeDatabase:
    """Four furniture-like shapes in two categories, none of them rotationally
    symmetric about the vertical axis (so azimuth is identifiable).

    Canonical frame: z up, origin at the bounding-box center.
    """
    chair = merge_meshes([
        box_mesh((0.46, 0.44, 0.08), (0.0, 0.0, 0.44)),
        box_mesh((0.46, 0.06, 0.48), (0.0, -0.19, 0.72)),
        box_mesh((0.12, 0.12, 0.40), (0.0, 0.0, 0.20)),
    ])
    armchair = merge_meshes([
        box_mesh((0.62, 0.56, 0.24), (0.0, 0.04, 0.22)),
        box_mesh((0.62, 0.14, 0.52), (0.0, -0.28, 0.56)),
        box_mesh((0.10, 0.42, 0.18), (0.26, 0.04, 0.43)),
    ])
    desk = merge_meshes([
        box_mesh((1.00, 0.50, 0.05), (0.0, 0.0, 0.725)),
        box_mesh((0.40, 0.40, 0.05), (0.30, 0.45, 0.725)),
        box_mesh((0.05, 0.46, 0.70), (-0.45, 0.0, 0.35)),
        box_mesh((0.36, 0.80, 0.70), (0.30, 0.20, 0.35)),
    ])
    cabinet = merge_meshes([
        box_mesh((0.60, 0.40, 0.70), (0.0, 0.0, 0.35)),
        box_mesh((0.30, 0.40, 0.35), (0.15, 0.0, 0.875)),
    ])
    return ShapeDatabase([
        ShapeEntry(1, 1, centered(chair), "chair"),
        ShapeEntry(2, 1, centered(armchair), "armchair"),
        ShapeEntry(3, 2, centered(desk), "desk"),
        ShapeEntry(4, 2, centered(cabinet), "cabinet"),
    ])


def write_synthetic_database(directory) -> Path:
    return synthetic_database().save(directory)


__all__ = [
    "BVH", "MeshFormatError", "MeshIndexError", "PointCloud", "ShapeDatabase", "ShapeEntry", "TriMesh",
    "box_mesh", "centered", "closest_points", "load_mesh", "merge_meshes", "point_to_mesh_distance",
    "point_to_mesh_distances", "quad_mesh", "sample_surface", "save_mesh", "synthetic_database",
    "transform_mesh", "write_synthetic_database",
]
