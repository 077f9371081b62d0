import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objmap.geometry import RigidTransform, quat_to_matrix, rodrigues
from objmap.mesh import (
    MeshFormatError,
    MeshIndexError,
    PointCloud,
    ShapeDatabase,
    ShapeEntry,
    TriMesh,
    box_mesh,
    closest_points,
    load_mesh,
    merge_meshes,
    point_to_mesh_distance,
    quad_mesh,
    sample_surface,
    save_mesh,
    transform_mesh,
)

TETRA = """# unit tetrahedron
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def brute_distance(p, mesh):
    """Independent oracle: minimize over a dense barycentric grid, then
    polish with the exact closest point on each triangle's plane/edges."""
    best = math.inf
    for a, b, c in mesh.vertices[mesh.triangles]:
        best = min(best, _tri_dist(p, a, b, c))
    return best


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def _tri_dist(p, a, b, c):
    # projection inside the triangle -> plane distance, else nearest edge
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    inside = all(np.dot(np.cross(v1 - v0, q - v0), n) >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
    if inside:
        return abs(np.dot(p - a, n))
    return min(_seg_dist(p, a, b), _seg_dist(p, b, c), _seg_dist(p, c, a))


def test_load_tetrahedron(tmp_path):
    f = tmp_path / "t.obj"
    f.write_text(TETRA)
    m = load_mesh(f)
    assert (m.n_vertices, m.n_faces) == (4, 4)
    assert m.is_closed_oriented()


def test_out_of_range_index_reports_line(tmp_path):
    f = tmp_path / "bad.obj"
    f.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 9\n")
    with pytest.raises(MeshIndexError) as ei:
        load_mesh(f)
    assert ei.value.line == 6


def test_parse_error_reports_line(tmp_path):
    f = tmp_path / "bad.obj"
    f.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(MeshFormatError) as ei:
        load_mesh(f)
    assert ei.value.line == 2


def test_quads_rejected(tmp_path):
    f = tmp_path / "q.obj"
    f.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshFormatError):
        load_mesh(f)


def test_slash_indices_and_other_lines_ignored(tmp_path):
    f = tmp_path / "s.obj"
    f.write_text("o thing\nv 0 0 0\nvn 0 0 1\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/1 3/3/1\n")
    assert load_mesh(f).n_faces == 1


def test_save_load_round_trip_is_exact(tmp_path, db):
    for k in db.shape_ids:
        m = db.mesh(k)
        save_mesh(m, tmp_path / "m.obj")
        back = load_mesh(tmp_path / "m.obj")
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_array_equal(back.triangles, m.triangles)


def test_golden_file_round_trip(tmp_path):
    src = tmp_path / "t.obj"
    src.write_text(TETRA)
    save_mesh(load_mesh(src), tmp_path / "u.obj")
    body = [line.split() for line in TETRA.splitlines() if not line.startswith("#")]
    assert [line.split() for line in (tmp_path / "u.obj").read_text().splitlines()] == body


def test_degenerate_triangle_rejected():
    with pytest.raises(ValueError):
        TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        TriMesh(np.array([[0, 0, 0], [1, 0, np.nan], [0, 1, 0]], float), np.array([[0, 1, 2]]))


def test_point_cloud_rejects_nan():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_transform_identity_and_translation(db):
    m = db.mesh(1)
    np.testing.assert_array_equal(transform_mesh(m, RigidTransform.identity()).vertices, m.vertices)
    t = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(transform_mesh(m, RigidTransform.from_translation(t)).vertices, m.vertices + t)


def test_rotation_preserves_distances_and_areas(db, rng):
    m = db.mesh(3)
    q = rng.normal(size=4)
    g = RigidTransform(quat_to_matrix(q / np.linalg.norm(q)), rng.normal(size=3))
    mt = transform_mesh(m, g)
    D0 = np.linalg.norm(m.vertices[:, None] - m.vertices[None], axis=-1)
    D1 = np.linalg.norm(mt.vertices[:, None] - mt.vertices[None], axis=-1)
    assert np.abs(D0 - D1).max() < 1e-9
    np.testing.assert_allclose(mt.areas(), m.areas(), rtol=1e-9)
    np.testing.assert_array_equal(mt.triangles, m.triangles)


def test_samples_lie_on_single_triangle_plane():
    m = TriMesh(np.array([[0, 0, 1], [2, 0, 0], [0, 3, 0.5]], float), np.array([[0, 1, 2]]))
    pc = sample_surface(m, 1000, seed=1)
    n = m.face_normals()[0]
    assert np.abs((pc.points - m.vertices[0]) @ n).max() < 1e-9
    assert len(pc) == 1000


def test_sample_counts_follow_area():
    # areas 1 and 3
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
    m = TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    np.testing.assert_allclose(m.areas(), [1.0, 3.0])
    pc = sample_surface(m, 1000, seed=3)
    n_second = int(np.sum(pc.points[:, 0] >= 10))
    sigma = math.sqrt(1000 * 0.75 * 0.25)
    assert abs(n_second - 750) <= 3 * sigma


def test_sampling_is_deterministic(db):
    a = sample_surface(db.mesh(2), 500, seed=9).points
    b = sample_surface(db.mesh(2), 500, seed=9).points
    np.testing.assert_array_equal(a, b)


def test_sampling_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_surface(quad_mesh(1.0), 0)


def test_samples_are_on_the_mesh(db):
    m = db.mesh(4)
    pc = sample_surface(m, 2000, seed=0)
    assert closest_points(pc.points, m)[0].max() < 1e-9


def test_point_on_vertex_and_above_face():
    m = quad_mesh(1.0, 0.0)
    assert point_to_mesh_distance([1.0, 1.0, 0.0], m)[0] == 0.0
    d, _ = point_to_mesh_distance([0.2, -0.3, 0.7], m)
    assert d == pytest.approx(0.7, abs=1e-15)


def test_edge_and_vertex_regions():
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    assert point_to_mesh_distance([0.5, -1.0, 0.0], m)[0] == pytest.approx(1.0)  # edge region
    assert point_to_mesh_distance([-1.0, -1.0, 1.0], m)[0] == pytest.approx(math.sqrt(3))  # vertex region
    assert point_to_mesh_distance([1.0, 1.0, 0.0], m)[0] == pytest.approx(math.sqrt(0.5))  # hypotenuse


def test_accelerated_equals_brute_force(db, rng):
    m = merge_meshes([db.mesh(k) for k in db.shape_ids])
    pts = rng.uniform(-1.2, 1.2, (1000, 3))
    d0, i0, q0 = closest_points(pts, m, accelerated=False)
    d1, i1, q1 = closest_points(pts, m, accelerated=True)
    np.testing.assert_array_equal(d0, d1)
    np.testing.assert_array_equal(i0, i1)
    np.testing.assert_array_equal(q0, q1)


def test_distance_matches_independent_oracle(db, rng):
    m = db.mesh(1)
    pts = rng.uniform(-0.8, 0.8, (200, 3))
    d = closest_points(pts, m)[0]
    ref = np.array([brute_distance(p, m) for p in pts])
    np.testing.assert_allclose(d, ref, atol=1e-12)


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_distance_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh((0.4, 0.7, 0.3), (0.1, 0.0, -0.2))
    q = rng.normal(size=4)
    g = RigidTransform(quat_to_matrix(q / np.linalg.norm(q)), rng.normal(size=3))
    p = rng.uniform(-1, 1, (20, 3))
    d0 = closest_points(p, m)[0]
    d1 = closest_points(g.apply(p), transform_mesh(m, g))[0]
    np.testing.assert_allclose(d0, d1, atol=1e-9)


def test_box_is_closed_and_outward():
    m = box_mesh((1, 2, 3))
    assert m.is_closed_oriented()
    c = m.vertices[m.triangles].mean(axis=1)
    assert np.all(np.sum(c * m.face_normals(), axis=1) > 0)
    assert not quad_mesh(1.0).is_closed_oriented()


def test_database_rules(tmp_path):
    m = box_mesh((1, 1, 1))
    with pytest.raises(ValueError):
        ShapeDatabase([ShapeEntry(1, 1, m), ShapeEntry(3, 1, m)])
    db = ShapeDatabase([ShapeEntry(2, 5, m, "b"), ShapeEntry(1, 4, m, "a")])
    assert db.shape_ids == [1, 2]
    assert db.category_of(2) == 5
    np.testing.assert_array_equal(db.category_of(np.array([1, 2, 1])), [4, 5, 4])
    assert db.shapes_in_category(4) == [1]
    assert db.shapes_in_category(9) == []
    path = db.save(tmp_path / "db")
    back = ShapeDatabase.load(path)
    assert back.shape_ids == [1, 2] and back.entry(2).name == "b" and back.category_of(1) == 4
    np.testing.assert_array_equal(back.mesh(1).vertices, m.vertices)
    with pytest.raises(KeyError):
        db.mesh(3)


def test_synthetic_database_shapes(db):
    assert db.K == 4 and db.categories() == [1, 2]
    for k in db.shape_ids:
        m = db.mesh(k)
        assert m.is_closed_oriented()
        # no shape looks the same after a half turn about the vertical axis
        R = rodrigues([0, 0, 1], math.pi)
        d = closest_points(m.vertices @ R.T, m)[0]
        assert d.max() > 0.05
