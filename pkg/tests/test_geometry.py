import itertools
import math

import numpy as np
import pytest

from dpfnet import geometry
from dpfnet.core import Rng
from dpfnet.errors import DegenerateInputError, EmptyInputError, ParameterError, ParseError
from dpfnet.geometry import Mesh

CUBE_OFF = """OFF
8 6 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 2 3 7 6
4 1 2 6 5
4 0 4 7 3
"""


@pytest.fixture
def cube_path(tmp_path):
    p = tmp_path / "cube.off"
    p.write_text(CUBE_OFF)
    return p


def test_load_off_cube(cube_path):
    mesh = geometry.load_mesh(cube_path)
    assert len(mesh.vertices) == 8
    assert len(mesh.faces) == 12
    assert mesh.face_areas().sum() == pytest.approx(6.0)


def test_load_obj_quad_fan(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n")
    mesh = geometry.load_mesh(p)
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_load_rejects_out_of_range_index(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    with pytest.raises(ParseError) as err:
        geometry.load_mesh(p)
    assert err.value.line == 6


def test_load_malformed_line_number(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(ParseError, match=":2"):
        geometry.load_mesh(p)


def test_load_empty(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("# nothing\n")
    with pytest.raises(EmptyInputError):
        geometry.load_mesh(p)


def test_normalize_offset_cube(cube_path):
    mesh = geometry.load_mesh(cube_path)
    moved = Mesh(mesh.vertices + 4.5, mesh.faces)  # cube centred at (5, 5, 5)
    out, stats = geometry.normalize_mesh(moved)
    np.testing.assert_allclose(stats.centroid, [5, 5, 5], atol=1e-12)
    assert stats.scale == pytest.approx(math.sqrt(3), abs=1e-12)
    np.testing.assert_allclose(geometry.surface_centroid(out), 0, atol=1e-9)
    assert geometry.diameter(out.vertices) == pytest.approx(1.0, abs=1e-9)


def test_normalize_idempotent(cube_path):
    out, _ = geometry.normalize_mesh(geometry.load_mesh(cube_path))
    again, stats = geometry.normalize_mesh(out)
    np.testing.assert_allclose(stats.centroid, 0, atol=1e-9)
    assert stats.scale == pytest.approx(1.0, abs=1e-9)


def test_normalize_sphere_radius_three():
    mesh = geometry.synth_shape("sphere", {"radius": 3.0}, resolution=16)
    out, stats = geometry.normalize_mesh(mesh)
    # brute-force max pairwise distance over the raw vertices
    brute = max(np.linalg.norm(a - b) for a, b in itertools.combinations(mesh.vertices, 2))
    assert stats.scale == pytest.approx(brute, abs=1e-12)
    assert stats.scale == pytest.approx(6.0, abs=1e-9)
    assert np.linalg.norm(out.vertices, axis=1).max() <= 0.5 + 1e-9


def test_normalize_roundtrip():
    mesh = geometry.synth_shape("torus", {"major": 2.0, "minor": 0.5}, 12)
    mesh = Mesh(mesh.vertices * 3.0 + np.array([1.0, -2.0, 0.5]), mesh.faces)
    out, stats = geometry.normalize_mesh(mesh)
    np.testing.assert_allclose(stats.invert(out.vertices), mesh.vertices, atol=1e-9)


def test_normalize_degenerate():
    mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(DegenerateInputError):
        geometry.normalize_mesh(mesh)


def _barycentric(p, tri):
    a, b, c = tri
    T = np.stack([b - a, c - a], axis=1)
    uv, *_ = np.linalg.lstsq(T, p - a, rcond=None)
    return uv, np.linalg.norm(T @ uv - (p - a))


def test_samples_inside_single_triangle():
    tri = np.array([[0.0, 0, 0], [2, 0, 1], [0, 1, 3]])
    pts = geometry.sample_surface(Mesh(tri, [[0, 1, 2]]), 500, Rng(0))
    for p in pts:
        (u, v), resid = _barycentric(p, tri)
        assert u >= -1e-12 and v >= -1e-12 and u + v <= 1 + 1e-12
        assert resid < 1e-9


def test_selection_proportional_to_area():
    # areas 1 and 3
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0],
                      [5, 0, 0], [8, 0, 0], [5, 2, 0.0]])
    mesh = Mesh(verts, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_allclose(mesh.face_areas(), [1, 3])
    pts = geometry.sample_surface(mesh, 100_000, Rng(3))
    frac = np.mean(pts[:, 0] < 2.5)
    assert abs(frac - 0.25) < 0.01


def test_zero_area_faces_never_sampled():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [9, 9, 9.0]])
    mesh = Mesh(verts, [[0, 1, 2], [3, 3, 3]])
    pts = geometry.sample_surface(mesh, 2000, Rng(0))
    assert np.all(pts < 1.0 + 1e-12)


def test_cube_faces_evenly_sampled(cube_path):
    mesh = geometry.load_mesh(cube_path)
    n = 100_000
    pts = geometry.sample_surface(mesh, n, Rng(9))
    counts = []
    for axis in range(3):
        for val in (0.0, 1.0):
            counts.append(np.sum(np.abs(pts[:, axis] - val) < 1e-12))
    assert sum(counts) == n
    for c in counts:
        assert abs(c - n / 6) <= 0.02 * n / 6


def test_sampling_zero_area_mesh_fails():
    mesh = Mesh(np.zeros((3, 3)), [[0, 1, 2]])
    with pytest.raises(DegenerateInputError):
        geometry.sample_surface(mesh, 10, Rng(0))


def test_sphere_face_count_and_radius():
    mesh = geometry.synth_shape("sphere", {"radius": 0.5}, resolution=16)
    assert len(mesh.faces) == 512
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.5, atol=1e-9)


def test_torus_implicit_identity():
    mesh = geometry.synth_shape("torus", {"major": 1.0, "minor": 0.3}, resolution=24)
    x, y, z = mesh.vertices.T
    np.testing.assert_allclose((np.sqrt(x ** 2 + y ** 2) - 1.0) ** 2 + z ** 2, 0.09, atol=1e-9)


def test_torus_rejects_bad_radii():
    with pytest.raises(ParameterError):
        geometry.synth_shape("torus", {"major": 0.3, "minor": 0.5})


def test_superquadric_unit_exponents_is_ellipsoid():
    p = {"a1": 1.0, "a2": 0.5, "a3": 0.25, "e1": 1.0, "e2": 1.0}
    mesh = geometry.synth_shape("superquadric", p, resolution=20)
    x, y, z = mesh.vertices.T
    np.testing.assert_allclose(x ** 2 + (y / 0.5) ** 2 + (z / 0.25) ** 2, 1.0, atol=1e-9)


def test_box_surface_area_and_closure():
    mesh = geometry.synth_shape("box", {"sx": 1.0, "sy": 2.0, "sz": 3.0}, resolution=4)
    assert mesh.face_areas().sum() == pytest.approx(2 * (2 + 3 + 6))
    np.testing.assert_allclose(np.abs(mesh.vertices).max(axis=0), [0.5, 1.0, 1.5])


def test_synth_dataset_deterministic_and_degenerate_range():
    a = geometry.synth_params("torus", 10, None, seed=4)
    b = geometry.synth_params("torus", 10, None, seed=4)
    assert a == b
    same = geometry.synth_dataset("sphere", 3, {"radius": (0.7, 0.7)}, seed=1, resolution=8)
    for m in same[1:]:
        np.testing.assert_array_equal(m.vertices, same[0].vertices)


def test_synth_rejects_empty_range():
    with pytest.raises(ParameterError):
        geometry.synth_params("torus", 3, {"minor": (0.4, 0.2)}, seed=0)
    with pytest.raises(ParameterError):
        geometry.synth_params("torus", 0, None, seed=0)


def test_two_hundred_tori_satisfy_implicit_surface():
    meshes = geometry.synth_dataset("torus", 200, seed=5, resolution=10, normalize=False)
    for m in meshes:
        R, r = m.meta["major"], m.meta["minor"]
        x, y, z = m.vertices.T
        np.testing.assert_allclose((np.sqrt(x ** 2 + y ** 2) - R) ** 2 + z ** 2, r * r, atol=1e-9)


def test_sampled_points_lie_on_triangle_planes():
    mesh = geometry.synth_shape("superquadric", {"a1": 1, "a2": 0.7, "a3": 0.4, "e1": 0.5, "e2": 1.4}, 10)
    rng = Rng(2)
    pts = geometry.sample_surface(mesh, 300, rng)
    tris = mesh.triangles()
    good = mesh.face_areas() > 0
    tris = tris[good]
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    for p in pts:
        dist = np.abs(((p - tris[:, 0]) * normals).sum(1))
        assert dist.min() < 1e-9


def test_global_normalization_uses_aggregate_center():
    m1 = geometry.synth_shape("sphere", {"radius": 1.0}, 8)
    m2 = Mesh(m1.vertices + np.array([4.0, 0, 0]), m1.faces)
    c = geometry.aggregate_centroid([m1, m2])
    np.testing.assert_allclose(c, [2.0, 0, 0], atol=1e-9)
    out, stats = geometry.normalize_mesh(m2, centroid=c, rescale=False)
    assert stats.scale == 1.0
