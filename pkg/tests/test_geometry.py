import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rirfield.errors import EmptyMesh, InfeasibleSampleCount, MalformedMesh
from rirfield.geometry import (
    BoundingBox,
    TriangleMesh,
    bounding_box,
    box_mesh,
    contains,
    eliminate_samples,
    load_obj,
    min_pairwise_distance,
    poisson_disk_sample,
    read_bounce_csv,
    sample_surface,
    save_obj,
    write_bounce_csv,
)

CUBE_V = "\n".join(f"v {x} {y} {z}" for x in (0, 1) for y in (0, 1) for z in (0, 1))
# vertex i = (x, y, z) with x the high bit
CUBE_QUADS = ["1 2 4 3", "5 7 8 6", "1 5 6 2", "3 4 8 7", "1 3 7 5", "2 6 8 4"]


def unit_cube() -> TriangleMesh:
    return box_mesh(BoundingBox(np.zeros(3), np.ones(3)))


def on_surface(mesh: TriangleMesh, p: np.ndarray, tol: float = 1e-6) -> bool:
    """True if p lies on some triangle within tol (plane distance and barycentric bounds)."""
    for a, b, c in mesh.corners:
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        if abs(np.dot(p - a, n)) > tol:
            continue
        m = np.array([b - a, c - a]).T
        uv, *_ = np.linalg.lstsq(m, p - a, rcond=None)
        if uv.min() >= -tol and uv.sum() <= 1 + tol:
            return True
    return False


# --- load_obj ---------------------------------------------------------------


def test_load_triangulated_cube(tmp_path):
    save_obj(tmp_path / "c.obj", unit_cube())
    mesh = load_obj(tmp_path / "c.obj")
    assert mesh.vertices.shape == (8, 3) and mesh.triangles.shape == (12, 3)
    assert mesh.area == pytest.approx(6.0)


def test_load_quad_cube_fan_triangulates(tmp_path):
    f = tmp_path / "q.obj"
    f.write_text(CUBE_V + "\n" + "\n".join(f"f {q}" for q in CUBE_QUADS) + "\n")
    mesh = load_obj(f)
    assert mesh.triangles.shape == (12, 3)
    assert mesh.area == pytest.approx(6.0)


def test_load_obj_ignores_other_records_and_handles_slashes(tmp_path):
    f = tmp_path / "t.obj"
    f.write_text("# comment\no tri\nv 0 0 0\nv 1 0 0\nv 0 2 3\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 -1/1/1\n")
    mesh = load_obj(f)
    np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2]])


def test_load_obj_empty(tmp_path):
    f = tmp_path / "e.obj"
    f.write_text("v 0 0 0\nv 1 0 0\n")
    with pytest.raises(EmptyMesh):
        load_obj(f)


@pytest.mark.parametrize("body", ["v 0 0\nf 1 2 3\n", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", "v a b c\n", "v 0 0 0\nf 1 1\n"])
def test_load_obj_malformed(tmp_path, body):
    f = tmp_path / "m.obj"
    f.write_text(body)
    with pytest.raises(MalformedMesh):
        load_obj(f)


def test_mesh_validation():
    with pytest.raises(EmptyMesh):
        TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(MalformedMesh):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]])  # zero area


# --- bounding boxes -----------------------------------------------------------


def test_bounding_box_examples():
    cube = unit_cube()
    b = bounding_box(cube)
    np.testing.assert_array_equal(b.min_corner, 0.0)
    np.testing.assert_array_equal(b.max_corner, 1.0)
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 2, 3]], float), [[0, 1, 2]])
    np.testing.assert_array_equal(bounding_box(tri).max_corner, [1, 2, 3])
    moved = TriangleMesh(cube.vertices + 5.0, cube.triangles)
    np.testing.assert_array_equal(bounding_box(moved).min_corner, 5.0)
    np.testing.assert_array_equal(bounding_box(moved).max_corner, 6.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    st.lists(st.floats(0.01, 100), min_size=3, max_size=3),
    st.integers(0, 1000),
)
def test_bounding_box_affine_equivariance(shift, scale, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1, 1, (6, 3))
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    s, t = np.array(scale), np.array(shift)
    b = bounding_box(mesh)
    b2 = bounding_box(TriangleMesh(v * s + t, mesh.triangles))
    np.testing.assert_allclose(b2.min_corner, b.min_corner * s + t, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(b2.max_corner, b.max_corner * s + t, rtol=1e-12, atol=1e-9)


def test_contains_closed_box():
    box = BoundingBox(np.zeros(3), np.ones(3))
    assert contains(box, (0.5, 0.5, 0.5))
    assert contains(box, (1, 1, 1))
    assert contains(box, (0, 0, 0))
    assert not contains(box, (1.0001, 0, 0))


def test_box_mesh_outward_normals_and_area():
    box = BoundingBox(np.array([1.0, 2.0, 0.0]), np.array([4.0, 3.0, 2.5]))
    mesh = box_mesh(box)
    assert mesh.triangles.shape == (12, 3)
    ext = box.extent
    assert mesh.area == pytest.approx(2 * (ext[0] * ext[1] + ext[0] * ext[2] + ext[1] * ext[2]))
    centre = (box.min_corner + box.max_corner) / 2
    for a, b, c in mesh.corners:
        n = np.cross(b - a, c - a)
        assert np.dot(n, (a + b + c) / 3 - centre) > 0


def test_normalize_maps_box_to_unit_cube():
    box = BoundingBox(np.array([1.0, 2.0, 0.0]), np.array([4.0, 3.0, 2.5]))
    np.testing.assert_allclose(box.normalize(box.min_corner), -1.0)
    np.testing.assert_allclose(box.normalize(box.max_corner), 1.0)


# --- sampling -----------------------------------------------------------------


def test_area_uniform_sampling():
    # two triangles with area ratio 3:1
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], float)
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    _, face = sample_surface(mesh, 10_000, np.random.default_rng(0))
    frac = np.mean(face == 0)
    assert abs(frac - 0.75) < 0.03


def test_poisson_unit_cube_spacing():
    bps = poisson_disk_sample(unit_cube(), 100, seed=0)
    assert len(bps) == 100
    assert bps.radius == pytest.approx(min_pairwise_distance(bps.points))
    assert bps.radius > 0.12


def test_poisson_points_on_surface():
    mesh = box_mesh(BoundingBox(np.zeros(3), np.array([3.0, 2.0, 1.5])))
    bps = poisson_disk_sample(mesh, 40, seed=7)
    assert all(on_surface(mesh, p) for p in bps.points)


def test_poisson_k1_and_determinism():
    mesh = unit_cube()
    one = poisson_disk_sample(mesh, 1, seed=3)
    assert len(one) == 1 and on_surface(mesh, one.points[0])
    a = poisson_disk_sample(mesh, 50, seed=11)
    b = poisson_disk_sample(mesh, 50, seed=11)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, poisson_disk_sample(mesh, 50, seed=12).points)


def test_poisson_infeasible():
    with pytest.raises(InfeasibleSampleCount):
        poisson_disk_sample(unit_cube(), 0)
    with pytest.raises(InfeasibleSampleCount):
        eliminate_samples(np.zeros((3, 3)), 4, 0.1)


def test_elimination_spreads_better_than_random():
    mesh = unit_cube()
    rng = np.random.default_rng(0)
    rand, _ = sample_surface(mesh, 64, rng)
    assert poisson_disk_sample(mesh, 64, seed=0).radius > 2 * min_pairwise_distance(rand)


def test_bounce_csv_round_trip(tmp_path):
    bps = poisson_disk_sample(unit_cube(), 20, seed=5, mesh_id="cube")
    write_bounce_csv(tmp_path / "b.csv", bps)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "# K=20 seed=5" and lines[1] == "x,y,z"
    back = read_bounce_csv(tmp_path / "b.csv", "cube")
    np.testing.assert_array_equal(back.points, bps.points)
    assert back.seed == 5
