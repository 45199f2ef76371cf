import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from meshes import looking_down_z, make_cube, make_random_hull, make_sphere, make_square
from salientpose.geometry import TriMesh, sample_surface
from salientpose.raster import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    default_visibility_eps,
    nearest_rotation,
    project,
    rasterize_depth,
    rasterize_scene,
    read_depth_png,
    read_raw,
    visible_mask,
    write_depth_png,
    write_raw,
)

# --- Fixtures ---


@pytest.fixture
def camera32():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)


def _ray_cast_depth(mesh, pose, K):
    """Brute-force oracle: nearest ray/triangle hit through every pixel centre."""
    cam = pose.apply(mesh.vertices)
    tris = cam[mesh.triangles]
    depth = np.zeros((K.height, K.width))
    for row in range(K.height):
        for col in range(K.width):
            d = np.array([(col + 0.5 - K.cx) / K.fx, (row + 0.5 - K.cy) / K.fy, 1.0])
            best = np.inf
            for a, b, c in tris:
                e1, e2 = b - a, c - a
                p = np.cross(d, e2)
                det = e1 @ p
                if abs(det) < 1e-12:
                    continue
                s = -a
                u = (s @ p) / det
                q = np.cross(s, e1)
                v = (d @ q) / det
                t = (e2 @ q) / det
                if u >= 0 and v >= 0 and u + v <= 1 and 0 < t < best:
                    best = t
            if np.isfinite(best):
                depth[row, col] = best
    return depth


# --- Poses and projection ---


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_compose_with_inverse_is_identity():
    pose = Pose(Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix(), [1.0, -2.0, 300.0])
    identity = pose.compose(pose.inverse())
    np.testing.assert_allclose(identity.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(identity.translation, np.zeros(3), atol=1e-12)


def test_pose_matrix_round_trip():
    pose = Pose(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), [4.0, 5.0, 6.0])
    again = Pose.from_matrix(pose.as_matrix())
    np.testing.assert_array_equal(again.rotation, pose.rotation)
    np.testing.assert_array_equal(again.translation, pose.translation)


def test_nearest_rotation_snaps_noisy_matrix():
    R = Rotation.from_rotvec([0.3, -0.1, 0.7]).as_matrix()
    snapped = nearest_rotation(R + 1e-5)
    np.testing.assert_allclose(snapped.T @ snapped, np.eye(3), atol=1e-12)
    assert np.linalg.det(snapped) == pytest.approx(1.0)
    np.testing.assert_allclose(snapped, R, atol=1e-4)


def test_project_flags_points_behind_camera(camera32):
    uv, z, valid = project(camera32, Pose.identity(), [[0.0, 0.0, 100.0], [0.0, 0.0, -5.0], [1.0, 0.0, 0.0]])
    assert valid.tolist() == [True, False, False]
    np.testing.assert_allclose(uv[0], [16.0, 16.0])
    assert np.isnan(uv[1]).all() and np.isnan(uv[2]).all()
    assert z[1] == -5.0


def test_intrinsics_scaling(camera32):
    double = camera32.scaled(2)
    assert (double.width, double.height) == (64, 64)
    assert double.fx == 200.0 and double.cx == 32.0
    np.testing.assert_array_equal(CameraIntrinsics.from_matrix(camera32.matrix, 32, 32).matrix, camera32.matrix)


def test_project_is_equivariant_under_pose_composition(small_camera):
    rng = np.random.default_rng(21)
    points = rng.uniform(-50.0, 50.0, size=(200, 3))
    for _ in range(20):
        pose = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-20, 20, 3) + [0, 0, 600])
        G = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-30, 30, 3))
        uv_a, z_a, valid_a = project(small_camera, pose.compose(G), points)
        uv_b, z_b, valid_b = project(small_camera, pose, G.apply(points))
        assert valid_a.all()
        np.testing.assert_array_equal(valid_a, valid_b)
        np.testing.assert_allclose(uv_a, uv_b, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(z_a, z_b, rtol=1e-9)


def test_default_visibility_eps():
    assert default_visibility_eps(10.0) == 0.5
    assert default_visibility_eps(1000.0) == pytest.approx(2.0)


# --- Rasterization ---


def test_square_covers_expected_pixels_at_exact_depth(camera32):
    depth = rasterize_depth(make_square(size=2.0), looking_down_z(100.0), camera32)
    covered = np.argwhere(depth.values > 0)
    assert sorted(map(tuple, covered.tolist())) == [(16, 16), (16, 17), (17, 16), (17, 17)]
    assert np.all(depth.values[16:18, 16:18] == 100.0)


def test_shared_edge_is_covered_exactly_once(camera32):
    square = make_square(size=4.0)
    pose = looking_down_z(100.0)
    first = TriMesh(square.vertices, square.triangles[:1])
    second = TriMesh(square.vertices, square.triangles[1:])
    mask_a = rasterize_depth(first, pose, camera32).values > 0
    mask_b = rasterize_depth(second, pose, camera32).values > 0
    assert not (mask_a & mask_b).any()
    assert int((mask_a | mask_b).sum()) == 16


def test_double_resolution_quadruples_coverage(camera32):
    pose = looking_down_z(100.0)
    low = rasterize_depth(make_square(size=2.0), pose, camera32)
    high = rasterize_depth(make_square(size=2.0), pose, camera32.scaled(2))
    assert int((high.values > 0).sum()) == 4 * int((low.values > 0).sum())


def _pool(values, reduce):
    h, w = values.shape
    return reduce(values.reshape(h // 2, 2, w // 2, 2), axis=(1, 3))


@pytest.mark.parametrize("slope", [(0.0, 0.0), (0.2, 0.0), (-0.15, 0.3)])
def test_double_resolution_depth_pools_to_low_resolution(slope):
    K = CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32)
    corners = np.array([[-200.0, -200.0], [200.0, -200.0], [0.0, 300.0]])
    vertices = np.column_stack([corners, 100.0 + corners @ np.array(slope)])
    plane = TriMesh(vertices, [[0, 1, 2]])
    low = rasterize_depth(plane, Pose.identity(), K).values
    high = rasterize_depth(plane, Pose.identity(), K.scaled(2)).values
    assert np.all(low > 0) and np.all(high > 0)
    # The four subpixel centres sit symmetrically around the low-resolution centre.
    lo, hi = _pool(high, np.min), _pool(high, np.max)
    assert np.all(lo <= low * (1 + 1e-9))
    assert np.all(low <= hi * (1 + 1e-9))
    if slope == (0.0, 0.0):
        np.testing.assert_array_equal(lo, low)


def test_double_resolution_of_crossing_planes_never_reads_nearer_than_pooled():
    K = CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32)
    corners = np.array([[-200.0, -200.0], [200.0, -200.0], [0.0, 300.0]])
    first = np.column_stack([corners, 100.0 + 0.2 * corners[:, 0]])
    second = np.column_stack([corners, 100.0 - 0.1 * corners[:, 1]])
    scene = [(TriMesh(first, [[0, 1, 2]]), Pose.identity()), (TriMesh(second, [[0, 1, 2]]), Pose.identity())]
    low, _ = rasterize_scene(scene, K)
    high, _ = rasterize_scene(scene, K.scaled(2))
    assert np.all(_pool(high.values, np.min) <= low.values * (1 + 1e-9))


def test_tilted_plane_depth_is_perspective_correct():
    K = CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32)
    slope, base = 0.2, 100.0
    corners = np.array([[-200.0, -200.0], [200.0, -200.0], [0.0, 300.0]])
    vertices = np.column_stack([corners, base + slope * corners[:, 0]])
    depth = rasterize_depth(TriMesh(vertices, [[0, 1, 2]]), Pose.identity(), K)
    cols = np.arange(K.width) + 0.5
    expected_row = base / (1.0 - slope * (cols - K.cx) / K.fx)
    assert np.all(depth.values > 0)
    np.testing.assert_allclose(depth.values, np.tile(expected_row, (K.height, 1)), rtol=1e-9)


def test_rotated_cube_matches_ray_casting(small_camera):
    cube = make_cube(edge=100.0)
    pose = Pose(Rotation.from_euler("xyz", [25, -40, 15], degrees=True).as_matrix(), [10.0, -5.0, 600.0])
    depth = rasterize_depth(cube, pose, small_camera).values
    oracle = _ray_cast_depth(cube, pose, small_camera)
    both = (depth > 0) & (oracle > 0)
    assert both.sum() > 100
    np.testing.assert_allclose(depth[both], oracle[both], rtol=1e-6)
    # Coverage may differ only on silhouette pixels whose centre is on an edge.
    assert int(((depth > 0) != (oracle > 0)).sum()) <= 2


def test_near_plane_clipping():
    K = CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32)
    tri = TriMesh(np.array([[-10.0, -10.0, 50.0], [10.0, -10.0, 50.0], [0.0, 30.0, -50.0]]), [[0, 1, 2]])
    depth = rasterize_depth(tri, Pose.identity(), K).values
    covered = depth[depth > 0]
    assert covered.size > 0
    assert covered.min() >= 0.1
    assert covered.max() <= 50.0


def test_mesh_behind_camera_renders_nothing(cube, small_camera):
    depth = rasterize_depth(cube, looking_down_z(-500.0), small_camera)
    assert not depth.values.any()


def test_front_object_owns_overlap(small_camera):
    near = make_cube(edge=40.0, center=(0.0, 0.0, 0.0))
    far = make_cube(edge=100.0, center=(0.0, 0.0, 200.0))
    pose = looking_down_z(500.0)
    depth, owner = rasterize_scene([(far, pose), (near, pose)], small_camera)
    assert owner[32, 32] == 1
    assert depth.values[32, 32] == pytest.approx(480.0)
    assert owner[32, 26] == 0
    assert owner[0, 0] == -1 and depth.values[0, 0] == 0.0


# --- Visibility ---


def test_only_front_face_of_cube_is_visible(cube, small_camera):
    pose = looking_down_z(500.0)
    samples = sample_surface(cube, 3000, seed=1)
    depth = rasterize_depth(cube, pose, small_camera)
    mask = visible_mask(samples, pose, small_camera, depth, eps=0.5)
    front = samples.normals[:, 2] < -0.5
    assert not (mask & ~front).any()
    # Samples on the rim project to pixels whose centre misses the face.
    assert mask[front].mean() > 0.9


def test_occluded_samples_are_hidden(small_camera):
    target = make_cube(edge=100.0, center=(0.0, 0.0, 0.0))
    blocker = make_cube(edge=300.0, center=(0.0, 0.0, -250.0))
    pose = looking_down_z(700.0)
    samples = sample_surface(target, 500, seed=2)
    scene_depth, _ = rasterize_scene([(target, pose), (blocker, pose)], small_camera)
    assert not visible_mask(samples, pose, small_camera, scene_depth, eps=0.5).any()


def _segment_to_camera_is_blocked(point, tris, margin=1e-6):
    """True when the segment from the camera centre to ``point`` crosses a triangle first."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = b - a, c - a
    p = np.cross(point, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-12
    det = np.where(ok, det, 1.0)
    s = -a
    u = np.einsum("ij,ij->i", s, p) / det
    q = np.cross(s, e1)
    v = (q @ point) / det
    t = np.einsum("ij,ij->i", e2, q) / det
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < 1.0 - margin)
    return bool(hit.any())


def test_visible_samples_on_convex_meshes_see_the_camera(small_camera):
    rng = np.random.default_rng(5)
    for _ in range(20):
        mesh = make_random_hull(rng, count=30, radius=40.0)
        assert len(mesh.triangles) <= 500
        pose = Pose(Rotation.random(random_state=rng).as_matrix(),
                    [rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(250, 350)])
        samples = sample_surface(mesh, 400, seed=int(rng.integers(1 << 30)))
        depth = rasterize_depth(mesh, pose, small_camera)
        mask = visible_mask(samples, pose, small_camera, depth, eps=20.0)

        tris = pose.apply(mesh.vertices)[mesh.triangles]
        clear = np.array([not _segment_to_camera_is_blocked(p, tris) for p in pose.apply(samples.points)])
        assert not (mask & ~clear).any()
        # Misses are silhouette samples whose pixel centre falls off the mesh.
        assert mask.sum() >= 0.5 * clear.sum()


@pytest.mark.slow
def test_sphere_front_hemisphere_is_visible():
    radius, distance = 50.0, 50000.0
    # The silhouette spans about 1000 pixels so rim losses stay small.
    K = CameraIntrinsics(fx=1e6, fy=1e6, cx=1024.0, cy=1024.0, width=2048, height=2048)
    sphere = make_sphere(radius=radius, count=400)
    pose = looking_down_z(distance)
    samples = sample_surface(sphere, 10000, seed=8)
    mask = visible_mask(samples, pose, K, rasterize_depth(sphere, pose, K), eps=5.0)
    assert mask.mean() == pytest.approx(0.5, abs=0.02)
    assert not mask[samples.points[:, 2] > 0.25 * radius].any()
    assert mask[samples.points[:, 2] < -0.25 * radius].all()


def test_visibility_argument_checks(cube, small_camera):
    pose = looking_down_z(500.0)
    samples = sample_surface(cube, 10, seed=0)
    depth = rasterize_depth(cube, pose, small_camera)
    with pytest.raises(ValueError):
        visible_mask(samples, pose, small_camera, depth, eps=0.0)
    with pytest.raises(ValueError):
        visible_mask(samples, pose, small_camera, DepthMap.empty(10, 10), eps=1.0)


# --- Serialization ---


def test_depth_png_round_trip(tmp_path):
    values = np.array([[0.0, 123.4], [4000.0, 0.1]])
    path = str(tmp_path / "depth.png")
    write_depth_png(path, DepthMap(values), depth_scale=0.1)
    np.testing.assert_allclose(read_depth_png(path, depth_scale=0.1).values, values, atol=1e-9)


def test_depth_png_overflow_is_rejected(tmp_path):
    path = tmp_path / "depth.png"
    with pytest.raises(ValueError):
        write_depth_png(str(path), DepthMap(np.full((2, 2), 7000.0)), depth_scale=0.1)
    assert not path.exists()


def test_raw_round_trip(tmp_path):
    values = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    path = str(tmp_path / "image.raw")
    write_raw(path, values)
    np.testing.assert_array_equal(read_raw(path), values.astype(np.float32).astype(np.float64))
    assert (tmp_path / "image.raw").stat().st_size == 8 + 12 * 4
