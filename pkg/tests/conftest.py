"""Fixtures shared by the test suite."""

import pytest

from meshes import looking_down_z, make_cube, make_octahedron, make_sphere
from salientpose.bopio import write_camera_json, write_pose_json
from salientpose.geometry import save_mesh
from salientpose.raster import CameraIntrinsics

# --- Fixtures ---


@pytest.fixture
def cube():
    return make_cube(edge=100.0)


@pytest.fixture
def octahedron():
    return make_octahedron(radius=50.0)


@pytest.fixture
def sphere():
    return make_sphere(radius=50.0)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def cube_files(tmp_path, cube, small_camera):
    """A cube model, a 64x64 camera and a front-facing pose written to disk."""
    model = tmp_path / "cube.ply"
    camera = tmp_path / "camera.json"
    pose = tmp_path / "pose.json"
    save_mesh(cube, model)
    write_camera_json(camera, small_camera)
    write_pose_json(pose, looking_down_z(500.0))
    return {"model": str(model), "camera": str(camera), "pose": str(pose)}
