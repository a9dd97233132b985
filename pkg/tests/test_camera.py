import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from t4dg.camera import Camera, look_at_camera, quat_to_rotmat, relative_to, rotmat_to_quat


def random_quat(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@given(st.integers(0, 10_000))
def test_quaternion_round_trip(seed):
    q = random_quat(np.random.default_rng(seed))
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) > 0
    back = rotmat_to_quat(R)
    np.testing.assert_allclose(back * np.sign(back[0] or 1), q, atol=1e-9)


@given(st.integers(0, 10_000))
def test_project_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(random_quat(rng), rng.standard_normal(3), 20.0, (8.0, 6.0), 16, 12)
    uv = rng.uniform(0, 16, (5, 2))
    z = rng.uniform(0.5, 5, 5)
    pix, depth = cam.project(cam.unproject(uv, z))
    np.testing.assert_allclose(pix, uv, atol=1e-9)
    np.testing.assert_allclose(depth, z, atol=1e-9)


def test_look_at_centers_target():
    cam = look_at_camera((1.0, 2.0, -3.0), (0.2, 0.1, 0.0), 32, 32)
    pix, z = cam.project(np.array([0.2, 0.1, 0.0]))
    np.testing.assert_allclose(pix, [16, 16], atol=1e-9)
    np.testing.assert_allclose(cam.center, [1, 2, -3], atol=1e-12)
    assert z > 0


def test_relative_to_reference_is_identity():
    rng = np.random.default_rng(0)
    ref = Camera(random_quat(rng), rng.standard_normal(3), 10.0, (4, 4), 8, 8)
    rel = relative_to(ref, ref, 2.0)
    np.testing.assert_allclose(rel.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rel.translation, 0, atol=1e-12)


def test_relative_to_preserves_projection():
    rng = np.random.default_rng(1)
    ref = Camera(random_quat(rng), rng.standard_normal(3), 10.0, (4, 4), 8, 8)
    cam = Camera(random_quat(rng), rng.standard_normal(3), 12.0, (4, 4), 8, 8)
    pts = rng.standard_normal((4, 3))
    # points expressed in ref's frame, scaled by 1/s
    s = 1.7
    pts_rel = (pts @ ref.R.T + ref.translation) / s
    np.testing.assert_allclose(relative_to(cam, ref, s).project(pts_rel)[0], cam.project(pts)[0], atol=1e-9)


def test_dict_round_trip():
    cam = look_at_camera((0.0, 1.0, -4.0), (0, 0, 0), 32, 24, 30.0)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    assert (back.focal, back.principal, back.width, back.height) == (cam.focal, cam.principal, 32, 24)
