import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynperc.geometry import (
    CORNER_SIGNS,
    Box3D,
    CameraIntrinsics,
    GeometryError,
    alpha_to_yaw,
    backproject,
    backproject_t,
    box_corners,
    box_corners_t,
    project,
    project_points,
    relative_crop_params,
    update_intrinsics,
    yaw_rotation,
    yaw_to_alpha,
)
from dynperc.numerics import Tensor, grad_check, tsum

UNIT = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)


def random_camera(rng):
    return CameraIntrinsics(rng.uniform(200, 1500), rng.uniform(200, 1500), rng.uniform(0, 800), rng.uniform(0, 400))


# -- projection -----------------------------------------------------------------

def test_optical_axis_projects_to_principal_point():
    K = CameraIntrinsics(500.0, 400.0, 320.0, 240.0)
    assert project(K, (0.0, 0.0, 7.0)) == (320.0, 240.0)


def test_unit_camera():
    assert project(UNIT, (2.0, 3.0, 1.0)) == (2.0, 3.0)
    assert backproject(UNIT, (2.0, 3.0), 1.0) == (2.0, 3.0, 1.0)
    K = CameraIntrinsics(500.0, 400.0, 320.0, 240.0)
    assert backproject(K, (320.0, 240.0), 9.0) == (0.0, 0.0, 9.0)


@pytest.mark.parametrize("seed", range(10))
def test_projection_matches_homogeneous_matrix(seed):
    rng = np.random.default_rng(seed)
    K = random_camera(rng)
    p = rng.uniform([-20, -5, 0.1], [20, 5, 120])
    h = K.matrix() @ p
    # relative: near-camera points project to |u| ~ 1e4 px
    assert np.max(np.abs(np.array(project(K, p)) - h[:2] / h[2]) / np.abs(h[:2] / h[2])) < 1e-12
    pts = rng.uniform([-20, -5, 0.1], [20, 5, 120], size=(6, 3))
    hs = (K.matrix() @ pts.T).T
    np.testing.assert_allclose(project_points(K, pts), hs[:, :2] / hs[:, 2:], rtol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_backprojection_round_trip(seed):
    rng = np.random.default_rng(seed)
    K = random_camera(rng)
    uv = rng.uniform(-100, 1000, size=2)
    z = rng.uniform(0.1, 120)
    assert np.max(np.abs(np.array(project(K, backproject(K, uv, z))) - uv)) < 1e-10


def test_nonpositive_depth_rejected():
    with pytest.raises(GeometryError):
        project(UNIT, (1.0, 1.0, 0.0))
    with pytest.raises(GeometryError):
        backproject(UNIT, (1.0, 1.0), -2.0)
    with pytest.raises(GeometryError):
        project_points(UNIT, np.array([[0.0, 0.0, -1.0]]))
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
    with pytest.raises(GeometryError):
        Box3D((0.0, 0.0, 5.0), (1.0, 0.0, 1.0), 0.0)
    with pytest.raises(GeometryError):
        Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)


def test_backproject_tensor_agrees():
    K = CameraIntrinsics(600.0, 550.0, 300.0, 170.0)
    out = backproject_t(K, Tensor(412.0), Tensor(90.0), Tensor(17.0)).data
    np.testing.assert_allclose(out, backproject(K, (412.0, 90.0), 17.0), atol=1e-14)


def test_intrinsics_json_round_trip():
    K = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854)
    assert CameraIntrinsics.from_json(K.to_json()) == K


# -- intrinsics update --------------------------------------------------------------

def test_identity_update():
    K = CameraIntrinsics(500.0, 400.0, 320.0, 240.0)
    assert update_intrinsics(K, 1.0, 0.0, 0.0) == K


def test_half_scale_halves_focal_lengths():
    K = update_intrinsics(CameraIntrinsics(500.0, 400.0, 320.0, 240.0), 0.5, 0.0, 0.0)
    assert (K.fx, K.fy) == (250.0, 200.0)
    with pytest.raises(GeometryError):
        update_intrinsics(K, 0.0, 0.0, 0.0)


def test_update_uses_vertical_focal_for_vertical_axis():
    K = update_intrinsics(CameraIntrinsics(500.0, 300.0, 0.0, 0.0), 2.0, 0.0, 0.0)
    assert K.fy == 600.0


@pytest.mark.parametrize("seed", range(20))
def test_update_consistency_with_crop(seed):
    rng = np.random.default_rng(seed)
    K = random_camera(rng)
    s, x0, y0, _ = relative_crop_params(rng, (384, 1280))
    K2 = update_intrinsics(K, s, x0, y0)
    p = rng.uniform([-20, -5, 0.5], [20, 5, 120])
    u, v = project(K, p)
    assert np.max(np.abs(np.array(project(K2, p)) - (s * u - x0, s * v - y0))) < 1e-10


def test_crop_params_full_ratio():
    class Fixed:
        def uniform(self, lo, hi):
            return 1.0

        def integers(self, lo, hi):
            return 0

    s, x0, y0, size = relative_crop_params(Fixed(), (100, 200))
    assert (s, x0, y0, size) == (1.0, 0.0, 0.0, (100, 200))


def test_crop_params_stay_in_bounds():
    rng = np.random.default_rng(0)
    H, W = 128, 256
    for _ in range(1000):
        s, x0, y0, (ch, cw) = relative_crop_params(rng, (H, W))
        assert 1.0 <= s <= 2.0
        assert 0 < ch <= H and 0 < cw <= W
        left, top = x0 / s, y0 / s
        assert -1e-9 <= left and left + cw <= W + 1e-9
        assert -1e-9 <= top and top + ch <= H + 1e-9


def test_crop_params_are_seeded():
    a = [relative_crop_params(np.random.default_rng(5), (90, 160)) for _ in range(2)]
    assert a[0] == a[1]


# -- boxes --------------------------------------------------------------------------

def test_unit_cube_corners():
    c = box_corners(Box3D((0.0, 0.0, 10.0), (1.0, 1.0, 1.0), 0.0))
    np.testing.assert_allclose(np.abs(c - [0.0, 0.0, 10.0]), 0.5, atol=1e-15)
    assert len({tuple(r) for r in np.round(c, 12)}) == 8


def test_quarter_turn_swaps_footprint():
    b0 = Box3D((0.0, 0.0, 10.0), (1.0, 2.0, 4.0), 0.0)
    b90 = Box3D((0.0, 0.0, 10.0), (1.0, 2.0, 4.0), math.pi / 2)
    span = lambda c: (np.ptp(c[:, 0]), np.ptp(c[:, 2]))  # noqa: E731
    assert span(box_corners(b0)) == pytest.approx((4.0, 2.0))
    assert span(box_corners(b90)) == pytest.approx((2.0, 4.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-3, 3), st.floats(1, 100), st.floats(0.2, 5), st.floats(0.2, 5),
       st.floats(0.2, 8), st.floats(-math.pi, math.pi))
def test_box_corner_properties(x, y, z, h, w, l, yaw):
    b = Box3D((x, y, z), (h, w, l), yaw)
    c = box_corners(b)
    np.testing.assert_allclose(c.mean(axis=0), b.center, atol=1e-12)
    R = np.array([[math.cos(yaw), 0, math.sin(yaw)], [0, 1, 0], [-math.sin(yaw), 0, math.cos(yaw)]])
    template = CORNER_SIGNS * [l / 2, h / 2, w / 2]
    np.testing.assert_allclose(c, (R @ template.T).T + b.center, atol=1e-12)
    # edges connect corners differing in one sign; each extent appears 4 times
    lengths = {"l": [], "h": [], "w": []}
    for i in range(8):
        for j in range(i + 1, 8):
            diff = CORNER_SIGNS[i] != CORNER_SIGNS[j]
            if diff.sum() == 1:
                lengths["lhw"[int(np.argmax(diff))]].append(np.linalg.norm(c[i] - c[j]))
    for key, ext in (("l", l), ("h", h), ("w", w)):
        assert len(lengths[key]) == 4
        np.testing.assert_allclose(lengths[key], ext, rtol=1e-12)


def test_tensor_corners_match_array_corners():
    rng = np.random.default_rng(1)
    b = Box3D(tuple(rng.uniform(1, 5, 3)), tuple(rng.uniform(0.5, 3, 3)), 0.7)
    np.testing.assert_allclose(box_corners_t(b.center, b.dims, b.yaw).data, box_corners(b), atol=1e-14)
    np.testing.assert_allclose(yaw_rotation(0.0), np.eye(3))


@pytest.mark.parametrize("seed", range(20))
def test_corner_gradients(seed):
    rng = np.random.default_rng(seed)
    center, dims, yaw = (Tensor(v) for v in (rng.uniform(1, 5, 3), rng.uniform(0.5, 3, 3), rng.uniform(-3, 3)))
    probe = rng.standard_normal((8, 3))
    assert grad_check(lambda c, d, y: tsum(box_corners_t(c, d, y) * probe), [center, dims, yaw]).passed


# -- observation angle --------------------------------------------------------------

def test_alpha_on_axis_is_yaw():
    assert alpha_to_yaw(0.3, (0.0, 1.0, 10.0)) == 0.3


def test_alpha_zero_at_diagonal():
    assert alpha_to_yaw(0.0, (5.0, 0.0, 5.0)) == pytest.approx(math.pi / 4, abs=1e-15)


@pytest.mark.parametrize("seed", range(50))
def test_alpha_round_trip(seed):
    rng = np.random.default_rng(seed)
    center = (rng.uniform(-30, 30), rng.uniform(-3, 3), rng.uniform(0.5, 100))
    alpha = rng.uniform(-math.pi, math.pi)
    assert abs(yaw_to_alpha(alpha_to_yaw(alpha, center), center) - alpha) < 1e-12


def test_alpha_needs_positive_depth():
    with pytest.raises(GeometryError):
        alpha_to_yaw(0.0, (1.0, 0.0, 0.0))
