import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lutimlp import se3
from lutimlp.dataio import PointCloud
from lutimlp.lattice import locate, spatial_jacobian, interpolate


def series_exp(m, terms=20):
    out = np.eye(4)
    term = np.eye(4)
    for n in range(1, terms):
        term = term @ m / n
        out = out + term
    return out


def test_exp_zero_is_identity():
    assert np.array_equal(se3.exp(np.zeros(6)), np.eye(4))


def test_exp_pure_translation():
    g = se3.exp([0, 0, 0, 1, 2, 3])
    np.testing.assert_array_equal(g[:3, :3], np.eye(3))
    np.testing.assert_array_equal(g[:3, 3], [1, 2, 3])


def test_exp_quarter_turn_about_z():
    g = se3.exp([0, 0, np.pi / 2, 0, 0, 0])
    # generators follow the point Jacobian: +w3 sends x towards -y
    expected = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(g[:3, :3], expected, atol=1e-15)
    np.testing.assert_allclose(g, series_exp(se3.hat([0, 0, np.pi / 2, 0, 0, 0])), atol=1e-10)


def test_exp_matches_series(rng):
    for _ in range(50):
        xi = rng.normal(size=6)
        np.testing.assert_allclose(se3.exp(xi), series_exp(se3.hat(xi), 40), atol=1e-10)


def test_exp_inverse_pairs(rng):
    for _ in range(100):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, 1) / np.linalg.norm(xi)
        np.testing.assert_allclose(se3.exp(xi) @ se3.exp(-xi), np.eye(4), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=6, max_size=6))
def test_exp_is_rigid(xi):
    se3.check_rigid(se3.exp(np.array(xi)))


def test_small_angle_branch_consistent(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        w *= 1e-6 / np.linalg.norm(w)
        xi = np.concatenate([w, rng.normal(size=3)])
        g = se3.exp(xi)
        a = -se3.skew(w)
        taylor = np.eye(4)
        taylor[:3, :3] = np.eye(3) + a + 0.5 * a @ a
        taylor[:3, 3] = (np.eye(3) + 0.5 * a + a @ a / 6) @ xi[3:]
        assert np.max(np.abs(g - taylor)) <= 1e-8 * np.max(np.abs(taylor))
    # just under the threshold uses the Taylor branch
    tiny = se3.exp([5e-9, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(tiny, series_exp(se3.hat([5e-9, 0, 0, 0, 0, 0])), atol=1e-15)


def test_point_jacobian_origin():
    j = se3.point_jacobian([0.0, 0.0, 0.0])
    np.testing.assert_array_equal(j, np.hstack([np.zeros((3, 3)), np.eye(3)]))


def test_point_jacobian_unit_x():
    j = se3.point_jacobian([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(
        j, [[0, 0, 0, 1, 0, 0], [0, 0, -1, 0, 1, 0], [0, 1, 0, 0, 0, 1]]
    )


def test_point_jacobian_matches_finite_differences(rng):
    h = 1e-6
    for p in rng.normal(size=(20, 3)):
        fd = np.empty((3, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd[:, k] = (se3.transform_points(se3.exp(e), p) - se3.transform_points(se3.exp(-e), p)) / (2 * h)
        j = se3.point_jacobian(p)
        assert np.max(np.abs(j - fd)) <= 1e-6 * np.max(np.abs(j))


def test_pullback_zero():
    assert np.all(se3.pullback(np.zeros((4, 3)), [0.3, 0.2, 0.1]) == 0)


def test_pullback_identity():
    p = np.array([0.3, -0.2, 0.7])
    np.testing.assert_array_equal(se3.pullback(np.eye(3), p), se3.point_jacobian(p))


def test_pullback_matches_lut_finite_differences(trained_like_lut, rng):
    _, lut = trained_like_lut
    lat = lut.lattice
    h = 1e-6
    checked = 0
    while checked < 30:
        p = rng.uniform(-0.9, 0.9, 3)
        u = (p + 1) / 2 * (lat.d - 1)
        if np.min(np.abs(u - np.round(u))) < 1e-3:
            continue
        jac = se3.pullback(spatial_jacobian(lut, locate(lat, p)), p)
        fd = np.empty_like(jac)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            up = interpolate(lut, locate(lat, se3.transform_points(se3.exp(e), p)))
            dn = interpolate(lut, locate(lat, se3.transform_points(se3.exp(-e), p)))
            fd[:, k] = (up - dn) / (2 * h)
        assert np.max(np.abs(jac - fd)) <= 1e-3 * np.max(np.abs(jac))
        checked += 1


def test_transform_cloud_identity_and_translation(rng):
    cloud = PointCloud(rng.normal(size=(10, 3)), 3)
    same = se3.transform_cloud(np.eye(4), cloud)
    assert np.array_equal(same.points, cloud.points) and same.label == 3
    moved = se3.transform_cloud(se3.exp([0, 0, 0, 0.5, -1, 2]), cloud)
    np.testing.assert_allclose(moved.points - cloud.points, np.tile([0.5, -1, 2], (10, 1)))


def test_transform_then_inverse(rng):
    cloud = PointCloud(rng.normal(size=(50, 3)))
    g = se3.exp(rng.normal(size=6))
    back = se3.transform_cloud(se3.inverse(g), se3.transform_cloud(g, cloud))
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-10)


def test_transform_rejects_non_rigid():
    with pytest.raises(ValueError):
        se3.transform_cloud(np.diag([2.0, 1, 1, 1]), PointCloud(np.zeros((1, 3))))


def test_pose_error():
    g = se3.exp([0, 0.1, 0, 0.01, 0, 0])
    rot, trans = se3.pose_error(g, np.eye(4))
    assert rot == pytest.approx(np.degrees(0.1), rel=1e-9)
    assert trans == pytest.approx(np.linalg.norm(g[:3, 3]))
