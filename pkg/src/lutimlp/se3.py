"""SE(3) utilities: exponential map, point Jacobian and cloud transforms.

Twists are ordered ``(w1, w2, w3, v1, v2, v3)``. The generators are the ones
whose action on a point gives the columns of the point Jacobian

    dp/dxi = [[ 0, -z,  y | 1, 0, 0],
              [ z,  0, -x | 0, 1, 0],
              [-y,  x,  0 | 0, 0, 1]],

i.e. the rotation generator maps ``p`` to ``p x w``. A positive ``w3``
therefore turns the x axis towards -y; ``exp`` of a twist equals the usual
right-handed exponential of ``(-w, v)``.
"""

import numpy as np

from .dataio import PointCloud

SMALL_ANGLE = 1e-8


def skew(w):
    """Matrix ``S`` with ``S @ x == cross(w, x)``."""
    w1, w2, w3 = w
    return np.array([[0.0, -w3, w2], [w3, 0.0, -w1], [-w2, w1, 0.0]])


def hat(xi):
    """4x4 Lie-algebra matrix of a twist."""
    xi = np.asarray(xi, dtype=np.float64)
    m = np.zeros((4, 4))
    m[:3, :3] = -skew(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def generators():
    """The six 4x4 basis matrices T_k, one per twist coordinate."""
    return [hat(e) for e in np.eye(6)]


def exp(xi):
    """Closed-form exponential of a twist; returns a 4x4 rigid transform."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise ValueError(f"twist must be 6 finite numbers, got {xi!r}")
    a = -skew(xi[:3])
    a2 = a @ a
    theta = np.linalg.norm(xi[:3])
    if theta < SMALL_ANGLE:
        r = np.eye(3) + a + 0.5 * a2
        v = np.eye(3) + 0.5 * a + a2 / 6.0
    else:
        s = np.sin(theta)
        half = np.sin(0.5 * theta)
        c1 = 2.0 * half * half / theta**2  # (1 - cos t) / t^2
        r = np.eye(3) + (s / theta) * a + c1 * a2
        v = np.eye(3) + c1 * a + ((theta - s) / theta**3) * a2
    g = np.eye(4)
    g[:3, :3] = r
    g[:3, 3] = v @ xi[3:]
    return g


def inverse(g):
    g = np.asarray(g, dtype=np.float64)
    out = np.eye(4)
    out[:3, :3] = g[:3, :3].T
    out[:3, 3] = -g[:3, :3].T @ g[:3, 3]
    return out


def check_rigid(g, tol=1e-9):
    """Raise if ``g`` is not a proper rigid transform."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (4, 4) or not np.all(np.isfinite(g)):
        raise ValueError("rigid transform must be a finite 4x4 matrix")
    r = g[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise ValueError("rotation block is not orthogonal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation block does not have unit determinant")
    if np.any(g[3] != (0.0, 0.0, 0.0, 1.0)):
        raise ValueError("bottom row must be (0, 0, 0, 1)")
    return g


def point_jacobian(p):
    """Derivative of ``exp(xi) . p`` wrt ``xi`` at zero, shape (..., 3, 6)."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    j = np.zeros(p.shape[:-1] + (3, 6))
    j[..., 0, 1] = -z
    j[..., 0, 2] = y
    j[..., 1, 0] = z
    j[..., 1, 2] = -x
    j[..., 2, 0] = -y
    j[..., 2, 1] = x
    j[..., 0, 3] = j[..., 1, 4] = j[..., 2, 5] = 1.0
    return j


def pullback(spatial, p):
    """Chain a (K, 3) spatial Jacobian at ``p`` into a (K, 6) twist Jacobian."""
    spatial = np.asarray(spatial, dtype=np.float64)
    if spatial.shape[-1] != 3:
        raise ValueError(f"spatial Jacobian must have 3 columns, got {spatial.shape}")
    return spatial @ point_jacobian(p)


def transform_points(g, points):
    g = np.asarray(g, dtype=np.float64)
    return np.asarray(points, dtype=np.float64) @ g[:3, :3].T + g[:3, 3]


def transform_cloud(g, cloud):
    """Apply ``R p + t`` to every point; labels are carried over."""
    check_rigid(g)
    return PointCloud(transform_points(g, cloud.points), cloud.label)


def rotation_angle(r):
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_error(g_est, g_true):
    """Rotation error in degrees and translation error in world units."""
    r_err = np.asarray(g_est)[:3, :3] @ np.asarray(g_true)[:3, :3].T
    t_err = np.linalg.norm(np.asarray(g_est)[:3, 3] - np.asarray(g_true)[:3, 3])
    return np.degrees(rotation_angle(r_err)), float(t_err)
