"""Lookup table on a regular 3-D lattice with trilinear interpolation.

Corner ``j`` of a cell is numbered by its bits ``(bx, by, bz)`` with
``j = 4*bx + 2*by + bz``, so corners run 000, 001, ..., 111. Bit 1 means the
upper node along that axis. With ``f`` the fractional offset from the lower
node, a corner's weight is the product of ``f`` (bit 1) or ``1 - f`` (bit 0)
over the three axes. Interpolation always accumulates corners in that order.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

CORNER_BITS = np.array(
    [[(j >> 2) & 1, (j >> 1) & 1, j & 1] for j in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class Lattice3:
    """``d`` nodes per axis spanning the box ``[lo, hi]``."""

    d: int
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"lattice needs d >= 2 nodes per axis, got {self.d}")
        lo = tuple(float(v) for v in np.broadcast_to(self.lo, 3))
        hi = tuple(float(v) for v in np.broadcast_to(self.hi, 3))
        if not all(np.isfinite(lo + hi)):
            raise ValueError("lattice bounds must be finite")
        if not all(l < h for l, h in zip(lo, hi)):
            raise ValueError(f"need lo < hi on every axis, got lo={lo} hi={hi}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_nodes(self):
        return self.d**3

    @property
    def cells_per_unit(self):
        """Scale from world units to cell units, per axis."""
        return (self.d - 1) / (np.asarray(self.hi) - np.asarray(self.lo))

    def axis_coords(self):
        """Node coordinates along each axis, shape (3, d)."""
        return np.stack([np.linspace(l, h, self.d) for l, h in zip(self.lo, self.hi)])

    def node_index(self, ijk):
        ijk = np.asarray(ijk, dtype=np.int64)
        return (ijk[..., 0] * self.d + ijk[..., 1]) * self.d + ijk[..., 2]

    def node_ijk(self, flat):
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack([flat // (self.d * self.d), (flat // self.d) % self.d, flat % self.d], axis=-1)

    def node_points(self, flat):
        """World coordinates of the nodes with the given flat indices."""
        ijk = self.node_ijk(flat)
        ax = self.axis_coords()
        return np.stack([ax[0][ijk[..., 0]], ax[1][ijk[..., 1]], ax[2][ijk[..., 2]]], axis=-1)

    def all_nodes(self):
        return self.node_points(np.arange(self.n_nodes))


@dataclass
class Lut:
    """Embedding table: one K-vector per lattice node.

    ``data`` has shape (d, d, d, k); its C-order flattening gives the storage
    index ``((ix*d + iy)*d + iz)*k + c``. Storage is float32 unless a caller
    explicitly asks for float64 (used by gradient checks).
    """

    lattice: Lattice3
    data: np.ndarray

    def __post_init__(self):
        d = self.lattice.d
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.ndim == 2:
            data = data.reshape(d, d, d, -1)
        if data.shape[:3] != (d, d, d) or data.ndim != 4:
            raise ValueError(f"table shape {data.shape} does not match lattice d={d}")
        if not np.all(np.isfinite(data)):
            raise ValueError("table contains non-finite entries")
        self.data = np.ascontiguousarray(data)

    @property
    def k(self):
        return self.data.shape[-1]

    @property
    def table(self):
        """Flat (d**3, k) view."""
        return self.data.reshape(-1, self.k)


@dataclass
class CellQuery:
    """Result of locating points in the lattice.

    All arrays carry the batch shape of the query points in front.
    ``clamped`` flags axes where the point lay outside the bounds.
    """

    cell: np.ndarray  # (..., 3) int
    frac: np.ndarray  # (..., 3)
    weights: np.ndarray  # (..., 8)
    corners: np.ndarray  # (..., 8) flat node indices
    clamped: np.ndarray  # (..., 3) bool
    lattice: Lattice3


def _corner_weights(frac):
    w = np.empty(frac.shape[:-1] + (8,))
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w[..., 0] = gx * gy * gz
    w[..., 1] = gx * gy * fz
    w[..., 2] = gx * fy * gz
    w[..., 3] = gx * fy * fz
    w[..., 4] = fx * gy * gz
    w[..., 5] = fx * gy * fz
    w[..., 6] = fx * fy * gz
    w[..., 7] = fx * fy * fz
    return w


def locate(lattice, p):
    """Find the cell, fractional offsets and corner weights for points ``p``.

    Points outside the box are clamped onto it. A point on the upper bound
    lands in the last cell with offset 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing axis of size 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot locate non-finite points")
    lo = np.asarray(lattice.lo)
    hi = np.asarray(lattice.hi)
    d = lattice.d
    clamped = (p < lo) | (p > hi)
    pc = np.clip(p, lo, hi)
    u = (pc - lo) / (hi - lo) * (d - 1)
    cell = np.clip(np.floor(u), 0, d - 2).astype(np.int64)
    frac = np.clip(u - cell, 0.0, 1.0)
    corners = lattice.node_index(cell[..., None, :] + CORNER_BITS)
    return CellQuery(cell, frac, _corner_weights(frac), corners, clamped, lattice)


def nearest(lattice, p):
    """Flat index of the lattice node closest to each point (round half up)."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot locate non-finite points")
    lo = np.asarray(lattice.lo)
    hi = np.asarray(lattice.hi)
    u = (np.clip(p, lo, hi) - lo) / (hi - lo) * (lattice.d - 1)
    ijk = np.clip(np.floor(u + 0.5), 0, lattice.d - 1).astype(np.int64)
    return lattice.node_index(ijk)


def weighted_sum(rows, corners, weights):
    """``sum_j weights[..., j] * rows[corners[..., j]]`` in fixed corner order."""
    # corner-major copies keep each gather contiguous; float32 rows widen
    # exactly, so the rounding matches a plain cast-multiply-add
    wt = np.moveaxis(weights, -1, 0)[..., None]
    ct = np.moveaxis(corners, -1, 0)
    out = rows[ct[0]].astype(np.float64)
    out *= wt[0]
    for j in range(1, 8):
        t = rows[ct[j]].astype(np.float64)
        t *= wt[j]
        out += t
    return out


def interpolate(lut, q):
    """Trilinearly interpolated embedding at the located points, shape (..., k)."""
    return weighted_sum(lut.table, q.corners, q.weights)


def _axis_gradient(vals, frac, axis):
    # vals: (..., 8, C) corner values; returns d/du_axis of the trilinear blend
    f = [frac[..., 0], frac[..., 1], frac[..., 2]]
    others = [a for a in range(3) if a != axis]
    out = 0.0
    for b1 in (0, 1):
        for b2 in (0, 1):
            bits_lo = [0, 0, 0]
            bits_lo[others[0]], bits_lo[others[1]] = b1, b2
            bits_hi = list(bits_lo)
            bits_hi[axis] = 1
            j_lo = 4 * bits_lo[0] + 2 * bits_lo[1] + bits_lo[2]
            j_hi = 4 * bits_hi[0] + 2 * bits_hi[1] + bits_hi[2]
            w = (f[others[0]] if b1 else 1.0 - f[others[0]]) * (f[others[1]] if b2 else 1.0 - f[others[1]])
            out = out + w[..., None] * (vals[..., j_hi, :] - vals[..., j_lo, :])
    return out


def _spatial_jacobian_from_corners(vals, q):
    scale = q.lattice.cells_per_unit
    cols = []
    for axis in range(3):
        g = _axis_gradient(vals, q.frac, axis) * scale[axis]
        g = np.where(q.clamped[..., axis, None], 0.0, g)
        cols.append(g)
    return np.stack(cols, axis=-1)


def spatial_jacobian(lut, q):
    """Derivative of the interpolated embedding wrt world coordinates, (..., k, 3).

    Each column is a bilinear blend of the corner differences along that axis.
    On a cell face the derivative is taken from the cell ``locate`` chose; in
    an axis where the point was clamped it is zero.
    """
    vals = lut.table[q.corners].astype(np.float64)
    return _spatial_jacobian_from_corners(vals, q)


def spatial_jacobian_channels(lut, q, channels):
    """Gradient row of one channel per query point, shape (n, 3).

    ``q`` must be a flat batch of n points and ``channels`` has length n.
    Cheaper than the full Jacobian when only one row per point is needed.
    """
    channels = np.asarray(channels, dtype=np.int64)
    vals = lut.table[q.corners, channels[:, None]].astype(np.float64)[..., None]
    return _spatial_jacobian_from_corners(vals, q)[:, 0, :]


def scatter_matrix(q, n_nodes):
    """Sparse (n_nodes, n_points) matrix whose product with upstream grads
    distributes them onto the table."""
    corners = q.corners.reshape(-1, 8)
    weights = q.weights.reshape(-1, 8)
    n = corners.shape[0]
    cols = np.repeat(np.arange(n), 8)
    return sp.csr_matrix((weights.ravel(), (corners.ravel(), cols)), shape=(n_nodes, n))


def scatter_gradient(lut_grad, q, upstream):
    """Accumulate ``w_j * upstream`` into the 8 corner rows of ``lut_grad``.

    ``lut_grad`` is a (d**3, k) or (d, d, d, k) float array updated in place.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream gradient contains non-finite entries")
    flat = lut_grad.reshape(-1, lut_grad.shape[-1])
    k = flat.shape[1]
    up = upstream.reshape(-1, k)
    flat += scatter_matrix(q, flat.shape[0]) @ up
    return lut_grad
