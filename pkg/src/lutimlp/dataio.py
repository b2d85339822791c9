"""Point clouds, synthetic shapes, mesh sampling and file formats.

LUT file layout (little-endian)::

    magic    4 bytes  b"LUTI"
    version  u32      1
    d        u32      nodes per axis
    k        u32      embedding width
    bounds   6 x f32  lo_x lo_y lo_z hi_x hi_y hi_z
    payload  d**3 * k f32, index ((ix*d + iy)*d + iz)*k + c
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

LUT_MAGIC = b"LUTI"
LUT_VERSION = 1
_LUT_HEADER = struct.Struct("<4sIII6f")

SHAPES = ("sphere", "cube", "cylinder", "torus", "plane")


class FormatError(ValueError):
    """Raised for malformed input files."""


@dataclass
class PointCloud:
    points: np.ndarray
    label: int = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def normalize(cloud):
    """Centre on the centroid and scale so the largest |coordinate| is 1."""
    centred = cloud.points - cloud.points.mean(axis=0)
    extent = np.max(np.abs(centred))
    if not extent > 0:
        raise ValueError("cannot normalize a degenerate cloud with zero extent")
    return PointCloud(centred / extent, cloud.label)


# -- meshes -----------------------------------------------------------------

def parse_off(text):
    """Parse the triangle subset of OFF. Returns (vertices, faces)."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    if not lines:
        raise FormatError("empty OFF file")
    lineno, first = lines[0]
    # some ModelNet files glue the counts onto the header: "OFF490 518 0"
    if not first.startswith("OFF"):
        raise FormatError(f"line {lineno}: expected 'OFF' header, got {first!r}")
    rest = first[3:].strip()
    body = lines[1:]
    if rest:
        body = [(lineno, rest)] + body
    if not body:
        raise FormatError(f"line {lineno}: missing vertex/face counts")
    lineno, counts = body[0]
    try:
        nv, nf = (int(v) for v in counts.split()[:2])
    except ValueError:
        raise FormatError(f"line {lineno}: bad counts line {counts!r}") from None
    if len(body) < 1 + nv + nf:
        raise FormatError(f"line {body[-1][0]}: expected {nv} vertices and {nf} faces")
    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, line = body[1 + i]
        parts = line.split()
        try:
            verts[i] = [float(v) for v in parts[:3]]
        except ValueError:
            raise FormatError(f"line {lineno}: bad vertex {line!r}") from None
        if len(parts) < 3:
            raise FormatError(f"line {lineno}: vertex needs 3 coordinates")
    faces = []
    for i in range(nf):
        lineno, line = body[1 + nv + i]
        try:
            vals = [int(v) for v in line.split()]
        except ValueError:
            raise FormatError(f"line {lineno}: bad face {line!r}") from None
        if not vals or len(vals) < 1 + vals[0] or vals[0] < 3:
            raise FormatError(f"line {lineno}: bad face {line!r}")
        idx = vals[1 : 1 + vals[0]]
        if min(idx) < 0 or max(idx) >= nv:
            raise FormatError(f"line {lineno}: face index out of range")
        # fan-triangulate polygons
        for a, b in zip(idx[1:-1], idx[2:]):
            faces.append((idx[0], a, b))
    if not faces:
        raise FormatError("mesh has no faces")
    return verts, np.asarray(faces, dtype=np.int64)


def sample_mesh(mesh, n, rng):
    """Sample ``n`` points uniformly over the surface of a triangle mesh.

    ``mesh`` is OFF text or a ``(vertices, faces)`` pair.
    """
    verts, faces = parse_off(mesh) if isinstance(mesh, str) else mesh
    tri = np.asarray(verts, dtype=np.float64)[np.asarray(faces)]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if not area.sum() > 0:
        raise ValueError("mesh has zero surface area")
    choice = rng.choice(len(tri), size=n, p=area / area.sum())
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1.0 - u[flip]
    t = tri[choice]
    pts = t[:, 0] + u[:, :1] * (t[:, 1] - t[:, 0]) + u[:, 1:] * (t[:, 2] - t[:, 0])
    return PointCloud(pts)


# -- synthetic shapes ---------------------------------------------------------

def make_shape(name, n, rng):
    """Unit-size parametric surface samples (before any jitter or scaling)."""
    if name == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if name == "cube":
        pts = rng.uniform(-1.0, 1.0, (n, 3))
        face = rng.integers(0, 6, n)
        pts[np.arange(n), face % 3] = np.where(face < 3, -1.0, 1.0)
        return pts
    if name == "cylinder":
        # side area 2*pi*r*h = 4*pi, caps 2*pi for r = h/2 = 1
        theta = rng.uniform(0.0, 2 * np.pi, n)
        on_side = rng.random(n) < 2.0 / 3.0
        r = np.where(on_side, 1.0, np.sqrt(rng.random(n)))
        y = np.where(on_side, rng.uniform(-1.0, 1.0, n), np.where(rng.random(n) < 0.5, -1.0, 1.0))
        return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    if name == "torus":
        big, small = 1.0, 0.35
        out = np.empty((0, 3))
        # rejection sampling gives area-uniform points
        while len(out) < n:
            u = rng.uniform(0.0, 2 * np.pi, 2 * n)
            v = rng.uniform(0.0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)], axis=1)])
        return out[:n]
    if name == "plane":
        pts = rng.uniform(-1.0, 1.0, (n, 3))
        pts[:, 1] = 0.0
        return pts
    raise ValueError(f"unknown shape {name!r}; choose from {SHAPES}")


def synth_dataset(classes, per_class, n_points, seed, scale_jitter=0.3, noise=0.01):
    """Labelled, normalized clouds of parametric shapes.

    Each instance gets a random per-axis stretch in ``1 +/- scale_jitter``
    and Gaussian surface noise, so classes are not trivially separable by
    their extent alone. Same seed, same dataset.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    for name in classes:
        if name not in SHAPES:
            raise ValueError(f"unknown shape {name!r}; choose from {SHAPES}")
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        for _ in range(per_class):
            pts = make_shape(name, n_points, rng)
            pts = pts * rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter, 3)
            pts = pts + rng.normal(0.0, noise, pts.shape)
            clouds.append(normalize(PointCloud(pts, label)))
    return clouds


def resample(cloud, n, rng):
    """Exactly ``n`` points: a random subset, or all points plus repeats."""
    m = len(cloud)
    idx = rng.permutation(m)[:n] if m >= n else np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    return PointCloud(cloud.points[idx], cloud.label)


def load_folder(root, split, n_points, seed=0):
    """Load ``root/<class>/<split>/*.off|*.xyz`` (the ModelNet layout).

    Classes are the sorted subdirectory names. Meshes are surface-sampled,
    every cloud is resampled to ``n_points`` and normalized.
    Returns ``(clouds, class_names)``.
    """
    import os

    if not os.path.isdir(root):
        raise FileNotFoundError(f"data directory not found: {root}")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if len(classes) < 2:
        raise ValueError(f"{root}: need at least two class subdirectories")
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        folder = os.path.join(root, name, split)
        if not os.path.isdir(folder):
            continue
        for fname in sorted(os.listdir(folder)):
            path = os.path.join(folder, fname)
            if fname.endswith(".off"):
                with open(path) as f:
                    try:
                        cloud = sample_mesh(f.read(), n_points, rng)
                    except FormatError as exc:
                        raise FormatError(f"{path}: {exc}") from None
            elif fname.endswith(".xyz"):
                cloud = resample(read_xyz(path), n_points, rng)
            else:
                continue
            clouds.append(normalize(PointCloud(cloud.points, label)))
    if not clouds:
        raise ValueError(f"{root}: no .off or .xyz files under */{split}/")
    return clouds, classes


# -- LUT files ----------------------------------------------------------------

def lut_size_bytes(d, m, k):
    """Bytes needed for a float32 table over a ``d**m`` lattice of k-vectors."""
    for name, val, least in (("d", d, 2), ("m", m, 1), ("k", k, 1)):
        if int(val) != val or val < least:
            raise ValueError(f"{name} must be an integer >= {least}, got {val}")
    size = 4 * int(d) ** int(m) * int(k)
    if size >= 2**63:
        raise OverflowError(f"table of {d}^{m} x {k} floats does not fit a 64-bit size")
    return size


def lut_to_bytes(lut):
    lat = lut.lattice
    header = _LUT_HEADER.pack(LUT_MAGIC, LUT_VERSION, lat.d, lut.k, *lat.lo, *lat.hi)
    return header + np.ascontiguousarray(lut.data, dtype="<f4").tobytes()


def lut_from_bytes(buf):
    from .lattice import Lattice3, Lut

    if len(buf) < _LUT_HEADER.size:
        raise FormatError(f"truncated header: need {_LUT_HEADER.size} bytes, got {len(buf)}")
    magic, version, d, k, *bounds = _LUT_HEADER.unpack_from(buf)
    if magic != LUT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {LUT_MAGIC!r}")
    if version != LUT_VERSION:
        raise FormatError(f"unsupported LUT version {version}, expected {LUT_VERSION}")
    expected = lut_size_bytes(d, 3, k)
    actual = len(buf) - _LUT_HEADER.size
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}")
    data = np.frombuffer(buf, dtype="<f4", offset=_LUT_HEADER.size).astype(np.float32)
    lattice = Lattice3(d, tuple(bounds[:3]), tuple(bounds[3:]))
    return Lut(lattice, data.reshape(d, d, d, k))


def write_lut(path, lut):
    with open(path, "wb") as f:
        f.write(lut_to_bytes(lut))


def read_lut(path):
    with open(path, "rb") as f:
        return lut_from_bytes(f.read())


# -- XYZ clouds ---------------------------------------------------------------

def read_xyz(path):
    """Whitespace-separated ASCII points, one per line; '#' starts a comment."""
    pts = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                pts.append([float(v) for v in parts[:3]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad coordinate in {line!r}") from None
    if not pts:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.asarray(pts))


def write_xyz(path, cloud):
    np.savetxt(path, cloud.points, fmt="%.17g")


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, arrays, meta):
    """Store named arrays plus a JSON metadata blob in one .npz file."""
    payload = {f"a.{k}": np.asarray(v) for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z.files:
            raise FormatError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(z["meta"].tobytes().decode())
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("a.")}
    return arrays, meta
