import numpy as np
import pytest

from lutimlp.dataio import (
    FormatError,
    PointCloud,
    lut_from_bytes,
    lut_size_bytes,
    lut_to_bytes,
    load_checkpoint,
    make_shape,
    normalize,
    parse_off,
    read_lut,
    read_xyz,
    sample_mesh,
    save_checkpoint,
    synth_dataset,
    write_lut,
    write_xyz,
)
from lutimlp.lattice import Lattice3, Lut

MB = 2**20

CUBE_OFF = """OFF
8 12 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 0 4 7
3 0 7 3
"""


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.inf, 0.0]])


def test_normalize_fixed_point():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
    out = normalize(PointCloud(pts))
    np.testing.assert_array_equal(out.points, pts)


def test_normalize_segment():
    pts = np.stack([np.linspace(0, 2, 11), np.zeros(11), np.zeros(11)], axis=1)
    out = normalize(PointCloud(pts))
    np.testing.assert_allclose(out.points[:, 0], np.linspace(-1, 1, 11), atol=1e-15)


def test_normalize_properties(rng):
    pts = rng.normal(size=(300, 3)) * [3, 1, 0.2] + 5
    out = normalize(PointCloud(pts, label=2))
    assert out.label == 2
    assert abs(np.max(np.abs(out.points)) - 1.0) <= 1e-12
    np.testing.assert_allclose(out.points.mean(axis=0), 0, atol=1e-12)
    # aspect preserved: pairwise distance ratios are unchanged
    d_in = np.linalg.norm(pts[1:] - pts[0], axis=1)
    d_out = np.linalg.norm(out.points[1:] - out.points[0], axis=1)
    np.testing.assert_allclose(d_out / d_in, d_out[0] / d_in[0], rtol=1e-10)
    again = normalize(out)
    np.testing.assert_allclose(again.points, out.points, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(ValueError):
        normalize(PointCloud(np.ones((5, 3))))


def test_sample_single_triangle(rng):
    verts = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 1]])
    cloud = sample_mesh((verts, np.array([[0, 1, 2]])), 2000, rng)
    # barycentric coordinates of every sample are non-negative
    a = np.stack([verts[1] - verts[0], verts[2] - verts[0]], axis=1)
    coef, *_ = np.linalg.lstsq(a, (cloud.points - verts[0]).T, rcond=None)
    assert np.all(coef >= -1e-12) and np.all(coef.sum(axis=0) <= 1 + 1e-12)
    assert np.allclose(a @ coef, (cloud.points - verts[0]).T)


def test_sample_area_weighting(rng):
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]])
    faces = np.array([[0, 1, 2], [3, 4, 5]])  # areas 1 and 3
    cloud = sample_mesh((verts, faces), 100_000, rng)
    share = np.mean(cloud.points[:, 0] >= 10)
    assert abs(share - 0.75) < 0.01


def test_sample_cube_centroid(rng):
    cloud = sample_mesh(CUBE_OFF, 100_000, rng)
    np.testing.assert_allclose(cloud.points.mean(axis=0), [0.5, 0.5, 0.5], atol=0.01)
    assert np.all((cloud.points >= -1e-12) & (cloud.points <= 1 + 1e-12))


def test_parse_off_glued_header_and_polygons():
    verts, faces = parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert verts.shape == (4, 3)
    assert faces.tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize(
    "text, line",
    [
        ("OFX\n3 1 0\n", 1),
        ("OFF\n3 1 0\n0 0 0\n1 zero 0\n0 1 0\n3 0 1 2\n", 4),
        ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
    ],
)
def test_parse_off_errors_name_the_line(text, line):
    with pytest.raises(FormatError, match=f"line {line}"):
        parse_off(text)


def test_synth_dataset_deterministic():
    a = synth_dataset(["sphere", "cube"], 3, 64, seed=5)
    b = synth_dataset(["sphere", "cube"], 3, 64, seed=5)
    assert all(x.points.tobytes() == y.points.tobytes() and x.label == y.label for x, y in zip(a, b))
    c = synth_dataset(["sphere", "cube"], 3, 64, seed=6)
    assert a[0].points.tobytes() != c[0].points.tobytes()


def test_synth_dataset_shapes_and_labels():
    data = synth_dataset(["sphere", "cube", "cylinder", "torus", "plane"], 2, 100, seed=0)
    assert [c.label for c in data] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    for c in data:
        assert c.points.shape == (100, 3)
        assert abs(np.max(np.abs(c.points)) - 1) < 1e-12


def test_sphere_construction_radius(rng):
    pts = make_shape("sphere", 1000, rng)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)


def test_synth_dataset_rejects_bad_classes():
    with pytest.raises(ValueError):
        synth_dataset(["sphere"], 2, 10, 0)
    with pytest.raises(ValueError):
        synth_dataset(["sphere", "teapot"], 2, 10, 0)


def test_lut_size_table_values():
    assert lut_size_bytes(8, 3, 1024) == 2_097_152
    assert f"{lut_size_bytes(8, 3, 1024) / MB:.2E}" == "2.00E+00"
    assert f"{lut_size_bytes(4, 3, 1024) / MB:.2E}" == "2.50E-01"
    assert f"{lut_size_bytes(16, 3, 1024) / MB:.2E}" == "1.60E+01"
    assert f"{lut_size_bytes(8, 4, 1024) / MB:.2E}" == "1.60E+01"
    assert f"{lut_size_bytes(2, 6, 1024) / MB:.2E}" == "2.50E-01"
    # 1024^3 nodes x 1024 floats: about 4 TB
    assert lut_size_bytes(1024, 3, 1024) == 4 * 2**40


def test_lut_size_errors():
    with pytest.raises(ValueError):
        lut_size_bytes(1, 3, 4)
    with pytest.raises(OverflowError):
        lut_size_bytes(1024, 6, 1024)


def test_lut_round_trip(tmp_path, rng):
    lat = Lattice3(5, (-1, -2, 0), (1, 2, 0.5))
    lut = Lut(lat, rng.normal(size=(125, 7)).astype(np.float32))
    path = tmp_path / "t.lut"
    write_lut(path, lut)
    back = read_lut(path)
    assert back.data.tobytes() == lut.data.tobytes()
    assert back.lattice == lat
    assert path.stat().st_size - 40 == lut_size_bytes(5, 3, 7)


def test_lut_header_layout(rng):
    lut = Lut(Lattice3(2), np.arange(16, dtype=np.float32).reshape(8, 2))
    buf = lut_to_bytes(lut)
    assert buf[:4] == b"LUTI"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 2
    assert int.from_bytes(buf[12:16], "little") == 2
    assert np.frombuffer(buf[16:40], "<f4").tolist() == [-1, -1, -1, 1, 1, 1]
    # payload index ((ix*d + iy)*d + iz)*k + c
    assert np.frombuffer(buf[40:], "<f4").tolist() == list(range(16))


def test_lut_truncated_payload(rng):
    buf = lut_to_bytes(Lut(Lattice3(3), np.zeros((27, 2), np.float32)))
    with pytest.raises(FormatError, match=r"expected 216 bytes, got 212"):
        lut_from_bytes(buf[:-4])


def test_lut_bad_magic_and_version():
    buf = bytearray(lut_to_bytes(Lut(Lattice3(2), np.zeros((8, 1), np.float32))))
    with pytest.raises(FormatError, match="magic"):
        lut_from_bytes(b"NOPE" + bytes(buf[4:]))
    buf[4] = 9
    with pytest.raises(FormatError, match="version"):
        lut_from_bytes(bytes(buf))
    with pytest.raises(FormatError, match="header"):
        lut_from_bytes(b"LUTI")


def test_xyz_with_comments(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("# exported cloud\n0 0 0\n\n1.5 2 -3  # trailing\n# another\n4e-1 5 6\n")
    cloud = read_xyz(path)
    assert len(cloud) == 3
    assert cloud.points[2].tolist() == [0.4, 5.0, 6.0]


def test_xyz_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)))
    write_xyz(tmp_path / "a.xyz", cloud)
    assert np.array_equal(read_xyz(tmp_path / "a.xyz").points, cloud.points)


def test_xyz_errors(tmp_path):
    (tmp_path / "bad.xyz").write_text("1 2\n")
    with pytest.raises(FormatError, match=":1:"):
        read_xyz(tmp_path / "bad.xyz")
    (tmp_path / "empty.xyz").write_text("# nothing\n")
    with pytest.raises(FormatError):
        read_xyz(tmp_path / "empty.xyz")


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w0": rng.normal(size=(3, 4)), "table": rng.normal(size=(8, 2)).astype(np.float32)}
    save_checkpoint(tmp_path / "m.npz", arrays, {"variant": "mlp", "d": 4})
    back, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta == {"variant": "mlp", "d": 4}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].dtype == arrays[k].dtype


def test_load_folder(tmp_path):
    from lutimlp.dataio import load_folder

    tet = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n"
    for name in ("b_tet", "a_line"):
        (tmp_path / name / "train").mkdir(parents=True)
    (tmp_path / "b_tet" / "train" / "x.off").write_text(tet)
    (tmp_path / "a_line" / "train" / "y.xyz").write_text("0 0 0\n1 2 3\n2 4 6.5\n")
    clouds, classes = load_folder(str(tmp_path), "train", 50)
    assert classes == ["a_line", "b_tet"]
    assert [c.label for c in clouds] == [0, 1]
    assert all(len(c) == 50 for c in clouds)
    assert all(np.isclose(np.abs(c.points).max(), 1.0) for c in clouds)
    with pytest.raises(ValueError):
        load_folder(str(tmp_path), "test", 50)
    with pytest.raises(FileNotFoundError):
        load_folder(str(tmp_path / "missing"), "train", 50)
