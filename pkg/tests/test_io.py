import struct

import numpy as np
import pytest

from umf import io
from umf.datamodel import GlobalDescriptor, Image, PlaceRecord, PointCloud
from umf.errors import UMFError
from umf.geoverify import KeypointSet
from umf.retrieval import build_index, query_topk
from umf.superfeat import SuperFeatureSet


def unit_records(n, dim=16, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [PlaceRecord(i * 3 + 1, (float(i), 0.0, 0.0), GlobalDescriptor(v[i])) for i in range(n)]


def test_ppm_round_trip(tmp_path):
    data = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
    io.write_ppm(tmp_path / "a.ppm", Image(data))
    back = io.read_ppm(tmp_path / "a.ppm")
    np.testing.assert_array_equal(back.data, data)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_ppm_header_comments(tmp_path):
    body = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + body)
    img = io.read_ppm(tmp_path / "c.ppm")
    assert img.data.shape == (2, 2, 3)
    assert img.data[0, 0, 1] == 1 / 255


@pytest.mark.parametrize(
    "content",
    [b"P5\n2 2\n255\n" + bytes(4), b"P6\n2 2\n255\n" + bytes(5), b"P6\n2 2\n65535\n" + bytes(24), b"P6\n2 x\n255\n"],
)
def test_corrupt_ppm_names_file(tmp_path, content):
    path = tmp_path / "bad.ppm"
    path.write_bytes(content)
    with pytest.raises(UMFError) as e:
        io.read_ppm(path)
    assert e.value.code == "bad-file" and "bad.ppm" in str(e.value)


def test_xyz_round_trip_is_exact(tmp_path):
    pts = np.random.default_rng(1).normal(scale=10, size=(50, 3))
    io.write_xyz(tmp_path / "c.xyz", PointCloud(pts))
    np.testing.assert_array_equal(io.read_xyz(tmp_path / "c.xyz").points, pts)
    assert b"\r" not in (tmp_path / "c.xyz").read_bytes()


def test_xyz_rejects_bad_lines(tmp_path):
    (tmp_path / "c.xyz").write_text("1 2 3\n1 2\n4 5 6\n")
    with pytest.raises(UMFError) as e:
        io.read_xyz(tmp_path / "c.xyz")
    assert "line 2" in str(e.value)


def test_placedb_round_trip(tmp_path):
    recs = [PlaceRecord(4, (1.5, -2.0, 0.1), image_path="im/4.ppm", cloud_path="pc/4.xyz")]
    io.write_placedb(tmp_path / "db.csv", recs)
    back = io.read_placedb(tmp_path / "db.csv")
    assert back[0].id == 4 and back[0].position == (1.5, -2.0, 0.1)
    assert back[0].image_path == tmp_path / "im/4.ppm"


def test_descriptor_layout(tmp_path):
    index = build_index(unit_records(3, dim=4))
    io.write_descriptors(tmp_path / "i.umfd", index)
    raw = (tmp_path / "i.umfd").read_bytes()
    assert raw[:4] == b"UMFD"
    assert struct.unpack("<HII", raw[4:14]) == (1, 3, 4)
    assert len(raw) == 14 + 3 * 4 * 4 + 3 * 8
    assert struct.unpack("<Q", raw[-8:])[0] == 7


def test_index_round_trip_queries_identically(tmp_path):
    recs = unit_records(60)
    index = build_index(recs)
    io.write_index(tmp_path / "index", index)
    back = io.read_index(tmp_path / "index")
    np.testing.assert_array_equal(back.descriptors, index.descriptors)
    for field in ("dim", "split", "left", "right", "order"):
        np.testing.assert_array_equal(getattr(back.tree, field), getattr(index.tree, field))
    q = recs[5].descriptor
    assert query_topk(back, q, 10) == query_topk(index, q, 10)


def test_tree_with_bad_child_offset(tmp_path):
    index = build_index(unit_records(40))
    io.write_tree(tmp_path / "t.umft", index.tree)
    raw = bytearray((tmp_path / "t.umft").read_bytes())
    # node 0 is internal: corrupt its right child (offset 12 + 1 + 4 + 4)
    raw[12 + 9 : 12 + 13] = struct.pack("<I", 10_000)
    (tmp_path / "t.umft").write_bytes(bytes(raw))
    with pytest.raises(UMFError) as e:
        io.read_tree(tmp_path / "t.umft")
    assert e.value.code == "bad-file"


def test_truncated_descriptor_file(tmp_path):
    io.write_descriptors(tmp_path / "i.umfd", build_index(unit_records(3)))
    raw = (tmp_path / "i.umfd").read_bytes()
    (tmp_path / "i.umfd").write_bytes(raw[:-3])
    with pytest.raises(UMFError):
        io.read_descriptors(tmp_path / "i.umfd")


def test_superfeatures_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    att = rng.random((4, 6 * 5)).astype(np.float32)
    sf = SuperFeatureSet(rng.normal(size=(4, 8)).astype(np.float32), att, (6, 5), "vision")
    io.write_superfeatures(tmp_path / "s.umfs", sf)
    back = io.read_superfeatures(tmp_path / "s.umfs", (6, 5))
    np.testing.assert_array_equal(back.features, sf.features)
    np.testing.assert_array_equal(back.attention, att)
    assert back.modality == "vision"
    raw = (tmp_path / "s.umfs").read_bytes()
    assert raw[:4] == b"UMFS" and struct.unpack("<BHH", raw[4:9]) == (0, 4, 8)


def test_stripped_superfeatures_round_trip(tmp_path):
    sf = SuperFeatureSet(np.ones((3, 2), np.float32), None, (50, 50, 50), "lidar")
    io.write_superfeatures(tmp_path / "s.umfs", sf)
    back = io.read_superfeatures(tmp_path / "s.umfs")
    assert back.attention is None and back.modality == "lidar" and back.spatial_dims == (50, 50, 50)


def test_keypoints_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    kp = KeypointSet(rng.random((9, 3)).astype(np.float32), rng.normal(size=(9, 5)).astype(np.float32), rng.random(9).astype(np.float32))
    io.write_keypoints(tmp_path / "k.umfk", kp, "lidar")
    modality, back = io.read_keypoints(tmp_path / "k.umfk")
    assert modality == "lidar"
    for a in ("coords", "descriptors", "saliency"):
        np.testing.assert_array_equal(getattr(back, a), getattr(kp, a))
    raw = (tmp_path / "k.umfk").read_bytes()
    assert raw[:4] == b"UMFK" and struct.unpack("<BIB", raw[4:10]) == (1, 9, 3)


def test_empty_keypoints_round_trip(tmp_path):
    kp = KeypointSet(np.zeros((0, 2)), np.zeros((0, 128)), np.zeros(0))
    io.write_keypoints(tmp_path / "k.umfk", kp, "vision")
    _, back = io.read_keypoints(tmp_path / "k.umfk")
    assert len(back) == 0 and back.rank == 2 and back.descriptors.shape == (0, 128)


def test_missing_file_code(tmp_path):
    with pytest.raises(UMFError) as e:
        io.read_descriptors(tmp_path / "nope.umfd")
    assert e.value.code == "missing-file"
