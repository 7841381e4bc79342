import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clustermask import data as D
from clustermask.losses import PanopticTarget
from clustermask.panoptic import PanopticMap


def test_single_rectangle_scene():
    s = D.generate_scene(3, D.SceneConfig(max_shapes=1, shape_kinds=("rectangle",)))
    assert s.target.K == 1 and s.target.classes.tolist() == [D.RECTANGLE]
    ii, jj = np.nonzero(s.target.masks[0])
    # a filled axis-aligned box equals its bounding box
    assert s.target.masks[0].sum() == (ii.max() - ii.min() + 1) * (jj.max() - jj.min() + 1)


def test_generation_is_deterministic():
    a, b = D.generate_scene(17), D.generate_scene(17)
    assert a.same_as(b) and a.image.tobytes() == b.image.tobytes()
    assert not D.generate_scene(18).same_as(a)


def test_scene_contents():
    s = D.generate_scene(5)
    assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
    assert (s.image >= 0).all() and (s.image <= 1).all()
    assert 1 <= s.target.K <= 4
    assert set(s.target.classes.tolist()) <= set(D.THING_CLASSES)


def test_thousand_scenes_disjoint():
    cfg = D.SceneConfig(height=32, width=32, max_shapes=6)
    for seed in range(1000):
        m = D.generate_scene(seed, cfg).target.masks
        assert m.sum(axis=0).max() <= 1
        assert (m.reshape(m.shape[0], -1).sum(1) > 0).all()


def test_config_validation():
    for bad in (D.SceneConfig(height=8), D.SceneConfig(max_shapes=9), D.SceneConfig(max_shapes=0),
                D.SceneConfig(shape_kinds=("hexagon",))):
        with pytest.raises(D.GenerationError):
            D.generate_scene(0, bad)


def test_splitmix_scalar_stream_matches_reference():
    rng = D.SplitMix64(0)
    assert [rng.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_gt_panoptic_map():
    ids = np.array([[0, 0, -1], [1, -1, -1]])
    t = PanopticTarget(np.stack([ids == 0, ids == 1]), [2, 3])
    pm = D.gt_panoptic_map(t)
    assert pm.segment_id.tolist() == [[1, 1, 3], [2, 3, 3]]
    assert pm.segments == [(1, 2), (2, 3), (3, D.BACKGROUND)]


def test_class_histogram():
    samples = D.generate_dataset(5, 0)
    h = D.class_histogram(samples)
    counted = np.bincount(np.concatenate([s.target.classes for s in samples]), minlength=D.NUM_CLASSES)
    assert h == {c: int(counted[c]) for c in range(D.NUM_CLASSES)}


# -- CMTD format -----------------------------------------------------------


def test_round_trip_bit_exact(tmp_path):
    samples = D.generate_dataset(6, 40, D.SceneConfig(height=16, width=24))
    path = tmp_path / "d.cmtd"
    D.write_dataset(path, samples)
    back = D.read_dataset(path)
    assert len(back) == 6
    for a, b in zip(samples, back):
        assert a.same_as(b) and a.image.tobytes() == b.image.tobytes()
    assert D.encode_dataset(back) == path.read_bytes()


@settings(max_examples=20)
@given(st.lists(st.integers(0, 10_000), max_size=4), st.sampled_from([16, 20, 32]))
def test_round_trip_property(seeds, side):
    samples = [D.generate_scene(s, D.SceneConfig(height=side, width=16)) for s in seeds]
    header, back = D.decode_dataset(D.encode_dataset(samples))
    assert header.sample_count == len(samples)
    assert all(a.same_as(b) for a, b in zip(samples, back))


def test_empty_dataset_is_header_only(tmp_path):
    path = tmp_path / "e.cmtd"
    D.write_dataset(path, [])
    assert path.stat().st_size == 20
    assert D.read_dataset(path) == []


def test_byte_layout_hand_built():
    img = np.arange(16 * 16 * 3, dtype=np.float32).reshape(16, 16, 3) / 1000
    m = np.zeros((1, 16, 16), bool)
    m[0, 2:5, 3:9] = True
    s = D.Sample(img, PanopticTarget(m, [2]))
    expected = (
        b"CMTD" + struct.pack("<IIII", 1, 1, D.NUM_CLASSES, D.THING_MASK)
        + struct.pack("<II", 16, 16) + img.astype("<f4").tobytes()
        + struct.pack("<II", 1, 2) + m[0].astype(np.uint8).tobytes()
    )
    assert D.encode_dataset([s]) == expected
    header, _ = D.decode_dataset(expected)
    assert header.thing_classes == D.THING_CLASSES


def test_corrupt_magic_names_magic():
    buf = bytearray(D.encode_dataset(D.generate_dataset(1, 0)))
    buf[0] ^= 0xFF
    with pytest.raises(D.FormatError, match="magic") as exc:
        D.decode_dataset(bytes(buf))
    assert exc.value.offset == 0


def test_truncation_reports_offset():
    buf = D.encode_dataset(D.generate_dataset(1, 0, D.SceneConfig(height=16, width=16)))
    for cut in (3, 19, 24, 100, len(buf) - 1):
        with pytest.raises(D.FormatError, match=r"byte offset \d+") as exc:
            D.decode_dataset(buf[:cut])
        assert exc.value.offset <= cut


def test_bad_version_and_trailing_bytes():
    buf = bytearray(D.encode_dataset([]))
    buf[4] = 2
    with pytest.raises(D.FormatError, match="version"):
        D.decode_dataset(bytes(buf))
    with pytest.raises(D.FormatError, match="trailing"):
        D.decode_dataset(D.encode_dataset([]) + b"\0")


def test_mask_bytes_must_be_binary():
    buf = bytearray(D.encode_dataset(D.generate_dataset(1, 0, D.SceneConfig(height=16, width=16))))
    buf[-1] = 7
    with pytest.raises(D.FormatError):
        D.decode_dataset(bytes(buf))


# -- panoptic map files ----------------------------------------------------


def test_panoptic_maps_byte_layout_and_round_trip(tmp_path):
    seg = np.array([[4, 4, 0], [9, 9, 9]])
    pm = PanopticMap(seg, [(4, 2), (9, 0)])
    expected = (
        b"CMTP" + struct.pack("<II", 1, 1) + struct.pack("<II", 2, 3) + struct.pack("<I", 2)
        + struct.pack("<I", 2) + bytes([1, 1, 0, 0, 0, 0])
        + struct.pack("<I", 0) + bytes([0, 0, 0, 1, 1, 1])
    )
    assert D.encode_panoptic_maps([pm]) == expected
    path = tmp_path / "m.cmtp"
    D.write_panoptic_maps(path, [pm])
    (back,) = D.read_panoptic_maps(path)
    assert back.segment_id.tolist() == [[1, 1, 0], [2, 2, 2]] and back.segments == [(1, 2), (2, 0)]


def test_panoptic_maps_reject_overlap():
    buf = (
        b"CMTP" + struct.pack("<II", 1, 1) + struct.pack("<II", 1, 2) + struct.pack("<I", 2)
        + struct.pack("<I", 1) + bytes([1, 1]) + struct.pack("<I", 2) + bytes([0, 1])
    )
    with pytest.raises(D.FormatError, match="overlap"):
        D.decode_panoptic_maps(buf)
