import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from entmem.errors import DimensionMismatch, FormatError, VersionMismatch
from entmem.tensors import (
    MemoryLayout,
    downsample_mask,
    mask_from_bytes,
    mask_to_bytes,
    read_mask,
    read_tensor,
    scene_complement,
    tensor_from_bytes,
    tensor_to_bytes,
    union_masks,
    write_mask,
    write_tensor,
)
from oracles import downsample_ref

LAYOUT = MemoryLayout(m=1, c=4, h=8, w=8, ph=2, pw=2)
STRIDE = 4  # pixel frame 32x32, footprint 8x8


def test_layout_arithmetic():
    lay = MemoryLayout(m=3, h=64, w=64)
    assert lay.tokens_per_slot == 1024
    assert lay.n_tokens == 3072
    assert lay.patch_dim == 16
    assert lay.token_index(1, 2, 3) == 1024 + 3 * 32 + 2


def test_layout_rejects_indivisible_patch():
    with pytest.raises(DimensionMismatch):
        MemoryLayout(h=9)


def test_union_examples():
    m = np.zeros((4, 4), bool)
    m[1, 2] = True
    assert np.array_equal(union_masks([m, m]), m)
    assert np.array_equal(union_masks([m, np.zeros_like(m)]), m)
    a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
    a[0, 0] = b[3, 3] = True
    assert union_masks([a, b]).sum() == 2


def test_union_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        union_masks([np.zeros((2, 2), bool), np.zeros((3, 2), bool)])


def test_scene_complement_examples():
    assert scene_complement([], (4, 6)).all()
    assert not scene_complement([np.ones((4, 6), bool)], (4, 6)).any()
    half = np.zeros((4, 6), bool)
    half[:2] = True
    comp = scene_complement([half], (4, 6))
    assert comp.sum() == 12
    assert not (comp & half).any()
    with pytest.raises(DimensionMismatch):
        scene_complement([half], (6, 4))


masks_2d = hnp.arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6)))


@given(st.lists(hnp.arrays(bool, (5, 5)), min_size=1, max_size=4), st.randoms())
def test_union_commutative_associative(ms, rnd):
    shuffled = list(ms)
    rnd.shuffle(shuffled)
    assert np.array_equal(union_masks(ms), union_masks(shuffled))
    if len(ms) >= 2:
        nested = union_masks([union_masks(ms[:1]), union_masks(ms[1:])])
        assert np.array_equal(nested, union_masks(ms))


@given(masks_2d)
def test_scene_complement_involution(m):
    assert np.array_equal(scene_complement([scene_complement([m], m.shape)], m.shape), m)


def test_downsample_examples():
    shape = (LAYOUT.h * STRIDE, LAYOUT.w * STRIDE)
    assert downsample_mask(np.ones(shape, bool), LAYOUT, STRIDE).all()
    assert not downsample_mask(np.zeros(shape, bool), LAYOUT, STRIDE).any()
    m = np.zeros(shape, bool)
    m[13, 27] = True
    out = downsample_mask(m, LAYOUT, STRIDE)
    assert out.sum() == 1
    # footprint is 8x8 pixels: row 13 -> patch row 1, col 27 -> patch col 3
    assert out[1, 3]


def test_downsample_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        downsample_mask(np.zeros((10, 10), bool), LAYOUT, STRIDE)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(bool, (32, 32)), st.sampled_from([0.0, 0.25, 0.5, 0.9]))
def test_downsample_matches_reference(m, thr):
    assert np.array_equal(downsample_mask(m, LAYOUT, STRIDE, thr), downsample_ref(m.tolist(), 2, 2, STRIDE, thr))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(bool, (32, 32)), hnp.arrays(bool, (32, 32)), st.sampled_from([0.0, 0.3, 0.7]))
def test_downsample_monotone(m, extra, thr):
    before = downsample_mask(m, LAYOUT, STRIDE, thr)
    after = downsample_mask(m | extra, LAYOUT, STRIDE, thr)
    assert not (before & ~after).any()


def test_tensor_zero_frame_roundtrip(tmp_path):
    frame = np.zeros((2, 2, 3), np.float32)
    write_tensor(tmp_path / "f.emvt", frame)
    back = read_tensor(tmp_path / "f.emvt")
    assert back.dtype == np.float32 and back.shape == (2, 2, 3)
    assert back.tobytes() == frame.tobytes()


def test_tensor_header_layout():
    buf = tensor_to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"EMVT"
    assert buf[4:8] == bytes([1, 0, 2, 0])
    assert buf[8:16] == bytes([2, 0, 0, 0, 3, 0, 0, 0])
    assert len(buf) == 16 + 24


def test_tensor_corrupt_magic():
    buf = bytearray(tensor_to_bytes(np.zeros((2, 2, 3), np.float32)))
    buf[0:4] = b"XXXX"
    with pytest.raises(FormatError):
        tensor_from_bytes(bytes(buf))


def test_tensor_truncated_and_version():
    buf = tensor_to_bytes(np.ones((3, 3), np.float32))
    with pytest.raises(FormatError):
        tensor_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        tensor_from_bytes(buf[:5])
    bumped = buf[:4] + bytes([2, 0]) + buf[6:]
    with pytest.raises(VersionMismatch):
        tensor_from_bytes(bumped)


def test_thousand_random_tensors_bit_exact():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        rank = gen.integers(1, 5)
        shape = tuple(int(d) for d in gen.integers(1, 6, size=rank))
        t = gen.standard_normal(shape).astype(np.float32)
        back = tensor_from_bytes(tensor_to_bytes(t))
        assert back.shape == t.shape
        assert back.tobytes() == t.tobytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=4, max_side=5), elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_tensor_roundtrip_property(t):
    assert tensor_from_bytes(tensor_to_bytes(t)).tobytes() == t.tobytes()


@given(hnp.arrays(bool, hnp.array_shapes(min_dims=1, max_dims=3, max_side=19)))
def test_mask_roundtrip_property(m):
    assert np.array_equal(mask_from_bytes(mask_to_bytes(m)), m)


def test_mask_rows_padded_big_endian(tmp_path):
    m = np.zeros((2, 9), bool)
    m[0, 0] = m[1, 8] = True
    buf = mask_to_bytes(m)
    assert buf[:4] == b"EMVM"
    assert buf[16:] == bytes([0x80, 0x00, 0x00, 0x80])
    write_mask(tmp_path / "m.emvm", m)
    assert np.array_equal(read_mask(tmp_path / "m.emvm"), m)
