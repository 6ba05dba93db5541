import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entmem import codec
from entmem.conditioning import prune_tokens, scatter_to_dense
from entmem.errors import CoordinateOutOfRange, DimensionMismatch
from entmem.tensors import MemoryLayout, PatchSet

LAYOUT = MemoryLayout(m=2, c=4, h=8, w=8, ph=2, pw=2)


def random_frame(seed, h=32, w=32):
    return np.random.default_rng(seed).random((h, w, 3), dtype=np.float32)


def block_means_ref(frame, stride):
    h, w = frame.shape[0] // stride, frame.shape[1] // stride
    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            out[i, j] = frame[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride].astype(np.float64).mean(axis=(0, 1))
    return out


def test_vae_zero_frame_constant_latent():
    lat = codec.vae_encode(np.zeros((32, 32, 3), np.float32), stride=8)
    assert lat.shape == (4, 4, 4)
    assert np.all(lat == lat[:, :1, :1])


def test_vae_locality():
    f = random_frame(1)
    g = f.copy()
    g[17, 5, 1] += 0.25
    diff = np.any(codec.vae_encode(f) != codec.vae_encode(g), axis=0)
    assert diff.sum() == 1 and diff[2, 0]


def test_vae_deterministic():
    f = random_frame(2)
    assert codec.vae_encode(f).tobytes() == codec.vae_encode(f).tobytes()


def test_vae_shape_errors():
    with pytest.raises(DimensionMismatch):
        codec.vae_encode(np.zeros((30, 32, 3), np.float32))
    with pytest.raises(DimensionMismatch):
        codec.vae_decode(np.zeros((4, 4), np.float32))


def test_vae_block_constant_fixed_point():
    means = np.random.default_rng(3).random((4, 4, 3)).astype(np.float32)
    frame = np.repeat(np.repeat(means, 8, axis=0), 8, axis=1)
    assert np.array_equal(codec.vae_decode(codec.vae_encode(frame)), frame)


def test_vae_zero_latent_decodes_flat():
    out = codec.vae_decode(np.zeros((4, 3, 5)))
    assert out.shape == (24, 40, 3)
    assert np.all(out == out[0, 0])


def test_vae_decode_equals_block_means():
    f = random_frame(4)
    rec = codec.vae_decode(codec.vae_encode(f))
    ref = np.repeat(np.repeat(block_means_ref(f, 8), 8, axis=0), 8, axis=1)
    assert np.max(np.abs(rec - ref)) < 1e-5


def test_vae_matrix_non_power_of_two_channels():
    mat = codec.vae_matrix(6, 1)
    assert mat.shape == (6, 3)
    assert np.allclose(mat.T @ mat, np.eye(3))
    f = random_frame(5)
    rec = codec.vae_decode(codec.vae_encode(f, channels=6))
    assert np.max(np.abs(rec - np.repeat(np.repeat(block_means_ref(f, 8), 8, 0), 8, 1))) < 1e-5


def test_patch_matrix_orthonormal_and_seeded():
    p = codec.patch_matrix(16, 11)
    assert np.allclose(p @ p.T, np.eye(16), atol=1e-12)
    assert np.array_equal(p, codec.patch_matrix(16, 11))
    assert not np.array_equal(p, codec.patch_matrix(16, 12))


def test_patchify_zero_and_count():
    lay = MemoryLayout(m=1, h=64, w=64)
    grid = codec.patchify(np.zeros((1, 4, 64, 64)), lay)
    assert grid.tokens.shape == (1024, 16)
    assert not grid.tokens.any()
    assert not codec.unpatchify(grid).any()


def test_patchify_locality():
    x = np.random.default_rng(6).standard_normal((2, 4, 8, 8))
    y = x.copy()
    y[1, 2, 5, 2] += 1.0
    changed = np.flatnonzero(np.any(codec.patchify(x, LAYOUT).tokens != codec.patchify(y, LAYOUT).tokens, axis=1))
    assert changed.tolist() == [LAYOUT.token_index(1, 1, 2)]


def test_unpatchify_single_token_confined():
    grid = codec.TokenGrid(LAYOUT, np.zeros((LAYOUT.n_tokens, 16)))
    grid.tokens[LAYOUT.token_index(0, 3, 1)] = 1.0
    lat = codec.unpatchify(grid)
    nz = np.argwhere(lat != 0)
    assert set(nz[:, 0]) == {0}
    assert set(nz[:, 2]) <= {2, 3} and set(nz[:, 3]) <= {6, 7}


def test_unpatchify_width_mismatch():
    with pytest.raises(DimensionMismatch):
        codec.unpatchify(codec.TokenGrid(LAYOUT, np.zeros((LAYOUT.n_tokens, 8))))


def test_thousand_random_latents_roundtrip():
    gen = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        x = gen.standard_normal((2, 4, 8, 8))
        worst = max(worst, float(np.max(np.abs(codec.unpatchify(codec.patchify(x, LAYOUT)) - x))))
    assert worst < 1e-6


def random_patchset(gen, layout, n):
    cells = gen.choice(layout.n_tokens, size=n, replace=False)
    slots, rem = np.divmod(cells, layout.tokens_per_slot)
    ys, xs = np.divmod(rem, layout.grid_w)
    values = gen.standard_normal((n, layout.c, layout.ph, layout.pw)).astype(np.float32)
    return PatchSet(layout, slots, np.stack([xs, ys], 1), values)


def dense_route(ps):
    dense, mask = scatter_to_dense(ps)
    return prune_tokens(codec.patchify(dense, ps.layout), mask)


def test_sparse_empty():
    pos, tok = codec.sparse_patchify_direct(PatchSet.empty(LAYOUT))
    assert len(pos) == 0 and tok.shape == (0, 16)


def test_sparse_single_patch_matches_dense():
    ps = random_patchset(np.random.default_rng(8), LAYOUT, 1)
    p1, t1 = codec.sparse_patchify_direct(ps)
    p2, t2 = dense_route(ps)
    assert np.array_equal(p1, p2) and t1.tobytes() == t2.tobytes()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 3), frac=st.floats(0.0, 1.0))
def test_sparse_dense_equivalence(seed, m, frac):
    lay = LAYOUT.with_slots(m)
    gen = np.random.default_rng(seed)
    ps = random_patchset(gen, lay, int(frac * lay.n_tokens))
    p1, t1 = codec.sparse_patchify_direct(ps)
    p2, t2 = dense_route(ps)
    assert np.array_equal(p1, p2)
    assert t1.tobytes() == t2.tobytes()


def test_sparse_out_of_range():
    ps = PatchSet(LAYOUT, [0], [[4, 0]], np.zeros((1, 4, 2, 2)))
    with pytest.raises(CoordinateOutOfRange):
        codec.sparse_patchify_direct(ps)


def test_sparse_unpatchify_inverts():
    ps = random_patchset(np.random.default_rng(9), LAYOUT, 20)
    pos, tok = codec.sparse_patchify_direct(ps)
    blocks = codec.sparse_unpatchify_direct(pos, tok, LAYOUT)
    order = np.argsort(ps.positions())
    assert np.max(np.abs(blocks - ps.values[order])) < 1e-6
