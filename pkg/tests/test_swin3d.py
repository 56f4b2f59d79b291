import numpy as np
import pytest

from specswin import swin3d as sw
from specswin import tensor as tz
from specswin.errors import ShapeError
from specswin.tensor import Tensor

from gradcheck import check_op
from naive_attention import naive_shifted_attention, region_boxes


def grid_of(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


# ---------------------------------------------------------------------------
# patch partition / embed


def test_patch_partition_counts_default():
    clip = grid_of((16, 256, 256, 3))
    tokens = sw.patch_partition(clip, (2, 4, 4))
    assert tokens.shape == (8, 64, 64, 96)
    assert tokens.size == 32768 * 96  # N tokens x 96 features


def test_patch_partition_small_grid():
    tokens = sw.patch_partition(grid_of((8, 64, 64, 3)), (2, 4, 4))
    assert tokens.shape == (4, 16, 16, 96)


def test_patch_partition_inverse_bit_exact():
    clip = grid_of((4, 8, 8, 3), seed=5)
    tokens = sw.patch_partition(clip, (2, 2, 2))
    back = sw.patch_reverse(tokens, (2, 2, 2), 3)
    np.testing.assert_array_equal(back.data, clip.data)


def test_patch_partition_divisibility_error():
    with pytest.raises(ShapeError):
        sw.patch_partition(grid_of((5, 8, 8, 3)), (2, 2, 2))


def test_linear_embed_identity_and_width():
    tokens = grid_of((2, 2, 2, 8), seed=2)
    eye = Tensor(np.eye(8, dtype=np.float32))
    out = sw.linear_embed(tokens, eye, tz.zeros((8,)))
    np.testing.assert_allclose(out.data, tokens.data, atol=1e-6)
    rng = np.random.default_rng(0)
    w96 = tz.trunc_normal((8, 96), rng)
    assert sw.linear_embed(tokens, w96, tz.zeros((96,))).shape[-1] == 96


def test_linear_embed_gradcheck():
    rng = np.random.default_rng(1)
    tok = rng.normal(size=(2, 2, 2, 4)).astype(np.float32)
    w = rng.normal(size=(4, 6)).astype(np.float32)
    b = rng.normal(size=(6,)).astype(np.float32)
    check_op(lambda t: sw.linear_embed(t[0], t[1], t[2]), [tok, w, b])


# ---------------------------------------------------------------------------
# window partition


def test_window_counts_16cubed():
    ws = sw.window_partition(grid_of((16, 16, 16, 4)), (8, 8, 8))
    assert ws.windows.shape[0] == 8
    assert ws.mask is None

    shifted = sw.window_partition(grid_of((16, 16, 16, 4)), (8, 8, 8), (4, 4, 4))
    assert shifted.windows.shape[0] == 8  # cyclic batching keeps the count
    assert shifted.mask is not None
    # the naive shifted partition would need 27 regions
    assert len(region_boxes((16, 16, 16), (8, 8, 8), (4, 4, 4))) == 27


def test_window_partition_reverse_roundtrip():
    for shift in ((0, 0, 0), (1, 2, 2)):
        x = grid_of((4, 8, 8, 6), seed=3)
        ws = sw.window_partition(x, (2, 4, 4), shift)
        back = sw.window_reverse(ws)
        np.testing.assert_array_equal(back.data, x.data)


def test_window_partition_roundtrip_with_padding():
    x = grid_of((3, 5, 7, 4), seed=4)
    for shift in ((0, 0, 0), (1, 2, 2)):
        ws = sw.window_partition(x, (2, 4, 4), shift)
        assert ws.windows.shape[0] == 2 * 2 * 2  # ceil-divided counts
        assert ws.mask is not None  # padding masked even at zero shift
        np.testing.assert_array_equal(sw.window_reverse(ws).data, x.data)


def test_mask_entries_and_padded_keys():
    x = grid_of((3, 5, 7, 4), seed=6)
    ws = sw.window_partition(x, (2, 4, 4), (1, 2, 2))
    assert set(np.unique(ws.mask)) <= {0.0, np.float32(sw.MASK_VALUE)}


def test_window_count_matches_unshifted_for_many_shapes():
    for shape, window in (((8, 8, 8, 2), (2, 4, 4)), ((6, 10, 12, 3), (2, 4, 4)),
                          ((4, 7, 9, 2), (2, 3, 3))):
        plain = sw.window_partition(grid_of(shape), window)
        shifted = sw.window_partition(grid_of(shape), window,
                                      sw.default_shift(window))
        assert plain.windows.shape[0] == shifted.windows.shape[0]


# ---------------------------------------------------------------------------
# relative position bias


def test_rel_pos_index_shared_for_equal_displacement():
    window = (2, 3, 3)
    n = 2 * 3 * 3
    idx = sw.rel_pos_index(window).reshape(n, n)
    coords = np.stack(np.meshgrid(np.arange(2), np.arange(3), np.arange(3),
                                  indexing="ij")).reshape(3, -1)
    seen = {}
    for i in range(n):
        for j in range(n):
            disp = tuple(coords[:, i] - coords[:, j])
            if disp in seen:
                assert idx[i, j] == seen[disp]
            else:
                seen[disp] = idx[i, j]
    assert idx.max() < sw.bias_table_rows(window)


def test_rel_pos_index_swap_negates_displacement():
    window = (2, 2, 2)
    n = 8
    idx = sw.rel_pos_index(window).reshape(n, n)
    coords = np.stack(np.meshgrid(np.arange(2), np.arange(2), np.arange(2),
                                  indexing="ij")).reshape(3, -1)
    for i in range(n):
        for j in range(n):
            disp_ij = coords[:, i] - coords[:, j]
            # find any pair with the negated displacement; it must share idx[j, i]
            np.testing.assert_array_equal(coords[:, j] - coords[:, i], -disp_ij)
            assert idx[j, i] == sw.rel_pos_index(window).reshape(n, n)[j, i]


# ---------------------------------------------------------------------------
# attention


def params_for(c, heads, window, seed=0, zero_bias=True):
    p = sw.init_block_params(c, heads, window, np.random.default_rng(seed))
    if not zero_bias:
        p.bias_table = tz.trunc_normal(p.bias_table.shape, np.random.default_rng(seed + 1))
    return p


def test_single_token_window_is_projected_value():
    window = (1, 1, 1)
    p = params_for(4, 2, window, seed=3)
    x = grid_of((2, 2, 2, 4), seed=9)
    out = sw.shifted_window_attention(x, p, window, (0, 0, 0))
    expected = x.data.reshape(-1, 4) @ p.wv.data @ p.wl.data
    np.testing.assert_allclose(out.data.reshape(-1, 4), expected, atol=1e-5)


def test_identical_tokens_get_identical_outputs():
    window = (1, 2, 2)
    p = params_for(6, 2, window, seed=4)
    token = np.random.default_rng(1).normal(size=6).astype(np.float32)
    x = Tensor(np.broadcast_to(token, (1, 2, 2, 6)).copy())
    out = sw.shifted_window_attention(x, p, window, (0, 0, 0)).data.reshape(-1, 6)
    for row in out[1:]:
        np.testing.assert_allclose(row, out[0], atol=1e-6)


def test_masked_pairs_get_negligible_weight():
    # evaluate softmax over [z, z + MASK_VALUE]: masked weight < 1e-4
    logits = Tensor(np.array([[0.0, sw.MASK_VALUE]], dtype=np.float32))
    weights = tz.softmax_lastdim(logits).data
    assert weights[0, 1] < 1e-4


def test_attention_rows_sum_to_one_with_and_without_mask():
    window = (2, 2, 2)
    p = params_for(4, 2, window, seed=5, zero_bias=False)
    for shift in ((0, 0, 0), (1, 1, 1)):
        ws = sw.window_partition(grid_of((4, 4, 4, 4), seed=7), window, shift)
        x = ws.windows
        n_win, n_tok, c = x.shape

        def split(proj):
            return tz.permute(tz.reshape(proj, (n_win, n_tok, 2, 2)), (0, 2, 1, 3))

        attn = tz.mul(tz.matmul(split(tz.linear(x, p.wq)),
                                tz.permute(split(tz.linear(x, p.wk)), (0, 1, 3, 2))),
                      Tensor(1.0 / np.sqrt(2.0)))
        if ws.mask is not None:
            attn = tz.add(attn, Tensor(ws.mask[:, None, :, :]))
        probs = tz.softmax_lastdim(attn).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_shifted_attention_matches_naive_regions_16cubed():
    window, shift = (8, 8, 8), (4, 4, 4)
    p = params_for(8, 2, window, seed=11, zero_bias=False)
    x = grid_of((16, 16, 16, 8), seed=12)
    fast = sw.shifted_window_attention(x, p, window, shift)
    naive = naive_shifted_attention(x.data, p, window, shift)
    np.testing.assert_allclose(fast.data, naive, atol=1e-5)


def test_shifted_attention_matches_naive_smaller_case():
    window, shift = (2, 4, 4), (1, 2, 2)
    p = params_for(6, 3, window, seed=13, zero_bias=False)
    x = grid_of((4, 8, 8, 6), seed=14)
    fast = sw.shifted_window_attention(x, p, window, shift)
    naive = naive_shifted_attention(x.data, p, window, shift)
    np.testing.assert_allclose(fast.data, naive, atol=1e-5)


# ---------------------------------------------------------------------------
# blocks


def test_block_pair_identity_with_zeroed_projections():
    window = (2, 2, 2)
    pair = sw.init_block_pair(4, 2, window, np.random.default_rng(3))
    for blk in (pair.plain, pair.shifted):
        blk.wl = tz.zeros(blk.wl.shape)
        blk.w2 = tz.zeros(blk.w2.shape)
        blk.b2 = tz.zeros(blk.b2.shape)
    x = grid_of((2, 4, 4, 4), seed=15)
    out = sw.block_pair(x, pair, window)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_block_pair_preserves_shape():
    window = (2, 7, 7)
    pair = sw.init_block_pair(96, 4, window, np.random.default_rng(4))
    x = grid_of((4, 16, 16, 96), seed=16)
    assert sw.block_pair(x, pair, window).shape == x.shape


def test_block_pair_gradcheck_micro():
    window = (2, 2, 2)
    rng = np.random.default_rng(5)
    pair = sw.init_block_pair(8, 2, window, rng)
    # scale the attention projections away from the near-uniform-softmax init:
    # at std 0.02 their gradients sit below the float32 FD noise floor
    for blk in (pair.plain, pair.shifted):
        for name in ("wq", "wk", "wv", "wl"):
            t = getattr(blk, name)
            t.data = t.data * 10.0
    x = np.random.default_rng(17).normal(size=(2, 7, 7, 8)).astype(np.float32) * 0.5

    # check the input gradient plus a couple of parameter gradients
    check_op(lambda t: sw.block_pair(t[0], pair, window), [x])

    for pick in ("wq", "bias_table", "w1"):
        param = getattr(pair.shifted, pick)
        vals = [param.data.copy()]

        def rebuild(t, pick=pick, param=param):
            setattr(pair.shifted, pick, t[0])
            out = sw.block_pair(Tensor(x), pair, window)
            setattr(pair.shifted, pick, param)
            return out

        check_op(rebuild, vals, step=1e-2, weighted=True)


# ---------------------------------------------------------------------------
# merging / expanding


def test_patch_merging_shapes():
    w = tz.trunc_normal((4 * 96, 2 * 96), np.random.default_rng(0))
    out = sw.patch_merging(grid_of((8, 64, 64, 96)), w)
    assert out.shape == (8, 32, 32, 192)
    # token count reduced exactly 4x
    assert out.shape[0] * out.shape[1] * out.shape[2] == (8 * 64 * 64) // 4


def test_patch_merging_odd_extent_error():
    w = tz.trunc_normal((16, 8), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sw.patch_merging(grid_of((2, 3, 4, 4)), w)


def test_patch_merging_identity_extract_topleft():
    c = 3
    x = grid_of((2, 4, 4, c), seed=18)
    w = np.zeros((4 * c, 2 * c), dtype=np.float32)
    w[:c, :c] = np.eye(c)  # select the first C of 4C ...
    w[:c, c:] = np.eye(c)  # ... duplicated into both output halves
    out = sw.patch_merging(x, Tensor(w)).data
    topleft = x.data[:, 0::2, 0::2, :]
    np.testing.assert_allclose(out[..., :c], topleft, atol=1e-6)
    np.testing.assert_allclose(out[..., c:], topleft, atol=1e-6)


def test_patch_expanding_shapes_and_roundtrip():
    rng = np.random.default_rng(1)
    out = sw.patch_expanding(grid_of((8, 16, 16, 384)), sw.init_expand_weight(384, rng))
    assert out.shape == (8, 32, 32, 192)

    x = grid_of((8, 32, 32, 192))
    merged = sw.patch_merging(x, tz.trunc_normal((4 * 192, 384), rng))
    assert merged.shape == (8, 16, 16, 384)
    expanded = sw.patch_expanding(merged, sw.init_expand_weight(384, rng))
    assert expanded.shape == x.shape


def test_merge_expand_gradcheck():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    wm = rng.normal(size=(16, 8), scale=0.2).astype(np.float32)
    we = rng.normal(size=(4, 8), scale=0.2).astype(np.float32)
    check_op(lambda t: sw.patch_merging(t[0], t[1]), [x, wm])
    check_op(lambda t: sw.patch_expanding(t[0], t[1]), [x, we])


# ---------------------------------------------------------------------------
# complexity formulas


def test_flops_formula_values():
    # frozen integer evaluations of the two cost formulas
    assert sw.flops_wmsa(2, 7, 7, 1, 2, 7) == 19600
    assert sw.flops_msa(2, 7, 7, 1) == 4 * 98 + 2 * 98 * 98
    cases = [
        ((1, 1, 1, 1), 4 + 2),
        ((2, 2, 2, 3), 4 * 8 * 9 + 2 * 64 * 3),
        ((4, 16, 16, 96), 4 * 1024 * 9216 + 2 * 1024 ** 2 * 96),
    ]
    for args, expected in cases:
        assert sw.flops_msa(*args) == expected


def test_flops_equal_when_single_window():
    # phw == P M^2 makes the window cover everything: identical cost
    assert sw.flops_msa(2, 7, 7, 5) == sw.flops_wmsa(2, 7, 7, 5, 2, 7)


def test_flops_msa_quadratic_term():
    lo = sw.flops_msa(1, 100, 100, 1) - 4 * 10 ** 4
    hi = sw.flops_msa(1, 100, 200, 1) - 4 * 2 * 10 ** 4
    assert hi == 4 * lo


def test_flops_wmsa_linear_in_tokens():
    base = sw.flops_wmsa(2, 14, 14, 8, 2, 7)
    double = sw.flops_wmsa(2, 28, 14, 8, 2, 7)
    assert double == 2 * base


def test_attention_mac_counter_matches_formula_second_term():
    for shape, window, c, heads in (((2, 14, 14), (2, 7, 7), 14, 2),
                                    ((4, 8, 8), (2, 4, 4), 8, 2)):
        p = params_for(c, heads, window, seed=20)
        x = grid_of(shape + (c,), seed=21)
        sw.reset_attention_mac_count()
        sw.shifted_window_attention(x, p, window, (0, 0, 0))
        measured = sw.attention_mac_count()
        expected = 2 * window[0] * window[1] * window[2] * np.prod(shape) * c
        assert abs(measured - expected) <= 0.05 * expected
