"""3D shifted-window attention primitives.

Token grids are (T', H', W', C) tensors. Windows of size (P, M, M) partition
the grid after bottom-right zero padding; the shifted variant cyclically
rolls the grid first and masks attention across original-boundary regions so
the window count stays equal to the unshifted count. Relative position bias
is a learned table indexed purely by 3D token displacement.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e4

# multiply-accumulate counter for the two attention matmuls (QK^T and attn@V)
_ATTN_MACS = 0


def reset_attention_mac_count():
    global _ATTN_MACS
    _ATTN_MACS = 0


def attention_mac_count():
    return _ATTN_MACS


# ---------------------------------------------------------------------------
# patch partition / embedding


def patch_partition(frames, patch):
    """(T, H, W, ch) -> (T/Tp, H/Hp, W/Wp, ch*Tp*Hp*Wp), a lossless regroup."""
    tp, hp, wp = patch
    t, h, w, ch = frames.shape
    if t % tp or h % hp or w % wp:
        raise ShapeError(f"clip {frames.shape} not divisible by patch {patch}")
    x = tz.reshape(frames, (t // tp, tp, h // hp, hp, w // wp, wp, ch))
    x = tz.permute(x, (0, 2, 4, 1, 3, 5, 6))
    return tz.reshape(x, (t // tp, h // hp, w // wp, tp * hp * wp * ch))


def patch_reverse(tokens, patch, channels):
    """Exact inverse of patch_partition."""
    tp, hp, wp = patch
    t2, h2, w2, feat = tokens.shape
    if feat != tp * hp * wp * channels:
        raise ShapeError(f"feature dim {feat} != patch volume x channels")
    x = tz.reshape(tokens, (t2, h2, w2, tp, hp, wp, channels))
    x = tz.permute(x, (0, 3, 1, 4, 2, 5, 6))
    return tz.reshape(x, (t2 * tp, h2 * hp, w2 * wp, channels))


def linear_embed(tokens, weight, bias):
    """Per-token affine projection to the working channel width."""
    return tz.linear(tokens, weight, bias)


# ---------------------------------------------------------------------------
# window partition


@dataclass
class WindowSet:
    windows: Tensor  # (n_windows, P*M*M, C)
    window: tuple
    shift: tuple
    grid_shape: tuple  # unpadded (t, h, w)
    padded_shape: tuple
    mask: np.ndarray = None  # (n_windows, N, N) additive, entries {0, MASK_VALUE}


def _window_counts(padded, window):
    return tuple(p // m for p, m in zip(padded, window))


def _partition_data_shape(t, h, w, window):
    p, mh, mw = window
    return (t // p, p, h // mh, mh, w // mw, mw)


def window_partition(grid, window, shift=(0, 0, 0)):
    """Split a (T', H', W', C) grid into non-overlapping window token groups.

    With a nonzero shift the grid is cyclically rolled by -shift first and an
    additive mask is built so attention never crosses original-feature-map
    boundaries; padded positions are masked out as keys as well.
    """
    t, h, w, c = grid.shape
    p, mh, mw = window
    pads = tuple((m - e % m) % m for e, m in zip((t, h, w), window))
    padded = (t + pads[0], h + pads[1], w + pads[2])
    if any(m > e for m, e in zip(window, padded)):
        raise ConfigError(f"window {window} larger than padded grid {padded}")

    x = grid
    if any(pads):
        x = tz.pad3d(x, pads)
    if any(shift):
        x = tz.roll3d(x, tuple(-s for s in shift))

    nt, nh, nw = _window_counts(padded, window)
    xs = tz.reshape(x, (nt, p, nh, mh, nw, mw, c))
    xs = tz.permute(xs, (0, 2, 4, 1, 3, 5, 6))
    windows = tz.reshape(xs, (nt * nh * nw, p * mh * mw, c))

    mask = None
    if any(shift) or any(pads):
        mask = _attention_mask(padded, (t, h, w), window, shift)
    return WindowSet(windows=windows, window=window, shift=tuple(shift),
                     grid_shape=(t, h, w), padded_shape=padded, mask=mask)


def window_reverse(ws: WindowSet, windows=None):
    """Scatter window tokens back to the (T', H', W', C) grid."""
    win = ws.windows if windows is None else windows
    t, h, w = ws.grid_shape
    pt, ph, pw = ws.padded_shape
    p, mh, mw = ws.window
    c = win.shape[-1]
    nt, nh, nw = _window_counts(ws.padded_shape, ws.window)
    x = tz.reshape(win, (nt, nh, nw, p, mh, mw, c))
    x = tz.permute(x, (0, 3, 1, 4, 2, 5, 6))
    x = tz.reshape(x, (pt, ph, pw, c))
    if any(ws.shift):
        x = tz.roll3d(x, ws.shift)
    if (pt, ph, pw) != (t, h, w):
        x = tz.crop3d(x, (t, h, w))
    return x


def _region_ids(padded, window, shift):
    """Label contiguous original regions on the rolled, padded grid."""
    ids = np.zeros(padded, dtype=np.int32)
    cnt = 0
    for sl_t in _axis_slices(window[0], shift[0]):
        for sl_h in _axis_slices(window[1], shift[1]):
            for sl_w in _axis_slices(window[2], shift[2]):
                ids[sl_t, sl_h, sl_w] = cnt
                cnt += 1
    return ids


def _axis_slices(m, s):
    if s == 0:
        return (slice(None),)
    return (slice(-m), slice(-m, -s), slice(-s, None))


def _partition_np(vol, window):
    """numpy mirror of the window regroup for mask construction."""
    t, h, w = vol.shape
    p, mh, mw = window
    nt, nh, nw = t // p, h // mh, w // mw
    x = vol.reshape(nt, p, nh, mh, nw, mw)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(nt * nh * nw, p * mh * mw)


def _attention_mask(padded, true_shape, window, shift):
    valid = np.zeros(padded, dtype=np.int32)
    valid[: true_shape[0], : true_shape[1], : true_shape[2]] = 1
    if any(shift):
        valid = np.roll(valid, tuple(-s for s in shift), axis=(0, 1, 2))
        regions = _region_ids(padded, window, shift)
    else:
        regions = np.zeros(padded, dtype=np.int32)
    reg_w = _partition_np(regions, window)
    val_w = _partition_np(valid, window)
    same_region = reg_w[:, :, None] == reg_w[:, None, :]
    key_valid = val_w[:, None, :] == 1
    allowed = same_region & key_valid
    return np.where(allowed, 0.0, MASK_VALUE).astype(np.float32)


# ---------------------------------------------------------------------------
# relative position bias

_REL_INDEX_CACHE = {}


def rel_pos_index(window):
    """(N*N,) table-row index for every query/key pair, by 3D displacement."""
    window = tuple(window)
    cached = _REL_INDEX_CACHE.get(window)
    if cached is not None:
        return cached
    p, mh, mw = window
    coords = np.stack(np.meshgrid(np.arange(p), np.arange(mh), np.arange(mw),
                                  indexing="ij"))  # (3, P, Mh, Mw)
    flat = coords.reshape(3, -1)
    rel = flat[:, :, None] - flat[:, None, :]  # (3, N, N)
    rel[0] += p - 1
    rel[1] += mh - 1
    rel[2] += mw - 1
    idx = (rel[0] * (2 * mh - 1) * (2 * mw - 1) + rel[1] * (2 * mw - 1) + rel[2])
    idx = idx.reshape(-1)
    _REL_INDEX_CACHE[window] = idx
    return idx


def bias_table_rows(window):
    p, mh, mw = window
    return (2 * p - 1) * (2 * mh - 1) * (2 * mw - 1)


# ---------------------------------------------------------------------------
# attention and blocks


@dataclass
class BlockParams:
    """One 3D Swin block: pre-attention LN, per-head QKV/output projections,
    relative-position-bias table, and the 2-layer GELU MLP with its LN."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor  # (C, C): per-head (C, d) projections side by side
    wk: Tensor
    wv: Tensor
    wl: Tensor  # (C, C) output projection
    bias_table: Tensor  # (bias_table_rows(window), heads)
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor  # (C, 2C)
    b1: Tensor
    w2: Tensor  # (2C, C)
    b2: Tensor
    heads: int

    def named_tensors(self, prefix=""):
        for name in ("ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wl", "bias_table",
                     "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2"):
            yield f"{prefix}{name}", getattr(self, name)


def init_block_params(c, heads, window, rng):
    if c % heads:
        raise ConfigError(f"head count {heads} must divide channel width {c}")
    return BlockParams(
        ln1_gamma=tz.ones((c,)), ln1_beta=tz.zeros((c,)),
        wq=tz.trunc_normal((c, c), rng), wk=tz.trunc_normal((c, c), rng),
        wv=tz.trunc_normal((c, c), rng), wl=tz.trunc_normal((c, c), rng),
        bias_table=tz.zeros((bias_table_rows(window), heads)),
        ln2_gamma=tz.ones((c,)), ln2_beta=tz.zeros((c,)),
        w1=tz.trunc_normal((c, 2 * c), rng), b1=tz.zeros((2 * c,)),
        w2=tz.trunc_normal((2 * c, c), rng), b2=tz.zeros((c,)),
        heads=heads,
    )


def window_attention(ws: WindowSet, params: BlockParams):
    """Masked multi-head attention within each window; returns window tokens."""
    global _ATTN_MACS
    x = ws.windows
    n_win, n_tok, c = x.shape
    heads = params.heads
    d = c // heads

    def split_heads(proj):
        h = tz.reshape(proj, (n_win, n_tok, heads, d))
        return tz.permute(h, (0, 2, 1, 3))

    q = split_heads(tz.linear(x, params.wq))
    k = split_heads(tz.linear(x, params.wk))
    v = split_heads(tz.linear(x, params.wv))

    scale = Tensor(np.float32(1.0 / np.sqrt(d)))
    attn = tz.mul(tz.matmul(q, tz.permute(k, (0, 1, 3, 2))), scale)
    _ATTN_MACS += n_win * heads * n_tok * n_tok * d

    bias = tz.take(params.bias_table, rel_pos_index(ws.window))
    bias = tz.permute(tz.reshape(bias, (n_tok, n_tok, heads)), (2, 0, 1))
    attn = tz.add(attn, bias)
    if ws.mask is not None:
        attn = tz.add(attn, Tensor(ws.mask[:, None, :, :]))

    attn = tz.softmax_lastdim(attn)
    out = tz.matmul(attn, v)
    _ATTN_MACS += n_win * heads * n_tok * n_tok * d

    out = tz.reshape(tz.permute(out, (0, 2, 1, 3)), (n_win, n_tok, c))
    return tz.linear(out, params.wl)


def shifted_window_attention(grid, params: BlockParams, window, shift):
    """partition -> attention -> reverse, the attention core of one block."""
    ws = window_partition(grid, window, shift)
    return window_reverse(ws, window_attention(ws, params))


def mlp(x, params: BlockParams):
    hidden = tz.gelu(tz.linear(x, params.w1, params.b1))
    return tz.linear(hidden, params.w2, params.b2)


def swin_block(grid, params: BlockParams, window, shift):
    """x + Attn(LN(x)), then + MLP(LN(.)); shape preserving."""
    att = shifted_window_attention(
        tz.layer_norm(grid, params.ln1_gamma, params.ln1_beta), params, window, shift)
    y = tz.add(grid, att)
    z = tz.add(y, mlp(tz.layer_norm(y, params.ln2_gamma, params.ln2_beta), params))
    return z


def default_shift(window):
    return tuple(m // 2 for m in window)


@dataclass
class BlockPairParams:
    plain: BlockParams
    shifted: BlockParams

    def named_tensors(self, prefix=""):
        yield from self.plain.named_tensors(prefix + "a.")
        yield from self.shifted.named_tensors(prefix + "b.")


def init_block_pair(c, heads, window, rng):
    return BlockPairParams(init_block_params(c, heads, window, rng),
                           init_block_params(c, heads, window, rng))


def block_pair(grid, pair: BlockPairParams, window):
    """Two successive blocks: plain windows, then shifted windows."""
    x = swin_block(grid, pair.plain, window, (0, 0, 0))
    return swin_block(x, pair.shifted, window, default_shift(window))


# ---------------------------------------------------------------------------
# merging / expanding


def patch_merging(grid, weight):
    """Concat 2x2 spatial neighbours (time untouched) and project 4C -> 2C."""
    t, h, w, c = grid.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merging needs even H', W', got {grid.shape}")
    if weight.shape != (4 * c, 2 * c):
        raise ShapeError(f"merge weight must be (4C, 2C) = {(4 * c, 2 * c)}, "
                         f"got {weight.shape}")
    x = tz.reshape(grid, (t, h // 2, 2, w // 2, 2, c))
    x = tz.permute(x, (0, 1, 3, 2, 4, 5))  # neighbour order (0,0),(0,1),(1,0),(1,1)
    x = tz.reshape(x, (t, h // 2, w // 2, 4 * c))
    return tz.linear(x, weight)


def patch_expanding(grid, weight):
    """Project C -> 2C then rearrange into a 2x2 spatial block of C/2 vectors."""
    t, h, w, c = grid.shape
    if weight.shape != (c, 2 * c):
        raise ShapeError(f"expand weight must be (C, 2C) = {(c, 2 * c)}, "
                         f"got {weight.shape}")
    if (2 * c) % 4:
        raise ShapeError(f"expanded channel dim {2 * c} not divisible by 4")
    x = tz.linear(grid, weight)
    x = tz.reshape(x, (t, h, w, 2, 2, c // 2))
    x = tz.permute(x, (0, 1, 3, 2, 4, 5))
    return tz.reshape(x, (t, 2 * h, 2 * w, c // 2))


def init_merge_weight(c, rng):
    return tz.trunc_normal((4 * c, 2 * c), rng)


def init_expand_weight(c, rng):
    return tz.trunc_normal((c, 2 * c), rng)


# ---------------------------------------------------------------------------
# complexity formulas


def flops_msa(p, h, w, c):
    """Global 3D attention MAC count: 4 p h w C^2 + 2 (p h w)^2 C."""
    phw = int(p) * int(h) * int(w)
    return 4 * phw * int(c) ** 2 + 2 * phw * phw * int(c)


def flops_wmsa(p, h, w, c, wp, wm):
    """Windowed 3D attention MAC count: 4 p h w C^2 + 2 P M^2 p h w C."""
    phw = int(p) * int(h) * int(w)
    return 4 * phw * int(c) ** 2 + 2 * int(wp) * int(wm) ** 2 * phw * int(c)
