"""Task networks: spectrogram forecaster and occupancy-rate forecaster.

Both share the same hierarchical encoder shape (patch embed, three stages of
shifted-window block pairs with 2x spatial merging between them). The
spectrogram forecaster adds a bottleneck, a mirrored decoder with skip
concatenations (each followed by a learned 2c -> c reduction) and a
transposed-convolution projection head; the occupancy forecaster adds a small
transposed-conv + linear head ending in a sigmoid.
"""

import math
import os
import shutil

import numpy as np

from dataclasses import dataclass

from . import swin3d as sw
from . import tensor as tz
from .errors import CheckpointError, ConfigError, ShapeError
from .fileio import atomic_replace_dir, load_spt1, read_kv, save_spt1, write_kv
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 96
    enc_pairs: tuple = (2, 4, 2)
    enc_heads: tuple = (4, 8, 16)
    bottleneck_pairs: int = 2
    dec_pairs: tuple = (2, 4, 2)
    dec_heads: tuple = (16, 8, 4)
    patch: tuple = (2, 4, 4)
    window: tuple = (2, 7, 7)
    input_t: int = 8
    input_h: int = 64
    input_w: int = 64
    channels_in: int = 3
    sor_hidden: int = 256

    def __post_init__(self):
        c = self.channels
        if self.channels_in not in (1, 3):
            raise ConfigError(f"channels_in must be 1 or 3, got {self.channels_in}")
        for width, heads in zip((c, 2 * c, 4 * c), self.enc_heads):
            if width % heads:
                raise ConfigError(f"encoder heads {heads} must divide width {width}")
        for width, heads in zip((4 * c, 2 * c, c), self.dec_heads):
            if width % heads:
                raise ConfigError(f"decoder heads {heads} must divide width {width}")
        tp, hp, wp = self.patch
        if self.input_t % tp:
            raise ConfigError(f"input T {self.input_t} not divisible by patch {tp}")
        if self.input_h % (4 * hp) or self.input_w % (4 * wp):
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} must be a multiple of "
                f"4x patch ({4 * hp}, {4 * wp})")

    @property
    def horizon(self):
        # input-N-predict-N: the projection head structurally emits input_t frames
        return self.input_t

    def grid_shape(self, stage):
        """Token grid at encoder stage 1..3 (stage 1 = full embedded grid)."""
        tp, hp, wp = self.patch
        f = 2 ** (stage - 1)
        return (self.input_t // tp, self.input_h // hp // f, self.input_w // wp // f)

    def to_kv(self, prefix="config."):
        return {
            f"{prefix}channels": self.channels,
            f"{prefix}enc_pairs": ",".join(map(str, self.enc_pairs)),
            f"{prefix}enc_heads": ",".join(map(str, self.enc_heads)),
            f"{prefix}bottleneck_pairs": self.bottleneck_pairs,
            f"{prefix}dec_pairs": ",".join(map(str, self.dec_pairs)),
            f"{prefix}dec_heads": ",".join(map(str, self.dec_heads)),
            f"{prefix}patch": ",".join(map(str, self.patch)),
            f"{prefix}window": ",".join(map(str, self.window)),
            f"{prefix}input_t": self.input_t,
            f"{prefix}input_h": self.input_h,
            f"{prefix}input_w": self.input_w,
            f"{prefix}channels_in": self.channels_in,
            f"{prefix}sor_hidden": self.sor_hidden,
        }

    @classmethod
    def from_kv(cls, kv, prefix="config."):
        def ints(key):
            return tuple(int(v) for v in kv[prefix + key].split(","))

        return cls(
            channels=int(kv[prefix + "channels"]),
            enc_pairs=ints("enc_pairs"), enc_heads=ints("enc_heads"),
            bottleneck_pairs=int(kv[prefix + "bottleneck_pairs"]),
            dec_pairs=ints("dec_pairs"), dec_heads=ints("dec_heads"),
            patch=ints("patch"), window=ints("window"),
            input_t=int(kv[prefix + "input_t"]), input_h=int(kv[prefix + "input_h"]),
            input_w=int(kv[prefix + "input_w"]),
            channels_in=int(kv[prefix + "channels_in"]),
            sor_hidden=int(kv[prefix + "sor_hidden"]),
        )


MICRO_CONFIG = dict(channels=8, enc_pairs=(1, 1, 1), enc_heads=(2, 2, 2),
                    bottleneck_pairs=1, dec_pairs=(1, 1, 1), dec_heads=(2, 2, 2),
                    patch=(2, 2, 2), window=(2, 2, 2), input_t=4,
                    input_h=8, input_w=8, channels_in=3)


def micro_config(**overrides):
    """The small configuration used throughout the desk-scale experiments."""
    return ModelConfig(**{**MICRO_CONFIG, **overrides})


# ---------------------------------------------------------------------------
# shared encoder


@dataclass
class Stage:
    pairs: list

    def named_tensors(self, prefix=""):
        for i, pair in enumerate(self.pairs):
            yield from pair.named_tensors(f"{prefix}pair{i}.")

    def forward(self, grid, window):
        for pair in self.pairs:
            grid = sw.block_pair(grid, pair, window)
        return grid


def _init_stage(c, heads, n_pairs, window, rng):
    return Stage([sw.init_block_pair(c, heads, window, rng) for _ in range(n_pairs)])


class SwinEncoder3D:
    """Patch embed plus three block-pair stages with spatial merging between."""

    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.channels
        tp, hp, wp = cfg.patch
        feat_dim = tp * hp * wp * cfg.channels_in
        self.cfg = cfg
        self.embed_w = tz.trunc_normal((feat_dim, c), rng)
        self.embed_b = tz.zeros((c,))
        self.stage1 = _init_stage(c, cfg.enc_heads[0], cfg.enc_pairs[0], cfg.window, rng)
        self.merge1 = sw.init_merge_weight(c, rng)
        self.stage2 = _init_stage(2 * c, cfg.enc_heads[1], cfg.enc_pairs[1], cfg.window, rng)
        self.merge2 = sw.init_merge_weight(2 * c, rng)
        self.stage3 = _init_stage(4 * c, cfg.enc_heads[2], cfg.enc_pairs[2], cfg.window, rng)

    def named_tensors(self, prefix=""):
        yield f"{prefix}embed_w", self.embed_w
        yield f"{prefix}embed_b", self.embed_b
        yield from self.stage1.named_tensors(f"{prefix}stage1.")
        yield f"{prefix}merge1", self.merge1
        yield from self.stage2.named_tensors(f"{prefix}stage2.")
        yield f"{prefix}merge2", self.merge2
        yield from self.stage3.named_tensors(f"{prefix}stage3.")

    def forward(self, clip):
        cfg = self.cfg
        if clip.shape != (cfg.input_t, cfg.input_h, cfg.input_w, cfg.channels_in):
            raise ShapeError(
                f"clip shape {clip.shape} does not match configured input "
                f"{(cfg.input_t, cfg.input_h, cfg.input_w, cfg.channels_in)}")
        tokens = sw.patch_partition(clip, cfg.patch)
        x = sw.linear_embed(tokens, self.embed_w, self.embed_b)
        s1 = self.stage1.forward(x, cfg.window)
        s2 = self.stage2.forward(sw.patch_merging(s1, self.merge1), cfg.window)
        s3 = self.stage3.forward(sw.patch_merging(s2, self.merge2), cfg.window)
        return s1, s2, s3


# ---------------------------------------------------------------------------
# projection head channel schedule


def projection_steps(channels, channels_out):
    """Pointwise-conv widths after the patch-restoring conv.

    n = ceil(log2(C / 3)) steps, halving each step, final step to the output
    channel count.
    """
    n = max(1, math.ceil(math.log2(channels / 3.0)))
    widths = [channels]
    for _ in range(n - 1):
        widths.append(max(channels_out, widths[-1] // 2))
    widths.append(channels_out)
    return widths  # length n + 1: widths[i] -> widths[i+1] per conv


class SpectrogramPredictor:
    """Encoder, bottleneck, skip-connected mirrored decoder, projection head.

    Output is the next `input_t` frames with the input's shape, clamped to
    [0, 1].
    """

    kind = "stb"

    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.cfg = cfg
        self.encoder = SwinEncoder3D(cfg, rng)
        self.bottleneck = _init_stage(4 * c, cfg.enc_heads[2], cfg.bottleneck_pairs,
                                      cfg.window, rng)
        self.reduce1 = tz.trunc_normal((8 * c, 4 * c), rng)
        self.dstage1 = _init_stage(4 * c, cfg.dec_heads[0], cfg.dec_pairs[0], cfg.window, rng)
        self.expand1 = sw.init_expand_weight(4 * c, rng)
        self.reduce2 = tz.trunc_normal((4 * c, 2 * c), rng)
        self.dstage2 = _init_stage(2 * c, cfg.dec_heads[1], cfg.dec_pairs[1], cfg.window, rng)
        self.expand2 = sw.init_expand_weight(2 * c, rng)
        self.reduce3 = tz.trunc_normal((2 * c, c), rng)
        self.dstage3 = _init_stage(c, cfg.dec_heads[2], cfg.dec_pairs[2], cfg.window, rng)

        self.proj_kernel = tz.trunc_normal(cfg.patch + (c, c), rng)
        self.proj_bias = tz.zeros((c,))
        widths = projection_steps(c, cfg.channels_in)
        self.point_kernels = []
        self.point_biases = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.point_kernels.append(tz.trunc_normal((1, 1, 1, cin, cout), rng))
            self.point_biases.append(tz.zeros((cout,)))
        self._check_symmetry()

    def _check_symmetry(self):
        # decoder stage i consumes the width encoder stage (4 - i) produced,
        # after skip concat and 2c -> c reduction
        c = self.cfg.channels
        assert self.reduce1.shape == (8 * c, 4 * c)
        assert self.reduce2.shape == (4 * c, 2 * c)
        assert self.reduce3.shape == (2 * c, c)
        assert len(self.cfg.enc_pairs) == len(self.cfg.dec_pairs) == 3

    def named_parameters(self):
        yield from self.encoder.named_tensors("enc.")
        yield from self.bottleneck.named_tensors("bottleneck.")
        yield "dec.reduce1", self.reduce1
        yield from self.dstage1.named_tensors("dec.stage1.")
        yield "dec.expand1", self.expand1
        yield "dec.reduce2", self.reduce2
        yield from self.dstage2.named_tensors("dec.stage2.")
        yield "dec.expand2", self.expand2
        yield "dec.reduce3", self.reduce3
        yield from self.dstage3.named_tensors("dec.stage3.")
        yield "proj.kernel", self.proj_kernel
        yield "proj.bias", self.proj_bias
        for i, (k, b) in enumerate(zip(self.point_kernels, self.point_biases)):
            yield f"proj.point{i}.kernel", k
            yield f"proj.point{i}.bias", b

    def num_params(self):
        return sum(t.size for _, t in self.named_parameters())

    def encode(self, clip):
        return self.encoder.forward(_as_tensor(clip))

    def decode(self, s1, s2, s3, clamp=True):
        cfg = self.cfg
        x = self.bottleneck.forward(s3, cfg.window)
        x = tz.linear(tz.concat([x, s3], axis=-1), self.reduce1)
        x = self.dstage1.forward(x, cfg.window)
        x = sw.patch_expanding(x, self.expand1)
        x = tz.linear(tz.concat([x, s2], axis=-1), self.reduce2)
        x = self.dstage2.forward(x, cfg.window)
        x = sw.patch_expanding(x, self.expand2)
        x = tz.linear(tz.concat([x, s1], axis=-1), self.reduce3)
        x = self.dstage3.forward(x, cfg.window)
        return self.project(x, clamp=clamp)

    def project(self, grid, clamp=True):
        """Transposed-conv head: restore (T, H, W), then step channels down.

        `clamp` applies the final [0, 1] clip; gradient checks probe the
        smooth pre-clamp output because central differences are meaningless
        across the clip kinks (the clip subgradient has its own tests).
        """
        x = tz.conv3d_transpose(grid, self.proj_kernel, self.cfg.patch,
                                bias=self.proj_bias)
        for k, b in zip(self.point_kernels, self.point_biases):
            x = tz.conv3d_transpose(x, k, (1, 1, 1), bias=b)
        return tz.clip01(x) if clamp else x

    def forward(self, clip, clamp=True):
        return self.decode(*self.encode(clip), clamp=clamp)


class OccupancyPredictor:
    """Encoder plus a conv/linear head that emits `input_t` rates in (0, 1)."""

    kind = "sor"

    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        c4 = 4 * cfg.channels
        tp, hp, wp = cfg.patch
        self.cfg = cfg
        self.encoder = SwinEncoder3D(cfg, rng)

        # E = ceil(log2(Tp)) + 1 transposed-conv blocks: restore T, then 1x1x1
        # steps ending at 3 feature channels
        e_blocks = 1 if tp == 1 else math.ceil(math.log2(tp)) + 1
        self.head_kernels = []
        self.head_biases = []
        if tp > 1:
            self.head_kernels.append(tz.trunc_normal((tp, 1, 1, c4, c4), rng))
            self.head_biases.append(tz.zeros((c4,)))
        while len(self.head_kernels) < e_blocks - 1:
            self.head_kernels.append(tz.trunc_normal((1, 1, 1, c4, c4), rng))
            self.head_biases.append(tz.zeros((c4,)))
        self.head_kernels.append(tz.trunc_normal((1, 1, 1, c4, 3), rng))
        self.head_biases.append(tz.zeros((3,)))

        flat_dim = (cfg.input_h // (4 * hp)) * (cfg.input_w // (4 * wp)) * 3
        hidden = cfg.sor_hidden
        self.lin_ws = [tz.trunc_normal((flat_dim, hidden), rng),
                       tz.trunc_normal((hidden, hidden), rng)]
        self.lin_bs = [tz.zeros((hidden,)), tz.zeros((hidden,))]
        self.out_w = tz.trunc_normal((hidden, 1), rng)
        self.out_b = tz.zeros((1,))

    def named_parameters(self):
        yield from self.encoder.named_tensors("enc.")
        for i, (k, b) in enumerate(zip(self.head_kernels, self.head_biases)):
            yield f"head.conv{i}.kernel", k
            yield f"head.conv{i}.bias", b
        for i, (w, b) in enumerate(zip(self.lin_ws, self.lin_bs)):
            yield f"head.lin{i}.w", w
            yield f"head.lin{i}.b", b
        yield "head.out.w", self.out_w
        yield "head.out.b", self.out_b

    def num_params(self):
        return sum(t.size for _, t in self.named_parameters())

    def encode(self, clip):
        return self.encoder.forward(_as_tensor(clip))

    def forward(self, clip):
        cfg = self.cfg
        _, _, s3 = self.encode(clip)
        x = s3
        for k, b in zip(self.head_kernels, self.head_biases):
            stride = tuple(k.shape[:3])
            x = tz.gelu(tz.conv3d_transpose(x, k, stride, bias=b))
        t = x.shape[0]
        x = tz.reshape(x, (t, x.shape[1] * x.shape[2] * x.shape[3]))
        for w, b in zip(self.lin_ws, self.lin_bs):
            x = tz.gelu(tz.linear(x, w, b))
        out = tz.sigmoid(tz.linear(x, self.out_w, self.out_b))
        return tz.reshape(out, (t,))


def _as_tensor(clip):
    return clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip, np.float32))


def predict_occupancy_from_frames(pred_clip, label_cfg=None):
    """Label a predicted clip with the occupancy pipeline (the indirect path).

    Bit-exact equal to calling the occupancy module on the same array.
    """
    from .occupancy import label_clip

    frames = pred_clip.data if isinstance(pred_clip, Tensor) else np.asarray(pred_clip)
    return label_clip(frames, label_cfg)


# ---------------------------------------------------------------------------
# checkpoints


def _param_file(name):
    return name.replace("/", ".") + ".spt1"


def save_checkpoint(model, path):
    """Directory of SPT1 tensors plus meta.txt; written atomically."""
    tmp = f"{path}.tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    names = []
    for name, t in model.named_parameters():
        save_spt1(os.path.join(tmp, _param_file(name)), t.data)
        names.append(name)
    meta = model.cfg.to_kv()
    meta["model.kind"] = model.kind
    meta["model.param_count"] = model.num_params()
    meta["model.params"] = ";".join(names)
    write_kv(os.path.join(tmp, "meta.txt"), meta)
    atomic_replace_dir(tmp, path)


def load_checkpoint(path):
    meta_path = os.path.join(path, "meta.txt")
    if not os.path.isdir(path) or not os.path.exists(meta_path):
        raise CheckpointError(f"no checkpoint at {path}")
    meta = read_kv(meta_path)
    cfg = ModelConfig.from_kv(meta)
    kind = meta.get("model.kind")
    if kind == "stb":
        model = SpectrogramPredictor(cfg, seed=0)
    elif kind == "sor":
        model = OccupancyPredictor(cfg, seed=0)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    expected = meta["model.params"].split(";")
    actual = [name for name, _ in model.named_parameters()]
    if expected != actual:
        raise CheckpointError(f"{path}: parameter list mismatch")
    for name, t in model.named_parameters():
        arr = load_spt1(os.path.join(path, _param_file(name)))
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(np.float32)
        t.zero_grad()
    return model
