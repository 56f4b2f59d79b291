"""Spectrum-occupancy-rate labeling via local-mean binarization.

A frame is converted to 8-bit gray levels, thresholded against the mean of a
w-by-w block centred on each pixel (clipped at the image bounds), and the
occupied-pixel statistics are reduced to occupancy rates. Block sums are
exact integer accumulations, so the fast integral-image path agrees with a
naive double loop bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .fileio import write_csv
from .ingest import rgb_to_gray


@dataclass
class SorLabelConfig:
    block_size: int = 16
    margin: float = 0.02  # added to the local mean before comparing, in [0,1] units

    def __post_init__(self):
        if self.block_size < 2 or self.block_size % 2:
            raise ConfigError(f"block_size must be even and >= 2, got {self.block_size}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")


def quantize_gray(frame):
    """(H, W) or (H, W, ch) in [0, 1] -> uint8-valued int array of gray levels."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 3:
            arr = rgb_to_gray(arr).astype(np.float64)
        elif arr.shape[2] == 1:
            arr = arr[:, :, 0]
        else:
            raise ShapeError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-d or 3-d frame, got shape {arr.shape}")
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.int64)


def local_threshold(frame, cfg: SorLabelConfig):
    """Mean of the w x w block centred at each pixel, clipped to the image.

    Input values are quantized to integer gray levels first; the returned map
    is back on the [0, 1] scale. For pixel (x, y) the block covers rows
    [x - w/2, x + w/2) intersected with the image, likewise columns.
    """
    levels = quantize_gray(frame)
    h, w_img = levels.shape
    w = cfg.block_size
    if w > min(h, w_img):
        raise ConfigError(f"block_size {w} exceeds frame extent {min(h, w_img)}")
    half = w // 2

    # integral image with a zero border; sums are exact in int64
    integral = np.zeros((h + 1, w_img + 1), dtype=np.int64)
    integral[1:, 1:] = levels.cumsum(axis=0).cumsum(axis=1)

    x0 = np.clip(np.arange(h) - half, 0, h)
    x1 = np.clip(np.arange(h) + half, 0, h)
    y0 = np.clip(np.arange(w_img) - half, 0, w_img)
    y1 = np.clip(np.arange(w_img) + half, 0, w_img)

    sums = (integral[x1[:, None], y1[None, :]] - integral[x0[:, None], y1[None, :]]
            - integral[x1[:, None], y0[None, :]] + integral[x0[:, None], y0[None, :]])
    counts = (x1 - x0)[:, None] * (y1 - y0)[None, :]
    return (sums / counts) / 255.0


def binarize(frame, theta, margin):
    """Occupied iff quantized pixel value exceeds theta + margin."""
    levels = quantize_gray(frame)
    if levels.shape != np.asarray(theta).shape:
        raise ShapeError(f"frame {levels.shape} vs threshold {np.asarray(theta).shape}")
    return ((levels / 255.0) > (np.asarray(theta) + margin)).astype(np.uint8)


def sor_fraction(grid):
    """Occupied-pixel fraction, the estimator used for training targets."""
    g = np.asarray(grid)
    return float(g.sum(dtype=np.int64)) / g.size


def sor_stats(grid):
    """All SOR statistics of one occupancy grid.

    Rows are time (count T), columns are frequency (count F). Returns a dict
    with the fraction estimator, the idle-product form
    p_sor = 1 - F0*T0/(F*T), and the axis rates p_f, p_t.
    """
    g = np.asarray(grid)
    t_rows, f_cols = g.shape
    idle_cols = int((g.sum(axis=0) == 0).sum())
    idle_rows = int((g.sum(axis=1) == 0).sum())
    return {
        "fraction": sor_fraction(g),
        "paper_form": 1.0 - (idle_cols * idle_rows) / (f_cols * t_rows),
        "p_f": 1.0 - idle_cols / f_cols,
        "p_t": 1.0 - idle_rows / t_rows,
    }


def label_frame(frame, cfg: SorLabelConfig):
    theta = local_threshold(frame, cfg)
    return binarize(frame, theta, cfg.margin)


def label_clip(frames, cfg: SorLabelConfig = None):
    """Per-frame occupied fraction of a clip (T, H, W, ch) -> float64 (T,)."""
    cfg = cfg or default_config_for(frames.shape[1], frames.shape[2])
    return np.array([sor_fraction(label_frame(f, cfg)) for f in frames])


def label_clip_stats(frames, cfg: SorLabelConfig = None):
    """Per-frame dict of all SOR statistics."""
    cfg = cfg or default_config_for(frames.shape[1], frames.shape[2])
    return [sor_stats(label_frame(f, cfg)) for f in frames]


def default_config_for(height, width):
    """Default block size 16, shrunk (kept even) to fit small frames."""
    w = min(16, height, width)
    if w % 2:
        w -= 1
    return SorLabelConfig(block_size=max(2, w))


def write_labels_csv(path, per_clip_stats):
    """CSV schema: clip_index,frame_index,sor_fraction,sor_paper_form,p_f,p_t."""
    rows = []
    for ci, stats in per_clip_stats:
        for fi, s in enumerate(stats):
            rows.append((ci, fi, s["fraction"], s["paper_form"], s["p_f"], s["p_t"]))
    write_csv(path, ("clip_index", "frame_index", "sor_fraction",
                     "sor_paper_form", "p_f", "p_t"), rows)
