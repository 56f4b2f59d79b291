"""Frame-wise image metrics, occupancy-rate threshold accuracy, and the
comparison harnesses built on them.

All metric math runs in float64 on the 0..255 integer pixel scale (frames in
[0, 1] are scaled and rounded first). PSNR of identical frames is the +inf
sentinel, capped at 99 dB wherever values are written to CSV or averaged.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fileio import load_spt1, write_csv
from .ingest import rgb_to_gray
from .occupancy import label_clip

PSNR_CAP_DB = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PIXEL_MAX = 255.0


def to_pixel_units(frame):
    """[0, 1] float frame -> float64 array of integer gray levels 0..255."""
    arr = np.asarray(frame, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * PIXEL_MAX)


def _check_pair(pred, true):
    if pred.shape != true.shape:
        raise ShapeError(f"metric inputs differ in shape: {pred.shape} vs {true.shape}")


def mse_frame(pred, true):
    """Per-channel mean squared difference over H*W, averaged over channels."""
    p = to_pixel_units(pred)
    t = to_pixel_units(true)
    _check_pair(p, t)
    if p.ndim == 2:
        p, t = p[:, :, None], t[:, :, None]
    h, w, _ = p.shape
    per_channel = ((p - t) ** 2).sum(axis=(0, 1)) / (h * w)
    return float(per_channel.mean())


def psnr_frame(pred, true):
    """10 log10(255^2 / MSE); +inf for identical frames."""
    mse = mse_frame(pred, true)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(PIXEL_MAX ** 2 / mse))


def psnr_capped(value):
    return min(value, PSNR_CAP_DB)


def ssim_frame(pred, true):
    """Global-statistics structural similarity on BT.601 gray pixels."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    _check_pair(p, t)
    if p.ndim == 3 and p.shape[2] == 3:
        p, t = rgb_to_gray(p).astype(np.float64), rgb_to_gray(t).astype(np.float64)
    elif p.ndim == 3:
        p, t = p[:, :, 0], t[:, :, 0]
    a = to_pixel_units(p).ravel()
    b = to_pixel_units(t).ravel()
    c1 = (SSIM_K1 * PIXEL_MAX) ** 2
    c2 = (SSIM_K2 * PIXEL_MAX) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return float((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                 / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))


@dataclass
class FrameMetrics:
    frame: int
    mse: float
    psnr: float
    ssim: float


def clip_metrics(pred_clip, true_clip):
    """Per-frame metrics of two (K, H, W, ch) clips."""
    if pred_clip.shape != true_clip.shape:
        raise ShapeError(f"clip shapes differ: {pred_clip.shape} vs {true_clip.shape}")
    out = []
    for k in range(pred_clip.shape[0]):
        out.append(FrameMetrics(
            frame=k,
            mse=mse_frame(pred_clip[k], true_clip[k]),
            psnr=psnr_frame(pred_clip[k], true_clip[k]),
            ssim=ssim_frame(pred_clip[k], true_clip[k])))
    return out


# ---------------------------------------------------------------------------
# occupancy threshold accuracy


@dataclass
class AccuracyReport:
    threshold: float
    horizon: int
    n_series: int
    correct: int
    accuracy: float


def sor_accuracy(pred_series, true_series, threshold):
    """Fraction of frames whose absolute rate error is within `threshold`.

    Both arguments are sequences of length-K series; a frame counts as
    correct iff |pred - true| <= threshold.
    """
    if len(pred_series) != len(true_series):
        raise ShapeError(f"{len(pred_series)} predicted vs {len(true_series)} true series")
    correct = 0
    total = 0
    horizon = None
    for p, t in zip(pred_series, true_series):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if p.shape != t.shape:
            raise ShapeError(f"series length mismatch: {p.shape} vs {t.shape}")
        if horizon is None:
            horizon = p.size
        correct += int((np.abs(p - t) <= threshold).sum())
        total += p.size
    return AccuracyReport(threshold=threshold, horizon=horizon or 0,
                          n_series=len(pred_series), correct=correct,
                          accuracy=correct / total if total else 0.0)


# ---------------------------------------------------------------------------
# reports


def framewise_from_pairs(pred_clips, true_clips):
    """Average each metric per prediction-frame index over a set of clips.

    PSNR values are capped at the 99 dB sentinel before averaging. Returns a
    list of (k, mse, psnr, ssim) rows.
    """
    horizon = pred_clips[0].shape[0]
    sums = np.zeros((horizon, 3), dtype=np.float64)
    for pred, true in zip(pred_clips, true_clips):
        for fm in clip_metrics(pred, true):
            sums[fm.frame, 0] += fm.mse
            sums[fm.frame, 1] += psnr_capped(fm.psnr)
            sums[fm.frame, 2] += fm.ssim
    sums /= len(pred_clips)
    return [(k, sums[k, 0], sums[k, 1], sums[k, 2]) for k in range(horizon)]


def framewise_report(model, manifest, split="test"):
    """Run the forecaster over a split and average metrics per frame index."""
    from .training import load_samples

    samples = load_samples(manifest, split)
    preds, trues = [], []
    for inp, tgt in samples:
        preds.append(model.forward(inp).data)
        trues.append(tgt)
    return framewise_from_pairs(preds, trues)


def write_framewise_csv(path, rows):
    write_csv(path, ("k", "mse", "psnr", "ssim"),
              [(k, m, p, s) for k, m, p, s in rows])


def compare_channel_modes(metrics_rgb, metrics_gray):
    """Channel-rendering ablation rows: per-frame metrics side by side."""
    rows = []
    for (k, m_rgb, p_rgb, s_rgb), (_, m_g, p_g, s_g) in zip(metrics_rgb, metrics_gray):
        rows.append((k, m_rgb, m_g, p_rgb, p_g, s_rgb, s_g))
    return rows


def write_channel_compare_csv(path, rows):
    write_csv(path, ("k", "mse_rgb", "mse_gray", "psnr_rgb", "psnr_gray",
                     "ssim_rgb", "ssim_gray"), rows)


def compare_sor_paths(sor_model, stb_model, manifest, threshold, label_cfg=None):
    """Dedicated occupancy head vs labeling the predicted spectrogram.

    Returns (direct AccuracyReport, indirect AccuracyReport) on the test
    split at the given threshold.
    """
    from .models import predict_occupancy_from_frames
    from .occupancy import default_config_for
    from .training import load_samples

    label_cfg = label_cfg or default_config_for(manifest.height, manifest.width)
    samples = load_samples(manifest, "test")
    direct, indirect, truth = [], [], []
    for inp, tgt in samples:
        truth.append(label_clip(tgt, label_cfg))
        direct.append(sor_model.forward(inp).data.astype(np.float64))
        indirect.append(predict_occupancy_from_frames(stb_model.forward(inp), label_cfg))
    return (sor_accuracy(direct, truth, threshold),
            sor_accuracy(indirect, truth, threshold))
