"""Training loops for both forecasters, AdamW, early stopping, transfer.

Samples are (input T frames, target K frames) pairs cut from consecutive
non-overlapping 2T-frame windows within each split. Training is sequential
and deterministic given the seed: data order is chronological, all updates
are pure numpy.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DataError, NumericError
from .fileio import load_spt1, write_csv
from .models import OccupancyPredictor, SpectrogramPredictor, load_checkpoint
from .occupancy import SorLabelConfig, default_config_for, label_clip
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 1
    stop_threshold_pct: float = 0.01  # minimum per-epoch improvement, percent
    patience: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, val_loss, seconds
    stop_reason: str = ""
    best_epoch: int = -1
    best_val: float = float("inf")
    best_params: dict = None  # name -> array snapshot

    def losses(self):
        return [e["loss"] for e in self.epochs]

    def to_csv(self, path):
        write_csv(path, ("epoch", "loss", "val_loss", "seconds"),
                  [(e["epoch"], e["loss"], e["val_loss"], e["seconds"])
                   for e in self.epochs])


def mse_loss(pred: Tensor, target: Tensor):
    """Mean squared elementwise difference; differentiable scalar."""
    if pred.shape != target.shape:
        from .errors import ShapeError

        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return tz.mean(diff * diff)


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer.

    Per step: p -= lr * wd * p, then the bias-corrected moment update. With
    lr -> 0 a step leaves parameters unchanged (decay scales with lr too).
    """

    def __init__(self, named_params, cfg: TrainConfig):
        self.params = [(name, p) for name, p in named_params if p.requires_grad]
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, grad_scale=1.0):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name} at step {t}")
            if grad_scale != 1.0:
                g = g * np.float32(grad_scale)
            if cfg.weight_decay:
                p.data -= np.float32(cfg.learning_rate * cfg.weight_decay) * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= np.float32(cfg.learning_rate) * update.astype(np.float32)


class EarlyStopping:
    """Stop once the loss improved by less than threshold_pct% for
    `patience` consecutive epochs."""

    def __init__(self, threshold_pct, patience):
        self.threshold = threshold_pct / 100.0
        self.patience = patience
        self.prev = None
        self.streak = 0

    def update(self, loss):
        if self.prev is not None:
            improvement = (self.prev - loss) / self.prev if self.prev > 0 else 0.0
            if improvement < self.threshold:
                self.streak += 1
            else:
                self.streak = 0
        self.prev = loss
        return self.streak >= self.patience


# ---------------------------------------------------------------------------
# samples


def load_samples(manifest, split):
    """(input, target) frame pairs from non-overlapping 2T windows per clip."""
    t = manifest.input_len
    k = manifest.horizon
    samples = []
    for idx in manifest.split_indices(split):
        frames = load_spt1(manifest.clip_paths[idx])
        span = t + k
        for start in range(0, frames.shape[0] - span + 1, span):
            samples.append((frames[start:start + t],
                            frames[start + t:start + span]))
    if not samples:
        raise ConfigError(f"split {split!r} yields no training samples")
    return samples


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _restore(model, snapshot):
    for name, p in model.named_parameters():
        p.data = snapshot[name].copy()
        p.zero_grad()


def _run_epochs(model, target_fn, train_samples, val_samples, cfg: TrainConfig):
    """Shared loop: forward, MSE, AdamW, early stopping, best-val snapshot."""
    optimizer = AdamW(model.named_parameters(), cfg)
    stopper = EarlyStopping(cfg.stop_threshold_pct, cfg.patience)
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        losses = []
        for at in range(0, len(train_samples), cfg.batch_size):
            batch = train_samples[at:at + cfg.batch_size]
            optimizer.zero_grad()
            for inp, tgt in batch:
                loss = mse_loss(model.forward(inp), target_fn(tgt))
                loss.backward()
                losses.append(loss.item())
            optimizer.step(grad_scale=1.0 / len(batch))
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, target_fn, val_samples) if val_samples else train_loss
        log.epochs.append({"epoch": epoch, "loss": train_loss,
                           "val_loss": val_loss,
                           "seconds": time.perf_counter() - started})
        if val_loss < log.best_val:
            log.best_val = val_loss
            log.best_epoch = epoch
            log.best_params = _snapshot(model)
        if stopper.update(train_loss):
            log.stop_reason = (f"loss improved < {cfg.stop_threshold_pct}% for "
                               f"{cfg.patience} consecutive epochs")
            break
    if not log.stop_reason:
        log.stop_reason = f"epoch budget {cfg.epochs} reached"
    if log.best_params is not None:
        _restore(model, log.best_params)
    return log


def evaluate_loss(model, target_fn, samples):
    vals = [mse_loss(model.forward(inp), target_fn(tgt)).item()
            for inp, tgt in samples]
    return float(np.mean(vals))


def train_stb(model: SpectrogramPredictor, manifest, cfg: TrainConfig):
    """Fit the spectrogram forecaster on the manifest's train split."""
    train_samples = load_samples(manifest, "train")
    val_samples = load_samples(manifest, "val")
    return _run_epochs(model, lambda tgt: Tensor(tgt), train_samples, val_samples, cfg)


def train_sor(model: OccupancyPredictor, manifest, cfg: TrainConfig,
              label_cfg: SorLabelConfig = None):
    """Fit the occupancy forecaster against labeled future windows."""
    label_cfg = label_cfg or default_config_for(manifest.height, manifest.width)
    train_samples = load_samples(manifest, "train")
    val_samples = load_samples(manifest, "val")

    def target_fn(tgt):
        return Tensor(label_clip(tgt, label_cfg).astype(np.float32))

    return _run_epochs(model, target_fn, train_samples, val_samples, cfg)


def transfer_finetune(checkpoint_path, manifest, cfg: TrainConfig,
                      freeze_encoder=False, label_cfg=None):
    """Load a pretrained model and fine-tune every parameter on the target.

    Returns (model, TrainLog). With freeze_encoder only the task head moves.
    """
    model = load_checkpoint(checkpoint_path)
    if (model.cfg.input_t != manifest.input_len
            or model.cfg.input_h != manifest.height
            or model.cfg.input_w != manifest.width
            or model.cfg.channels_in != manifest.channels):
        from .errors import CheckpointError

        raise CheckpointError(
            f"checkpoint input {(model.cfg.input_t, model.cfg.input_h, model.cfg.input_w, model.cfg.channels_in)} "
            f"does not match manifest {(manifest.input_len, manifest.height, manifest.width, manifest.channels)}")
    if freeze_encoder:
        for _, p in model.encoder.named_tensors():
            p.requires_grad = False
            p.grad = None
    if isinstance(model, SpectrogramPredictor):
        log = train_stb(model, manifest, cfg)
    else:
        log = train_sor(model, manifest, cfg, label_cfg)
    return model, log


# ---------------------------------------------------------------------------
# domain distance


def encoder_features(model, samples):
    """Mean-pooled deepest-stage encoder features, one vector per sample."""
    feats = []
    for inp, _ in samples:
        _, _, s3 = model.encode(inp)
        feats.append(s3.data.reshape(-1, s3.shape[-1]).mean(axis=0))
    return np.stack(feats).astype(np.float64)


def mmd(features_src, features_tgt):
    """Squared maximum mean discrepancy, Gaussian kernel.

    Plain (biased) mean-embedding estimator; kernel bandwidth is the median
    pairwise distance over the pooled sample set.
    """
    x = np.asarray(features_src, dtype=np.float64)
    y = np.asarray(features_tgt, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise DataError("mmd needs nonempty feature sets")
    if x.shape[1] != y.shape[1]:
        raise DataError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    pooled = np.concatenate([x, y], axis=0)
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    tri = sq[np.triu_indices(len(pooled), k=1)]
    bandwidth = float(np.sqrt(np.median(tri))) if tri.size else 1.0
    if bandwidth <= 0:
        bandwidth = 1.0
    gamma = 1.0 / (2.0 * bandwidth ** 2)

    def kmean(a, b):
        d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        vals = np.exp(-gamma * d)
        # sort before summing: identical value multisets (e.g. the transposed
        # cross-kernel under argument swap) then sum to identical floats
        return float(np.sort(vals, axis=None).sum() / vals.size)

    return kmean(x, x) + kmean(y, y) - 2.0 * kmean(x, y)
