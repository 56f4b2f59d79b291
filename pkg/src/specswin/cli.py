"""Command-line surface: ingest, train, predict, evaluate, transfer, flops,
sor-label.

Every run takes a flat key=value config file plus --set overrides, rejects
unknown keys, and writes the fully resolved configuration next to its
outputs, so any run is reproducible from its output directory alone. Exit
codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import swin3d as sw
from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     SpecswinError)
from .fileio import load_spt1, read_kv, save_ppm, save_spt1, write_csv, write_kv
from .ingest import (DatasetManifest, StftConfig, ingest_records, load_iq_file,
                     split_sizes, synth_dataset)
from .metrics import (compare_channel_modes, compare_sor_paths,
                      framewise_report, sor_accuracy, write_channel_compare_csv,
                      write_framewise_csv)
from .models import (ModelConfig, OccupancyPredictor, SpectrogramPredictor,
                     load_checkpoint, save_checkpoint)
from .occupancy import SorLabelConfig, default_config_for, label_clip, label_clip_stats, write_labels_csv
from .training import (TrainConfig, load_samples, train_sor, train_stb,
                       transfer_finetune)

MODEL_KEYS = {
    "model.channels": "96",
    "model.enc_pairs": "2,4,2",
    "model.enc_heads": "4,8,16",
    "model.bottleneck_pairs": "2",
    "model.dec_pairs": "2,4,2",
    "model.dec_heads": "16,8,4",
    "model.patch": "2,4,4",
    "model.window": "2,7,7",
    "model.sor_hidden": "256",
}

MODEL_MICRO = {
    "model.channels": "8",
    "model.enc_pairs": "1,1,1",
    "model.enc_heads": "2,2,2",
    "model.bottleneck_pairs": "1",
    "model.dec_pairs": "1,1,1",
    "model.dec_heads": "2,2,2",
    "model.patch": "2,2,2",
    "model.window": "2,2,2",
    "model.sor_hidden": "64",
}

TRAIN_KEYS = {
    "train.learning_rate": "0.001",
    "train.epochs": "20",
    "train.batch_size": "1",
    "train.stop_threshold_pct": "0.01",
    "train.patience": "4",
    "train.seed": "0",
    "train.weight_decay": "0.01",
}

INGEST_KEYS = {
    "ingest.scenario": "fm_like",
    "ingest.seed": "0",
    "ingest.layout_seed": "",
    "ingest.clips": "12",
    "ingest.frames": "4",
    "ingest.height": "64",
    "ingest.width": "64",
    "ingest.channels": "3",
    "ingest.ratio": "4:1:1",
    "ingest.patch_hw": "4,4",
    "ingest.stft_window": "256",
    "ingest.stft_hop": "128",
    "ingest.stft_fft": "256",
    "ingest.downsample": "4",
}

EVAL_KEYS = {
    "eval.split": "test",
    "eval.threshold": "0.05",  # rate-error threshold; undocumented upstream, default 0.05
}

SOR_KEYS = {
    "sor.block_size": "",
    "sor.margin": "0.02",
}


class RunConfig:
    """Flat key=value settings with file + override layering."""

    def __init__(self, defaults):
        self.values = dict(defaults)

    def apply_file(self, path):
        for key, value in read_kv(path).items():
            self.set(key, value)

    def apply_overrides(self, pairs):
        for pair in pairs or ():
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value.strip())

    def set(self, key, value):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        return int(self.values[key])

    def get_float(self, key):
        return float(self.values[key])

    def get_ints(self, key):
        return tuple(int(v) for v in self.values[key].split(","))

    def echo(self, out_dir, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        merged = dict(self.values)
        merged.update(extra or {})
        write_kv(os.path.join(out_dir, "run_config.txt"), merged)


def _layer(defaults, args, extra=None):
    cfg = RunConfig({**defaults, **(extra or {})})
    if getattr(args, "config", None):
        cfg.apply_file(args.config)
    cfg.apply_overrides(getattr(args, "set", None))
    return cfg


def _model_config(cfg: RunConfig, manifest: DatasetManifest):
    return ModelConfig(
        channels=cfg.get_int("model.channels"),
        enc_pairs=cfg.get_ints("model.enc_pairs"),
        enc_heads=cfg.get_ints("model.enc_heads"),
        bottleneck_pairs=cfg.get_int("model.bottleneck_pairs"),
        dec_pairs=cfg.get_ints("model.dec_pairs"),
        dec_heads=cfg.get_ints("model.dec_heads"),
        patch=cfg.get_ints("model.patch"),
        window=cfg.get_ints("model.window"),
        input_t=manifest.input_len,
        input_h=manifest.height,
        input_w=manifest.width,
        channels_in=manifest.channels,
        sor_hidden=cfg.get_int("model.sor_hidden"),
    )


def _train_config(cfg: RunConfig):
    return TrainConfig(
        learning_rate=cfg.get_float("train.learning_rate"),
        epochs=cfg.get_int("train.epochs"),
        batch_size=cfg.get_int("train.batch_size"),
        stop_threshold_pct=cfg.get_float("train.stop_threshold_pct"),
        patience=cfg.get_int("train.patience"),
        seed=cfg.get_int("train.seed"),
        weight_decay=cfg.get_float("train.weight_decay"),
    )


def _label_config(cfg: RunConfig, manifest):
    block = cfg.get("sor.block_size")
    if block:
        return SorLabelConfig(block_size=int(block),
                              margin=cfg.get_float("sor.margin"))
    base = default_config_for(manifest.height, manifest.width)
    return SorLabelConfig(block_size=base.block_size,
                          margin=cfg.get_float("sor.margin"))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args):
    cfg = _layer(INGEST_KEYS, args)
    if args.scenario:
        cfg.set("ingest.scenario", args.scenario)
    if args.seed is not None:
        cfg.set("ingest.seed", args.seed)
    if args.clips is not None:
        cfg.set("ingest.clips", args.clips)
    ratio = tuple(int(r) for r in cfg.get("ingest.ratio").split(":"))
    patch_hw = cfg.get_ints("ingest.patch_hw")
    common = dict(
        t_frames=cfg.get_int("ingest.frames"), height=cfg.get_int("ingest.height"),
        width=cfg.get_int("ingest.width"), channels=cfg.get_int("ingest.channels"),
        patch_hw=patch_hw, ratio=ratio)
    if args.files:
        stft_cfg = StftConfig(
            window_length=cfg.get_int("ingest.stft_window"),
            hop_length=cfg.get_int("ingest.stft_hop"),
            fft_length=cfg.get_int("ingest.stft_fft"),
            downsample_factor=cfg.get_int("ingest.downsample"))
        records = [load_iq_file(path) for path in args.files]
        manifest = ingest_records(records, stft_cfg, args.out, **common)
    else:
        layout = cfg.get("ingest.layout_seed")
        manifest = synth_dataset(
            args.out, cfg.get_int("ingest.seed"), cfg.get("ingest.scenario"),
            cfg.get_int("ingest.clips"),
            layout_seed=int(layout) if layout else None, **common)
    cfg.echo(args.out)
    tr, va, te = (manifest.split_train, manifest.split_val, manifest.split_test)
    print(f"ingested {len(manifest.clip_paths)} clips "
          f"(train {tr[1] - tr[0]} / val {va[1] - va[0]} / test {te[1] - te[0]}) "
          f"-> {args.out}")
    return 0


def cmd_train(args):
    cfg = _layer({**MODEL_KEYS, **TRAIN_KEYS}, args,
                 extra=None)
    if args.preset == "micro":
        for key, value in MODEL_MICRO.items():
            cfg.set(key, value)
        cfg.apply_overrides(args.set)  # --set wins over the preset
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    if args.epochs is not None:
        cfg.set("train.epochs", args.epochs)
    manifest = DatasetManifest.load(args.manifest)
    model_cfg = _model_config(cfg, manifest)
    train_cfg = _train_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    if args.task == "3d":
        model = SpectrogramPredictor(model_cfg, seed=train_cfg.seed)
        log = train_stb(model, manifest, train_cfg)
    else:
        model = OccupancyPredictor(model_cfg, seed=train_cfg.seed)
        label_cfg = default_config_for(manifest.height, manifest.width)
        log = train_sor(model, manifest, train_cfg, label_cfg)
        _write_sor_targets(os.path.join(args.out, "targets.csv"), manifest, label_cfg)
    save_checkpoint(model, os.path.join(args.out, "checkpoint"))
    log.to_csv(os.path.join(args.out, "trainlog.csv"))
    cfg.echo(args.out, extra={"task": args.task, "manifest": args.manifest,
                              "model.param_count": model.num_params()})
    print(f"trained task={args.task} for {len(log.epochs)} epochs "
          f"(best val {log.best_val:.6f} at epoch {log.best_epoch}); "
          f"stop: {log.stop_reason}")
    return 0


def _write_sor_targets(path, manifest, label_cfg):
    rows = []
    t = manifest.input_len
    for idx in (manifest.split_indices("train") + manifest.split_indices("val")):
        frames = load_spt1(manifest.clip_paths[idx])
        labels = label_clip(frames[t:], label_cfg)
        for k, val in enumerate(labels):
            rows.append((idx, k, float(val)))
    write_csv(path, ("clip_index", "target_frame", "sor"), rows)


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    samples = load_samples(manifest, args.split)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"sample index {args.index} outside split of {len(samples)}")
    inp, _ = samples[args.index]
    out = model.forward(inp)
    os.makedirs(args.out, exist_ok=True)
    if isinstance(model, SpectrogramPredictor):
        save_spt1(os.path.join(args.out, "prediction.spt1"), out.data)
        for k in range(out.shape[0]):
            save_ppm(os.path.join(args.out, f"frame_{k:03d}.ppm"), out.data[k])
        print(f"wrote prediction.spt1 and {out.shape[0]} PPM frames -> {args.out}")
    else:
        save_spt1(os.path.join(args.out, "prediction.spt1"), out.data)
        write_csv(os.path.join(args.out, "prediction.csv"), ("k", "sor"),
                  [(k, float(v)) for k, v in enumerate(out.data)])
        print(f"wrote occupancy prediction ({out.shape[0]} frames) -> {args.out}")
    RunConfig({}).echo(args.out, extra={
        "checkpoint": args.checkpoint, "manifest": args.manifest,
        "split": args.split, "index": args.index})
    return 0


def cmd_evaluate(args):
    cfg = _layer({**EVAL_KEYS, **SOR_KEYS}, args)
    if args.threshold is not None:
        cfg.set("eval.threshold", args.threshold)
    manifest = DatasetManifest.load(args.manifest)
    threshold = cfg.get_float("eval.threshold")
    split = cfg.get("eval.split")
    os.makedirs(args.out, exist_ok=True)
    compare = {"appendixA": "channels", "appendixB": "sor-path"}.get(
        args.compare, args.compare)

    if compare == "channels":
        if not (args.checkpoint_b and args.manifest_b):
            raise ConfigError("--compare channels needs --checkpoint-b/--manifest-b "
                              "(the grayscale-rendering run)")
        rows_a = framewise_report(load_checkpoint(args.checkpoint), manifest, split)
        rows_b = framewise_report(load_checkpoint(args.checkpoint_b),
                                  DatasetManifest.load(args.manifest_b), split)
        rows = compare_channel_modes(rows_a, rows_b)
        write_channel_compare_csv(os.path.join(args.out, "channel_compare.csv"), rows)
        mse_a = float(np.mean([r[1] for r in rows]))
        mse_b = float(np.mean([r[2] for r in rows]))
        print(f"rendering comparison: rgb mse {mse_a:.6f} vs gray mse {mse_b:.6f} "
              f"(difference {mse_b - mse_a:+.6f})")
    elif compare == "sor-path":
        if not args.sor_checkpoint:
            raise ConfigError("--compare sor-path needs --sor-checkpoint")
        stb = load_checkpoint(args.checkpoint)
        sor = load_checkpoint(args.sor_checkpoint)
        if not isinstance(stb, SpectrogramPredictor) or not isinstance(sor, OccupancyPredictor):
            raise CheckpointError("--compare sor-path expects --checkpoint=spectrogram "
                                  "model and --sor-checkpoint=occupancy model")
        direct, indirect = compare_sor_paths(sor, stb, manifest, threshold,
                                             _label_config(cfg, manifest))
        write_csv(os.path.join(args.out, "sor_path_compare.csv"),
                  ("path", "threshold", "horizon", "n_series", "correct", "accuracy"),
                  [("direct", direct.threshold, direct.horizon, direct.n_series,
                    direct.correct, direct.accuracy),
                   ("from_predicted", indirect.threshold, indirect.horizon,
                    indirect.n_series, indirect.correct, indirect.accuracy)])
        print(f"occupancy accuracy (threshold {threshold}): direct {direct.accuracy:.6f}, "
              f"from predicted frames {indirect.accuracy:.6f}, "
              f"difference {direct.accuracy - indirect.accuracy:+.6f}")
    else:
        model = load_checkpoint(args.checkpoint)
        if isinstance(model, SpectrogramPredictor):
            rows = framewise_report(model, manifest, split)
            write_framewise_csv(os.path.join(args.out, "framewise.csv"), rows)
            print(f"frame-wise metrics over {split}: "
                  f"mse {np.mean([r[1] for r in rows]):.6f} "
                  f"psnr {np.mean([r[2] for r in rows]):.6f} "
                  f"ssim {np.mean([r[3] for r in rows]):.6f}")
        else:
            label_cfg = _label_config(cfg, manifest)
            samples = load_samples(manifest, split)
            preds = [model.forward(inp).data.astype(np.float64) for inp, _ in samples]
            trues = [label_clip(tgt, label_cfg) for _, tgt in samples]
            rep = sor_accuracy(preds, trues, threshold)
            write_csv(os.path.join(args.out, "sor_accuracy.csv"),
                      ("threshold", "horizon", "n_series", "correct", "accuracy"),
                      [(rep.threshold, rep.horizon, rep.n_series, rep.correct,
                        rep.accuracy)])
            print(f"occupancy accuracy over {split}: {rep.accuracy:.6f} "
                  f"({rep.correct}/{rep.horizon * rep.n_series} frames, "
                  f"threshold {threshold})")
    cfg.echo(args.out, extra={"checkpoint": args.checkpoint,
                              "manifest": args.manifest, "compare": compare})
    return 0


def cmd_transfer(args):
    cfg = _layer(TRAIN_KEYS, args)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    if args.epochs is not None:
        cfg.set("train.epochs", args.epochs)
    manifest = DatasetManifest.load(args.manifest)
    train_cfg = _train_config(cfg)
    model, log = transfer_finetune(args.checkpoint, manifest, train_cfg,
                                   freeze_encoder=args.freeze_encoder)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "checkpoint"))
    log.to_csv(os.path.join(args.out, "trainlog.csv"))
    cfg.echo(args.out, extra={"source_checkpoint": args.checkpoint,
                              "manifest": args.manifest,
                              "freeze_encoder": args.freeze_encoder})
    print(f"fine-tuned for {len(log.epochs)} epochs "
          f"(best val {log.best_val:.6f}); stop: {log.stop_reason}")
    return 0


def cmd_flops(args):
    cfg = _layer(MODEL_KEYS, args, extra={
        "input.t": "8", "input.h": "64", "input.w": "64"})
    if args.preset == "micro":
        for key, value in MODEL_MICRO.items():
            cfg.set(key, value)
        cfg.apply_overrides(args.set)
    c = cfg.get_int("model.channels")
    tp, hp, wp = cfg.get_ints("model.patch")
    wpw, wm, _ = cfg.get_ints("model.window")
    t = cfg.get_int("input.t")
    h = cfg.get_int("input.h")
    w = cfg.get_int("input.w")
    rows = []
    for stage, factor, width in (("enc1", 1, c), ("enc2", 2, 2 * c),
                                 ("enc3", 4, 4 * c)):
        p_tok = t // tp
        h_tok = h // hp // factor
        w_tok = w // wp // factor
        rows.append((stage, p_tok, h_tok, w_tok, width, wpw, wm,
                     sw.flops_msa(p_tok, h_tok, w_tok, width),
                     sw.flops_wmsa(p_tok, h_tok, w_tok, width, wpw, wm)))
    header = ("stage", "p", "h", "w", "channels", "window_p", "window_m",
              "global_macs", "windowed_macs")
    print(",".join(header))
    for row in rows:
        print(",".join(str(v) for v in row))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "flops.csv"), header, rows)
        cfg.echo(args.out)
    return 0


def cmd_sor_label(args):
    cfg = _layer(SOR_KEYS, args)
    manifest = DatasetManifest.load(args.manifest)
    label_cfg = _label_config(cfg, manifest)
    per_clip = []
    for idx, path in enumerate(manifest.clip_paths):
        frames = load_spt1(path)
        per_clip.append((idx, label_clip_stats(frames, label_cfg)))
    os.makedirs(args.out, exist_ok=True)
    write_labels_csv(os.path.join(args.out, "labels.csv"), per_clip)
    cfg.echo(args.out, extra={"manifest": args.manifest,
                              "sor.block_size_used": label_cfg.block_size})
    n = sum(len(stats) for _, stats in per_clip)
    print(f"labeled {n} frames across {len(per_clip)} clips -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="specswin",
        description="Spectrogram-series and occupancy-rate forecasting with "
                    "3D shifted-window attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")

    p = sub.add_parser("ingest", help="build a dataset (synthetic or from I/Q files)")
    p.add_argument("--synth", dest="scenario",
                   choices=("fm_like", "lte_like", "bursty"))
    p.add_argument("--files", nargs="+", help="raw I/Q captures with .hdr sidecars")
    p.add_argument("--seed", type=int)
    p.add_argument("--clips", type=int)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train one task network")
    p.add_argument("--task", choices=("3d", "sor"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("default", "micro"), default="default")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint on one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics / accuracy over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--compare", default="none",
                   choices=("none", "channels", "sor-path", "appendixA", "appendixB"),
                   help="channels: RGB vs grayscale runs; sor-path: dedicated "
                        "head vs labeling predicted frames (appendixA/appendixB "
                        "are aliases)")
    p.add_argument("--checkpoint-b", help="second model for --compare channels")
    p.add_argument("--manifest-b", help="second manifest for --compare channels")
    p.add_argument("--sor-checkpoint", help="occupancy model for --compare sor-path")
    common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("transfer", help="fine-tune a checkpoint on a new dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    common(p)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("flops", help="attention cost table (global vs windowed)")
    p.add_argument("--preset", choices=("default", "micro"), default="default")
    p.add_argument("--out")
    common(p)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("sor-label", help="emit occupancy labels for a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_sor_label)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
