"""Batch command-line surface for the registration pipeline.

Exit codes: 0 success, 2 usage error, 3 bad configuration, 4 missing file or
checkpoint, 5 data/format error, 1 anything else. Every command writes a
manifest.json (atomically, before and after the run) into its output
directory so a run can be reproduced from config + seed + input paths.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .baseline import PyramidConfig, export_field, import_external_field, lucas_kanade_flow
from .core import Image2D, LabelMask, normalize, resize, warp_intensity, warp_mask
from .data import (PhantomParams, export_case, load_dataset, make_splits,
                   phantom_dataset, read_mhd, write_mhd)
from .errors import (CheckpointError, ConfigError, DataError, EchoRegError,
                     FieldFormatError, LabelError, UndefinedMetricError)
from .metrics import evaluate_case, metrics_row, write_metrics_csv
from .networks import deform_forward, model_from_checkpoint, save_checkpoint
from .train import (TrainConfig, collect_masks, ed_es_pairs, multiscale_train,
                    pretrain_vae, resolve_mode, run_ablation, temporal_pairs,
                    train_registration, write_history)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Manifest:
    """Run record written before and after each command."""

    def __init__(self, out_dir, command, argv, seed, config_hash):
        self.path = Path(out_dir) / "manifest.json"
        self.payload = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config_hash": config_hash,
            "version": __version__,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        self._flush()

    def _flush(self):
        _atomic_write(self.path, json.dumps(self.payload, indent=2))

    def finish(self, status="ok", outputs=()):
        self.payload["status"] = status
        self.payload["outputs"] = [str(p) for p in outputs]
        self.payload["finished"] = datetime.now(timezone.utc).isoformat()
        self._flush()


def _hash_args(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = TrainConfig.from_json(path.read_text())
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "scales", None):
        cfg = TrainConfig(**{**asdict(cfg), "scales": _parse_scales(args.scales)})
    if getattr(args, "epochs", None):
        cfg.epochs = args.epochs
    return cfg


def _parse_scales(text):
    try:
        return tuple(int(s) for s in str(text).split(","))
    except ValueError:
        raise ConfigError(f"bad --scales value {text!r}; expected e.g. 32,64,128")


def _load_image(path) -> Image2D:
    arr, spacing = read_mhd(path)
    return normalize(Image2D(arr.astype(np.float32), spacing))


def _load_mask(path) -> LabelMask:
    arr, spacing = read_mhd(path)
    return LabelMask(arr.astype(np.int64), spacing)


def _require_checkpoint(path):
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args, argv):
    params = PhantomParams(size=args.size, frames=args.frames)
    manifest = Manifest(args.out, "phantom", argv, args.seed,
                        _hash_args({"params": asdict(params), "cases": args.cases,
                                    "seed": args.seed}))
    cases_dir = Path(args.out) / "cases"
    cases = phantom_dataset(args.cases, params, seed=args.seed)
    for case in cases:
        export_case(case, cases_dir)
    manifest.finish(outputs=[cases_dir])
    print(f"wrote {len(cases)} phantom cases to {cases_dir}")
    return EXIT_OK


def cmd_train_vae(args, argv):
    cfg = _load_config(args)
    if args.kl_weight is not None:
        cfg.kl_weight = args.kl_weight
    manifest = Manifest(args.out, "train-vae", argv, cfg.seed, _hash_args(asdict(cfg)))
    cases = load_dataset(args.data)
    train_cases, val_cases, _ = make_splits(cases, (0.85, 0.15, 0.0), seed=cfg.seed)
    vae, history = pretrain_vae(collect_masks(train_cases), cfg,
                                val_masks=collect_masks(val_cases))
    out = Path(args.out)
    ckpt = out / "vae.ckpt"
    save_checkpoint(ckpt, "vae", vae, extra={"seed": cfg.seed})
    log = out / "vae_log.csv"
    write_history(log, history)
    manifest.finish(outputs=[ckpt, log])
    final = history[-1]
    print(f"vae trained: loss {final['vae_loss']:.4f} "
          f"round-trip dice {final.get('val_round_trip_dice', float('nan')):.4f}")
    return EXIT_OK


def _load_vae(args):
    if args.vae:
        _require_checkpoint(args.vae)
        vae, _ = model_from_checkpoint(args.vae, "vae")
        return vae
    return None


def cmd_train(args, argv):
    cfg = _load_config(args)
    mode = resolve_mode(args.mode)
    manifest = Manifest(args.out, "train", argv, cfg.seed,
                        _hash_args({**asdict(cfg), "mode": mode}))
    cases = load_dataset(args.data)
    train_cases, val_cases, _ = make_splits(cases, (0.8, 0.2, 0.0), seed=cfg.seed)
    pairs = temporal_pairs(train_cases) if args.pairs == "temporal" else ed_es_pairs(train_cases)
    val_pairs = ed_es_pairs(val_cases)
    vae = _load_vae(args)
    if mode in ("ac", "ddc-ac") and vae is None:
        raise ConfigError(f"mode {mode!r} needs --vae CHECKPOINT")
    run_id = args.run_id or f"{mode}-seed{cfg.seed}"
    if len(cfg.scales) > 1:
        result = multiscale_train(pairs, cfg, mode, vae=vae, val_pairs=val_pairs,
                                  checkpoint_dir=args.out, run_id=run_id)
    else:
        result = train_registration(pairs, cfg, mode, vae=vae, val_pairs=val_pairs,
                                    checkpoint_dir=args.out, run_id=run_id)
    log = Path(args.out) / f"{run_id}.log.csv"
    write_history(log, result.history)
    final_ckpt = Path(args.out) / run_id / "final.ckpt"
    save_checkpoint(final_ckpt, "deform", result.deform,
                    extra={"mode": mode, "scale": cfg.scales[-1], "seed": cfg.seed})
    manifest.finish(outputs=[log, final_ckpt])
    last = result.history[-1]
    print(f"trained {mode}: final val dsc {last.get('val_dsc', float('nan')):.4f} "
          f"-> {final_ckpt}")
    return EXIT_OK


def cmd_register(args, argv):
    _require_checkpoint(args.checkpoint)
    deform, record = model_from_checkpoint(args.checkpoint, "deform")
    manifest = Manifest(args.out, "register", argv, args.seed,
                        _hash_args({"checkpoint": str(args.checkpoint)}))
    fixed = _load_image(args.fixed)
    moving = _load_image(args.moving)
    scale = record["extra"].get("scale")
    if scale:
        fixed, moving = resize(fixed, (scale, scale)), resize(moving, (scale, scale))
    flow = deform_forward(deform, fixed, moving)
    out = Path(args.out)
    outputs = [out / "field.ddf", out / "warped.mhd"]
    export_field(outputs[0], flow)
    warped = warp_intensity(moving, flow)
    write_mhd(outputs[1], warped.pixels.astype(np.float32), warped.spacing)
    if args.moving_mask:
        mask = _load_mask(args.moving_mask)
        if scale:
            mask = resize(mask, (scale, scale))
        warped_mask = warp_mask(mask, flow)
        outputs.append(out / "warped_gt.mhd")
        write_mhd(outputs[2], warped_mask.labels.astype(np.uint8), warped_mask.spacing)
    manifest.finish(outputs=outputs)
    print(f"registered at scale {scale or 'native'}; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args, argv):
    out_path = Path(args.out)
    manifest = Manifest(out_path.parent if out_path.suffix else out_path,
                        "evaluate", argv, args.seed, _hash_args({"fixed": str(args.fixed)}))
    fixed = _load_image(args.fixed)
    fixed_mask = _load_mask(args.fixed_mask)
    moving = _load_image(args.moving)
    moving_mask = _load_mask(args.moving_mask)
    if args.field:
        flow = import_external_field(args.field)
        if flow.shape != fixed.shape:  # field produced at a training scale
            fixed, fixed_mask = resize(fixed, flow.shape), resize(fixed_mask, flow.shape)
            moving, moving_mask = resize(moving, flow.shape), resize(moving_mask, flow.shape)
        warped, warped_mask = warp_intensity(moving, flow), warp_mask(moving_mask, flow)
    else:
        warped, warped_mask = moving, moving_mask
    cm = evaluate_case(fixed, fixed_mask, warped, warped_mask)
    row = metrics_row(args.case_id, args.frame_pair, cm)
    csv_path = out_path if out_path.suffix else out_path / "metrics.csv"
    write_metrics_csv(csv_path, [row])
    manifest.finish(outputs=[csv_path])
    print(f"dsc_mean={cm.dsc_mean:.4f} mse={cm.mse:.6f} -> {csv_path}")
    return EXIT_OK


def _lv_count(mask: LabelMask) -> int:
    return int((mask.labels == 2).sum())


def cmd_ef(args, argv):
    from .metrics import ef_estimate

    manifest = Manifest(args.out, "ef", argv, args.seed, _hash_args({"data": str(args.data)}))
    cases = load_dataset(args.data)
    deform = None
    scale = None
    if args.checkpoint:
        _require_checkpoint(args.checkpoint)
        deform, record = model_from_checkpoint(args.checkpoint, "deform")
        scale = record["extra"].get("scale")
    rows, truth, pred = [], [], []
    for case in cases:
        if case.edv_ml is None or case.esv_ml is None:
            continue
        (fi, fm), (mi_, mm) = case.ed(), case.es()
        if scale:
            fi, fm = resize(fi, (scale, scale)), resize(fm, (scale, scale))
            mi_, mm = resize(mi_, (scale, scale)), resize(mm, (scale, scale))
        ed_true, es_true = _lv_count(fm), _lv_count(mm)
        if deform is None:
            ed_pred, es_pred = ed_true, es_true
        else:
            # predicted ED anatomy: ES mask warped onto the ED frame, and the
            # reverse registration for the predicted ES anatomy
            ed_pred = _lv_count(warp_mask(mm, deform_forward(deform, fi, mi_)))
            es_pred = _lv_count(warp_mask(fm, deform_forward(deform, mi_, fi)))
        est = ef_estimate(case.edv_ml, case.esv_ml, ed_true, es_true, ed_pred, es_pred)
        ef_true = case.ef_true if case.ef_true is not None else 1.0 - case.esv_ml / case.edv_ml
        rows.append({"case_id": case.case_id, "edv_true_ml": case.edv_ml,
                     "esv_true_ml": case.esv_ml, "ef_true": ef_true,
                     "edv_pred_ml": est.edv_ml, "esv_pred_ml": est.esv_ml,
                     "ef_pred": est.ef, "negative": int(est.negative)})
        truth.append(ef_true)
        pred.append(est.ef)
    if len(rows) < 2:
        raise DataError("EF correlation needs at least two cases with known volumes")
    out = Path(args.out)
    table = out / "ef.csv"
    import csv as _csv
    with open(table, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    r = float(np.corrcoef(truth, pred)[0, 1])
    summary = out / "ef_summary.json"
    summary.write_text(json.dumps({"pearson_r": r, "cases": len(rows),
                                   "negative_efs": int(sum(x["negative"] for x in rows))}, indent=2))
    manifest.finish(outputs=[table, summary])
    print(f"pearson_r={r:.4f} over {len(rows)} cases -> {table}")
    return EXIT_OK


def cmd_baseline_of(args, argv):
    manifest = Manifest(args.out, "baseline-of", argv, args.seed,
                        _hash_args({"fixed": str(args.fixed)}))
    cfg = PyramidConfig(levels=args.levels, iterations=args.iterations,
                        window_radius=args.window_radius, downscale=args.downscale)
    fixed = _load_image(args.fixed)
    moving = _load_image(args.moving)
    flow = lucas_kanade_flow(fixed, moving, cfg)
    out = Path(args.out)
    outputs = [out / "field.ddf", out / "warped.mhd"]
    export_field(outputs[0], flow)
    warped = warp_intensity(moving, flow)
    write_mhd(outputs[1], warped.pixels.astype(np.float32), warped.spacing)
    if args.moving_mask:
        warped_mask = warp_mask(_load_mask(args.moving_mask), flow)
        outputs.append(out / "warped_gt.mhd")
        write_mhd(outputs[2], warped_mask.labels.astype(np.uint8), warped_mask.spacing)
    manifest.finish(outputs=outputs)
    print(f"optical-flow field -> {outputs[0]}")
    return EXIT_OK


def cmd_ablation(args, argv):
    cfg = _load_config(args)
    manifest = Manifest(args.out, "ablation", argv, cfg.seed, _hash_args(asdict(cfg)))
    cases = load_dataset(args.data)
    train_cases, val_cases, _ = make_splits(cases, (0.8, 0.2, 0.0), seed=cfg.seed)
    vae = _load_vae(args)
    if vae is None:
        vae, _ = pretrain_vae(collect_masks(train_cases), cfg)
    rows = run_ablation(temporal_pairs(train_cases), ed_es_pairs(val_cases), cfg, vae=vae)
    table = Path(args.out) / "ablation.csv"
    write_history(table, rows)
    manifest.finish(outputs=[table])
    for row in rows:
        print(f"{row['configuration']:>18}: dsc {row['dsc']:.4f} hd {row['hd_mm']:.3f} "
              f"tu_sqrt {row['tu_sqrt_mm']:.3f} mse {row['mse']:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echoreg",
                                     description="echo image registration pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    common(p)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--frames", type=int, default=4)

    p = sub.add_parser("train-vae", help="pretrain the shape autoencoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--kl-weight", type=float, default=None)

    p = sub.add_parser("train", help="train a registration model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="ddc-ac",
                   help="van | vm | ac | ddc | ddc-ac (Table-style aliases accepted)")
    p.add_argument("--scales", help="e.g. 32,64,128 (multi-scale when more than one)")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--vae", help="pretrained VAE checkpoint (ac / ddc-ac modes)")
    p.add_argument("--pairs", choices=("ed-es", "temporal"), default="temporal")
    p.add_argument("--run-id")

    p = sub.add_parser("register", help="register one image pair with a checkpoint")
    common(p)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--moving-mask")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("evaluate", help="score a warped pair into a metrics CSV")
    common(p)
    p.add_argument("--fixed", required=True)
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--moving-mask", required=True)
    p.add_argument("--field", help="DDF1 field; omitted = no-registration row")
    p.add_argument("--case-id", default="case")
    p.add_argument("--frame-pair", default="ES->ED")

    p = sub.add_parser("ef", help="per-case ejection-fraction table + correlation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="deform checkpoint; omitted = ground-truth masks")

    p = sub.add_parser("baseline-of", help="pyramidal Lucas-Kanade baseline")
    common(p)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--moving-mask")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--window-radius", type=int, default=7)
    p.add_argument("--downscale", type=float, default=2.0)

    p = sub.add_parser("ablation", help="emit the model-configuration comparison table")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", help="e.g. 32,64")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--vae", help="pretrained VAE checkpoint (pretrained here when omitted)")

    return parser


_COMMANDS = {
    "phantom": cmd_phantom,
    "train-vae": cmd_train_vae,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "ef": cmd_ef,
    "baseline-of": cmd_baseline_of,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("ECHOREG_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, FieldFormatError, LabelError, UndefinedMetricError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EchoRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
