"""``pmf`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 check failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import evalkit as E
from . import geometry as G
from .dataio import (DataError, LabelMap, class_palette, load_dataset, synth_scene_generate,
                     write_ppm, write_scan)
from .gradcheck import mutation, op_cases, run_gradcheck
from .losses import LossConfig, confidence_map
from .network import (ConfigError, NetworkConfig, config_hash, load_checkpoint, read_checkpoint,
                      save_checkpoint)
from .train import (TrainConfig, apply_overrides, predict, project_record, read_config,
                    synthetic_dataset, train, write_config)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# shared helpers


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, config, artifacts):
    out = Path(out)
    entries = [{"path": str(Path(a).relative_to(out)), "sha256": _sha256(a)} for a in sorted(artifacts)]
    manifest = {"command": command, "config_hash": config_hash(config), "config": config,
                "artifacts": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _label_map(name, num_classes):
    if name == "semantickitti":
        return LabelMap.semantickitti()
    return LabelMap.identity(num_classes)


def _records(args, cfg):
    if getattr(args, "data", None):
        lm = _label_map(args.label_map, cfg.network.num_classes)
        if lm.num_classes != cfg.network.num_classes:
            raise ConfigError(f"label map has {lm.num_classes} classes, network expects "
                              f"{cfg.network.num_classes}")
        records = load_dataset(args.data, lm)
        if not records:
            raise DataError(f"{args.data}: no scans found")
        return records
    return synthetic_dataset(cfg, seed_offset=getattr(args, "scene_offset", 0))


def _parse_bins(text):
    try:
        edges = [math.inf if t.strip().lower() in ("inf", "infinity") else float(t) for t in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--bins: {exc}") from None
    try:
        E.check_edges(edges)
    except E.EvalError as exc:
        raise UsageError(f"--bins: {exc}") from None
    return edges


def _normalise(channel, valid):
    out = np.zeros(channel.shape)
    if valid.any():
        v = channel[valid]
        lo, hi = v.min(), v.max()
        out[valid] = (v - lo) / (hi - lo) if hi > lo else 1.0
    return out


def colorize_labels(label_image, num_classes):
    palette = class_palette(num_classes)
    img = np.zeros((3,) + label_image.shape)
    m = label_image != G.IGNORE
    img[:, m] = palette[label_image[m]].T
    return img


# --------------------------------------------------------------------------
# subcommands


def _add_projection_flags(p):
    p.add_argument("--mode", choices=("perspective", "spherical"), default=None,
                   help="projection used for the LiDAR input")
    p.add_argument("--spherical", action="store_true", help="shorthand for --mode spherical")
    p.add_argument("--fov-up", type=float, default=None)
    p.add_argument("--fov-down", type=float, default=None)


def _add_data_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset directory (velodyne/, labels/, calib/, image_2/)")
    src.add_argument("--synthetic", action="store_true", help="use generated scenes (default)")
    p.add_argument("--label-map", choices=("identity", "semantickitti"), default="identity")
    p.add_argument("--scenes", type=int, default=None, help="number of synthetic scenes")


def _overrides(args):
    ov = {}
    for flag, key in (("tau", "loss.tau"), ("gamma", "loss.gamma"), ("lam", "loss.lam"),
                      ("steps", "steps"), ("seed", "seed"), ("fov_up", "fov_up"),
                      ("fov_down", "fov_down"), ("scenes", "num_scenes"), ("batch_size", "batch_size"),
                      ("lr", "base_lr")):
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = v
    mode = "spherical" if getattr(args, "spherical", False) else getattr(args, "mode", None)
    if mode:
        ov["projection"] = mode
    if getattr(args, "no_fusion", False):
        ov["fusion"] = False
    if getattr(args, "no_pl", False):
        ov["pl"] = False
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v
    return ov


def _train_config(args, base=None):
    cfg = base or TrainConfig()
    if getattr(args, "config", None):
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise DataError(f"{args.config}: {exc.strerror}") from None
        except ValueError as exc:
            raise DataError(f"{args.config}: {exc}") from None
    try:
        return apply_overrides(cfg, _overrides(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        write_scan(out, synth_scene_generate(args.seed + i, args.points, tuple(args.size), args.classes))
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_project(args):
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _records(args, cfg)
    artifacts = []
    summary = []
    for rec in records:
        sample = project_record(rec, cfg)
        scan = sample.lidar_scan
        for k, name in enumerate(("d", "x", "y", "z", "r")):
            path = out / f"{rec.scan_id}_{name}.ppm"
            write_ppm(path, _normalise(scan.features[k], scan.valid_mask))
            artifacts.append(path)
        path = out / f"{rec.scan_id}_labels.ppm"
        write_ppm(path, colorize_labels(scan.label_image, cfg.network.num_classes))
        artifacts.append(path)
        summary.append({"scan_id": rec.scan_id, "points": len(rec.cloud),
                        "projected": int(scan.in_view.sum()), "valid_pixels": int(scan.valid_mask.sum())})
    config = {"projection": cfg.projection, "fov_up": cfg.fov_up, "fov_down": cfg.fov_down,
              "scans": summary}
    write_manifest(out, "project", config, artifacts)
    for s in summary:
        print(f"{s['scan_id']}: {s['points']} points, {s['projected']} projected, "
              f"{s['valid_pixels']} valid pixels")
    return EXIT_OK


def cmd_train(args):
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _records(args, cfg)

    def progress(row):
        if args.verbose and (row["step"] % 50 == 0 or row["step"] == cfg.steps - 1):
            print(f"step {row['step']:5d}  camera {row['camera_total']:.5f}  lidar {row['lidar_total']:.5f}",
                  file=sys.stderr)

    result = train(cfg, records, progress=progress)
    loss_csv = out / "loss.csv"
    loss_csv.write_text(result.csv_text())
    ckpt = out / "model.pmfckpt"
    save_checkpoint(ckpt, result.net, meta={"train_config": cfg.to_dict()})
    cfg_txt = out / "config.txt"
    write_config(cfg_txt, cfg)
    write_manifest(out, "train", cfg.to_dict(), [loss_csv, ckpt, cfg_txt])
    first, last = result.history[0], result.history[-1]
    print(f"camera total {first['camera_total']:.5f} -> {last['camera_total']:.5f}")
    print(f"lidar total  {first['lidar_total']:.5f} -> {last['lidar_total']:.5f}")
    return EXIT_OK


def evaluate_records(net, records, cfg, edges=E.DEFAULT_EDGES):
    """Point-level confusion over ``records`` plus per-scan confidence maps."""
    S = cfg.network.num_classes
    global_cm = E.ConfusionMatrix(S)
    preds, truths, ranges, maps = [], [], [], []
    for rec in records:
        sample = project_record(rec, cfg)
        O, O_lidar, _ = predict(net, [sample], cfg)
        pixel_pred = O_lidar[0].argmax(axis=0)
        pred = G.gather_point_predictions(pixel_pred, sample.lidar_scan)
        truth = np.where(sample.lidar_scan.in_view, rec.labels, G.IGNORE)
        pred = np.where(truth == G.IGNORE, 0, pred)
        E.accumulate_confusion(global_cm, pred, truth)
        preds.append(pred)
        truths.append(truth)
        ranges.append(rec.cloud.ranges)
        maps.append((rec.scan_id, confidence_map(O[0]), confidence_map(O_lidar[0])))
    bins = E.distance_binned_miou(np.concatenate(preds), np.concatenate(truths),
                                  np.concatenate(ranges), S, edges)
    return global_cm, bins, maps


def cmd_eval(args):
    try:
        cfg_net, _state, meta = read_checkpoint(args.checkpoint)
    except OSError as exc:
        raise DataError(f"{args.checkpoint}: {exc.strerror}") from None
    base = TrainConfig(**_restore_train_config(meta)) if meta.get("train_config") else TrainConfig(network=cfg_net)
    cfg = _train_config(args, base)
    net, _ = load_checkpoint(args.checkpoint, expected_cfg=cfg.network)
    edges = _parse_bins(args.bins) if args.bins else E.DEFAULT_EDGES
    if args.no_fusion:
        cfg = apply_overrides(cfg, {"fusion": False})
    records = _records(args, cfg)
    cm, bins, maps = evaluate_records(net, records, cfg, edges)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = E.iou_report(cm)
    artifacts = [out / "iou.csv", out / "iou_distance.csv", out / "confusion.csv"]
    artifacts[0].write_text(E.iou_csv(report))
    artifacts[1].write_text(E.distance_csv(bins))
    artifacts[2].write_text(E.confusion_csv(cm))
    for scan_id, conf_c, conf_l in maps:
        for tag, c in (("camera", conf_c), ("lidar", conf_l)):
            path = out / f"{scan_id}_confidence_{tag}.ppm"
            write_ppm(path, c)
            artifacts.append(path)
    write_manifest(out, "eval", cfg.to_dict(), artifacts)
    print(f"mIoU {report.miou:.4f} over {cm.total} points")
    for lo, hi, m, n in bins.rows:
        print(f"  [{lo:g}, {hi:g})  mIoU {m:.4f}  points {n}")
    return EXIT_OK


def _restore_train_config(meta):
    d = dict(meta["train_config"])
    d["network"] = NetworkConfig(**d["network"])
    d["loss"] = LossConfig(**d["loss"])
    return d


def cmd_gradcheck(args):
    names = [n for n, _ in op_cases()]
    if args.only:
        unknown = set(args.only) - set(names)
        if unknown:
            raise UsageError(f"unknown ops: {', '.join(sorted(unknown))}")
    only = set(args.only) if args.only else None
    if args.corrupt:
        with mutation(args.corrupt):
            report = run_gradcheck(args.seed, only)
    else:
        report = run_gradcheck(args.seed, only)
    for line in report.lines():
        print(line)
    print(f"overall worst relative error {report.worst:.3e}: {'PASS' if report.ok else 'FAIL'}")
    return EXIT_OK if report.ok else EXIT_CHECK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="pmf", description="Camera/LiDAR fusion segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("out")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="render projected scans as PPM images")
    _add_data_flags(p)
    _add_projection_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train the two-stream network")
    _add_data_flags(p)
    _add_projection_flags(p)
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate for both optimizers")
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--no-pl", action="store_true", help="drop the perception-aware terms")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config field")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    _add_data_flags(p)
    _add_projection_flags(p)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--scene-offset", type=int, default=0, help="first synthetic scene index")
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--bins", help="comma-separated range bin edges in metres, e.g. 0,10,20,inf")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", metavar="OP")
    p.add_argument("--corrupt", choices=("sigmoid",), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, E.EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
