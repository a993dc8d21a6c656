"""Command-line entry points: init -> attack -> render -> detect/ingest -> eval -> report.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
logger = logging.getLogger("seqcloak")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers

def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, command, args, run_cfg=None, extra=None):
    """Full config, seeds and code version next to a command's outputs."""
    manifest = {
        "command": command,
        "argv": [str(a) for a in getattr(args, "_argv", sys.argv[1:])],
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k != "func" and not k.startswith("_")},
        "version": __version__,
        "git_describe": _git_describe(),
        "config": run_cfg.to_dict() if run_cfg is not None else None,
        "cache": os.environ.get("SEQCLOAK_CACHE", ""),
    }
    if extra:
        manifest.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _load_run_config(args):
    from .config import RunConfig, load_config, smoke_config

    if getattr(args, "smoke", False):
        cfg = smoke_config()
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed).replace("attack", seed=args.seed)
    return cfg


def _load_param_files(paths):
    from .texture_param import load_params

    params = {}
    for p in paths:
        for g, tp in load_params(p).items():
            if g in params:
                raise UsageError(f"garment {g!r} appears in more than one parameter file")
            params[g] = tp
    return params


def _jobs(args):
    return args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------- commands

def cmd_init(args):
    """Texture + mask PNG -> locked palette and control points (JSON)."""
    from .texture_param import build_texture_params, load_texture, save_params, save_texture_png
    from .pipeline import starting_texture

    cfg = _load_run_config(args)
    k = args.k if args.k is not None else cfg.texture.k
    p_max = args.p_max if args.p_max is not None else cfg.texture.p_max
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params = {}
    if args.procedural:
        garments = [args.garment] if args.garment else list(cfg.scene.garments)
        for g in garments:
            tex = starting_texture(g, cfg.texture.texture_size, cfg.seed)
            save_texture_png(out.with_name(f"{out.stem}_{g}.png"), tex.pixels, tex.mask)
            params[g] = build_texture_params(tex, k=k, p_max=p_max, seed=cfg.seed)
    else:
        if not args.texture or not args.mask:
            raise UsageError("init needs TEXTURE and MASK images (or --procedural)")
        tex = load_texture(args.texture, args.mask, args.garment or "upper")
        params[tex.garment_id] = build_texture_params(tex, k=k, p_max=p_max, seed=cfg.seed)
    save_params(out, params[next(iter(params))] if len(params) == 1 else params)
    for g, p in params.items():
        pts = p.control_points
        print(f"{g}: palette {p.palette.colors.astype(int).tolist()} ({p.palette.gamut_id}), "
              f"{pts.k} x {pts.p_max} control points"
              + (f", empty clusters {list(pts.empty_clusters)}" if pts.empty_clusters else ""))
    write_manifest(out.with_name(out.stem + ".manifest.json"), "init", args, cfg,
                   {"sha256": {g: p.source_texture_sha256 for g, p in params.items()}})
    return EXIT_OK


def cmd_attack(args):
    from .optimizer import AttackDiverged, run_attack
    from .texture_param import save_params

    cfg = _load_run_config(args)
    if args.epochs is not None:
        cfg = cfg.replace("attack", epochs=args.epochs)
    params = _load_param_files(args.params)
    missing = [g for g in cfg.scene.garments if g not in params]
    if missing:
        raise UsageError(f"no parameters for configured garment(s): {', '.join(missing)}")
    params = {g: params[g] for g in cfg.scene.garments}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", "attack", args, cfg)
    pipeline = cfg.pipeline()

    def progress(row):
        if args.verbose or row["epoch"] % 10 == 0:
            logger.info("epoch %d loss %.5f L_seq %.5f L_ctrl %.6f", row["epoch"], row["loss"], row["L_seq"],
                        row["L_ctrl"])

    try:
        result, history = run_attack(params, cfg.attack, pipeline, out_dir=out, resume=args.resume,
                                     jobs=_jobs(args), progress=progress)
    except AttackDiverged as exc:
        save_params(out / "last_good.json", exc.params)
        print(f"error: {exc}; last good parameters written to {out / 'last_good.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    if not history:
        save_params(out / "params.json", result)
    print(f"wrote {out / 'params.json'} ({len(history)} epochs recorded)")
    return EXIT_OK


def cmd_render(args):
    from .pipeline import export_textures
    from .renderer import save_frames
    from .texture_param import save_texture_png

    cfg = _load_run_config(args)
    params = _load_param_files(args.params)
    pipeline = cfg.pipeline()
    pipeline.garment_ids = tuple(g for g in cfg.scene.garments if g in params)
    out = Path(args.out)
    textures = export_textures(pipeline, params, cfg.eval.seed)
    for g, t in textures.items():
        save_texture_png(out / f"texture_{g}.png", np.rint(t.pixels * 255), t.mask)
    n = args.n_videos if args.n_videos is not None else cfg.eval.n_videos
    split = args.split or cfg.eval.split
    for v in range(n):
        vid = f"{args.prefix}{v:04d}"
        scene = pipeline.sample([int(cfg.eval.seed), 7, v], split)
        save_frames(out, vid, pipeline.render(scene, textures), scene)
    write_manifest(out / "manifest.json", "render", args, cfg, {"videos": n, "split": split})
    print(f"rendered {n} video(s) to {out}")
    return EXIT_OK


def _frame_dirs(root):
    root = Path(root)
    if (root / "manifest.json").exists() and any(root.glob("frame_*.png")):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("frame_*.png")))


def cmd_detect(args):
    from PIL import Image

    from .detector import toy_detect, write_log

    cfg = _load_run_config(args)
    records = []
    for d in (x for root in args.frames for x in _frame_dirs(root)):
        man = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
        vid = man.get("video_id", d.name)
        boxes = man.get("gt_boxes", [])
        for i, f in enumerate(sorted(d.glob("frame_*.png"))):
            with Image.open(f) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            gt = boxes[i] if i < len(boxes) else None
            idx = int(f.stem.split("_")[1])
            rec = toy_detect(img, cfg.detector, vid, tuple(gt) if gt is not None else None)
            records.append(type(rec)(rec.video_id, idx, rec.boxes, rec.gt_box))
    if not records:
        raise UsageError("no frames found")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_log(out, records)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "detect", args, cfg)
    print(f"wrote {sum(r.gt_box is not None for r in records)} records to {out}")
    return EXIT_OK


def cmd_ingest(args):
    from .detector import group_by_video, ingest_log, write_log

    records = []
    for p in args.logs:
        records.extend(ingest_log(p))
    vids = group_by_video(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_log(out, records)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "ingest", args, None,
                   {"videos": len(vids), "frames": len(records)})
    print(f"ingested {len(records)} frame(s) from {len(vids)} video(s) into {out}")
    return EXIT_OK


def _metrics_cfg(args, base):
    import dataclasses

    from .evalkit import MetricsConfig

    kw = {}
    for name in ("tau", "tau_iou", "alpha"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    if args.ndr_mode is not None:
        kw["ndr_mode"] = {"per-frame": "per-frame-failure", "max": "max-threshold"}.get(args.ndr_mode, args.ndr_mode)
    return MetricsConfig(**{**dataclasses.asdict(base), **kw})


def _gather_logs(paths):
    from .detector import ingest_log

    records = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
        if not files:
            raise UsageError(f"no .jsonl detection logs in {p}")
        for f in files:
            records.extend(ingest_log(f))
    return records


def cmd_eval(args):
    from .evalkit import report

    cfg = _load_run_config(args)
    mcfg = _metrics_cfg(args, cfg.metrics)
    records = _gather_logs(args.logs)
    rep = report(records, mcfg, args.out, plots=not args.no_plots)
    d = rep.dataset
    print(f"videos {d['videos']}  SeqASR {d['seqasr_mean']:.1f} +- {d['seqasr_std']:.1f}  "
          f"CVaR {d['cvar_mean']:.1f} +- {d['cvar_std']:.1f}  NDR {d['ndr']:.1f}")
    write_manifest(Path(args.out) / "manifest.json", "eval", args, cfg)
    return EXIT_OK


def cmd_report(args):
    """Side-by-side table and overlay plot for several runs (logs or log directories)."""
    from .evalkit import compute_report, report

    cfg = _load_run_config(args)
    mcfg = _metrics_cfg(args, cfg.metrics)
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.logs]
    if len(labels) != len(args.logs):
        raise UsageError("--labels must name every run")
    runs = {lab: _gather_logs([p]) for lab, p in zip(labels, args.logs)}
    out = Path(args.out)
    first = labels[0]
    report(runs[first], mcfg, out, plots=True, runs=runs)
    lines = ["run            videos  SeqASR(up)        CVaR(down)        NDR(up)"]
    table = {}
    for lab, recs in runs.items():
        d = compute_report(recs, mcfg).dataset
        table[lab] = d
        lines.append(f"{lab:<14} {d['videos']:<7d} {d['seqasr_mean']:6.1f} +- {d['seqasr_std']:5.1f}  "
                     f"{d['cvar_mean']:6.1f} +- {d['cvar_std']:5.1f}  {d['ndr']:6.1f}")
    (out / "comparison.txt").write_text("\n".join(lines) + "\n")
    (out / "comparison.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    print("\n".join(lines))
    write_manifest(out / "manifest.json", "report", args, cfg)
    return EXIT_OK


def cmd_calibrate_detector(args):
    from .detector import calibrate_detector
    from .pipeline import calibration_contrasts

    cfg = _load_run_config(args)
    params = _load_param_files(args.params)
    pipeline = cfg.pipeline()
    pipeline.garment_ids = tuple(g for g in cfg.scene.garments if g in params)
    lo, hi = calibration_contrasts(pipeline, params, args.n_videos, cfg.eval.seed, "val")
    det = calibrate_detector(lo, hi, args.conf_low, args.conf_high, cfg.detector)
    result = {"contrast_background": lo, "contrast_unattacked": hi, "kappa": det.kappa, "offset": det.offset}
    print(json.dumps(result, indent=1, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"detector": {"kappa": det.kappa, "offset": det.offset}}, indent=1) + "\n")
        write_manifest(out.with_name(out.stem + ".manifest.json"), "calibrate-detector", args, cfg, result)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--config", help="run configuration (TOML or JSON)")
    p.add_argument("--smoke", action="store_true", help="use the built-in desk-scale smoke configuration")
    if seed:
        p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--jobs", type=int, default=0, help="worker processes (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def _metric_flags(p):
    p.add_argument("--tau", type=float, help="confidence threshold (default 0.3)")
    p.add_argument("--tau-iou", dest="tau_iou", type=float, help="IoU threshold (default 0.1)")
    p.add_argument("--alpha", type=float, help="CVaR tail fraction (default 0.1)")
    p.add_argument("--ndr-mode", dest="ndr_mode", choices=["max-threshold", "per-frame-failure", "per-frame"])


def build_parser():
    ap = _Parser(prog="seqcloak", description="Sequence-level adversarial garment textures (desk scale).")
    ap.add_argument("--version", action="version", version=f"seqcloak {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="extract palette and control points from a UV texture")
    p.add_argument("texture", nargs="?")
    p.add_argument("mask", nargs="?")
    p.add_argument("--garment", choices=["upper", "lower", "hat"])
    p.add_argument("--k", type=int)
    p.add_argument("--p-max", dest="p_max", type=int)
    p.add_argument("--procedural", action="store_true",
                   help="use the built-in starting textures for every configured garment")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("attack", help="optimize control points against the toy detector")
    p.add_argument("params", nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("render", help="render held-out videos with the given textures")
    p.add_argument("params", nargs="+")
    p.add_argument("--n-videos", dest="n_videos", type=int)
    p.add_argument("--split", choices=["train", "val", "test", "all"])
    p.add_argument("--prefix", default="vid")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("detect", help="run the toy detector over rendered frame directories")
    p.add_argument("frames", nargs="+")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ingest", help="validate and normalize external detection logs (JSONL)")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True)
    _common(p, seed=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("eval", help="SeqASR / CVaR / NDR report from detection logs")
    p.add_argument("logs", nargs="+", help="JSONL logs or directories of them")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    _metric_flags(p)
    _common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare several runs: table plus overlay plot")
    p.add_argument("logs", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    _metric_flags(p)
    _common(p, seed=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("calibrate-detector", help="fit toy-detector kappa/offset on unattacked scenes")
    p.add_argument("params", nargs="+")
    p.add_argument("--n-videos", dest="n_videos", type=int, default=16)
    p.add_argument("--conf-low", dest="conf_low", type=float, default=0.05)
    p.add_argument("--conf-high", dest="conf_high", type=float, default=0.8)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_calibrate_detector)
    return ap


def main(argv=None):
    from .config import ConfigError
    from .detector import LogParseError
    from .evalkit import InvalidInputError as MetricsInputError
    from .renderer import ConfigurationError
    from .texture_param import InvalidInputError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError, InvalidInputError, MetricsInputError,
            LogParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with the runtime exit code
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
