"""The desk-scale attack, end to end.

Renders a person wearing the procedural starting garments (shirt, trousers,
hat) in random outdoor scenes, optimizes the control points against the toy
contrast detector with the sequence loss, and compares held-out videos
before and after. With the shipped settings this takes a few minutes per
core; pass ``--epochs 30`` for a quick look.

    python demos/03_smoke_attack.py [--epochs 300] [--out demo_out/attack]
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from seqcloak.config import smoke_config
from seqcloak.evalkit import compute_report, gated_conf, report
from seqcloak.optimizer import run_attack
from seqcloak.pipeline import evaluate, export_textures, smoke_params
from seqcloak.texture_param import save_texture_png


def summarize(label, videos, mcfg):
    d = compute_report(videos, mcfg).dataset
    g = np.mean(np.concatenate([gated_conf(v, mcfg) for v in videos.values()]))
    print(f"{label:<10} gated conf {g:.3f}  SeqASR {d['seqasr_mean']:5.1f}  CVaR {d['cvar_mean']:5.1f}  "
          f"NDR {d['ndr']:5.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="demo_out/attack")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = smoke_config()
    if args.epochs is not None:
        cfg = cfg.replace("attack", epochs=args.epochs)
    pipeline = cfg.pipeline()
    out = Path(args.out)
    start = smoke_params(cfg.scene.garments, cfg.texture.k, cfg.texture.p_max, cfg.seed, cfg.texture.texture_size)

    t0 = time.perf_counter()

    def progress(row):
        if row["epoch"] % 25 == 0:
            print(f"epoch {row['epoch']:4d}  L_seq {row['L_seq']:.4f}  mean conf {row['mean_conf']:.3f}")

    final, history = run_attack(start, cfg.attack, pipeline, out_dir=out / "run", jobs=args.jobs,
                                progress=progress)
    print(f"{len(history)} epochs in {time.perf_counter() - t0:.0f} s\n")

    before = evaluate(pipeline, start, cfg.eval.n_videos, cfg.eval.seed, prefix="init")
    after = evaluate(pipeline, final, cfg.eval.n_videos, cfg.eval.seed, prefix="adv")
    summarize("initial", before, cfg.metrics)
    summarize("optimized", after, cfg.metrics)

    report(after, cfg.metrics, out / "report", runs={"initial": before, "optimized": after})
    for g, t in export_textures(pipeline, final, cfg.eval.seed).items():
        save_texture_png(out / f"optimized_{g}.png", np.rint(t.pixels * 255), t.mask)
    print(f"\ntextures, checkpoints and report written to {out}")


if __name__ == "__main__":
    main()
