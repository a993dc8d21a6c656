"""From a printed garment texture to optimizable control points and back.

Steps:
1. take the built-in starting texture for the upper garment,
2. cluster its colors into a printable palette (K-Means plus gamut lock),
3. place control points per color with a second K-Means over UV positions,
4. regenerate a texture from the points through the differentiable generator.

The regenerated texture is what the optimizer sees; moving a control point
moves a soft blob of its palette color.

    python demos/02_texture_pipeline.py [--out demo_out/texture]
"""
import argparse
from pathlib import Path

import numpy as np

from seqcloak.texture_gen import GeneratorConfig, generate_texture, in_palette_hull
from seqcloak.texture_param import build_texture_params, save_params, save_texture_png
from seqcloak.pipeline import starting_texture


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out/texture")
    ap.add_argument("--k", type=int, default=6)
    ap.add_argument("--p-max", type=int, default=64)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    tex = starting_texture("upper", 64)
    save_texture_png(out / "source.png", tex.pixels, tex.mask)
    params = build_texture_params(tex, k=args.k, p_max=args.p_max, seed=0)
    print("locked palette (sRGB):")
    for c in params.palette.colors.astype(int):
        print("  ", c.tolist())
    pts = params.control_points
    print(f"{pts.k} colors x {pts.p_max} control points, empty clusters: {list(pts.empty_clusters)}")
    save_params(out / "params.json", params)

    cfg = GeneratorConfig(field_sigma=1.0 / np.sqrt(pts.k * pts.p_max), smooth_weight=0.0)
    for i in range(3):
        gen = generate_texture(pts, params.palette, params.mask, cfg, (0, i, 0))
        save_texture_png(out / f"generated_{i}.png", np.rint(gen.pixels * 255), gen.mask)
        print(f"noise draw {i}: inside palette hull = {in_palette_hull(gen)}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
