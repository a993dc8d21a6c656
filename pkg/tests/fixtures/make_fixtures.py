"""Regenerate the detection-log fixtures and their golden reports.

Expected values come from the loop-based oracles in ``tests/oracles.py``,
never from the package itself. Run from the repository root:

    python tests/fixtures/make_fixtures.py
"""
import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from oracles import cvar_ref, ndr_flag_ref, seqasr_ref  # noqa: E402

GT = [40.0, 30.0, 80.0, 130.0]


def box_with_iou(target):
    """A box sharing the gt's x-range whose IoU with the gt is exactly ``target`` (as a rational)."""
    x1, y1, x2, y2 = GT
    h = (y2 - y1) * target
    return [x1, y1, x2, y1 + h]


def frame_line(vid, t, conf, iou_target, extra_noise=False):
    boxes = []
    if conf is not None:
        boxes.append({"box": box_with_iou(iou_target), "conf": conf, "class": "person"})
        if extra_noise:
            boxes.append({"box": [0.0, 0.0, 10.0, 10.0], "conf": 0.99, "class": "car"})
    return {"video_id": vid, "frame": t, "gt_box": GT, "boxes": boxes}


def build_synthetic():
    rng = np.random.default_rng(2024)
    lines, truth = [], {}
    iou_levels = [0.05, 0.25, 0.5, 0.75, 1.0]
    for v, length in enumerate([1, 5, 10, 19, 37, 109]):
        vid = f"syn{v:02d}"
        conf, iou = [], []
        for t in range(length):
            if rng.random() < 0.1:
                c, o = None, 0.0  # no person box at all
            else:
                c = float(np.round(rng.random(), 4))
                o = iou_levels[int(rng.integers(len(iou_levels)))]
            lines.append(frame_line(vid, t, c, o, extra_noise=(t % 7 == 3)))
            conf.append(0.0 if c is None else c)
            iou.append(o)
        truth[vid] = (conf, iou)
    return lines, truth


def build_divergent():
    """Videos where the two no-detection-rate readings disagree."""
    lines, truth = [], {}
    # every frame fails, but the best confidence and the best IoU are both high (on different frames)
    pattern = [(0.9, 0.05), (0.1, 1.0)] * 5
    # a video that is missed everywhere
    quiet = [(0.1, 0.05)] * 6
    # a normally detected video
    loud = [(0.8, 1.0)] * 4
    for vid, seq in (("div00", pattern), ("div01", quiet), ("div02", loud)):
        for t, (c, o) in enumerate(seq):
            lines.append(frame_line(vid, t, c, o))
        truth[vid] = ([c for c, _ in seq], [o for _, o in seq])
    return lines, truth


def golden(truth, mode):
    per = {}
    for vid in sorted(truth):
        c, o = truth[vid]
        per[vid] = {"frames": len(c), "seqasr": seqasr_ref(c, o), "cvar": cvar_ref(c, o),
                    "ndr_flag": bool(ndr_flag_ref(c, o, mode=mode))}
    s = [p["seqasr"] for p in per.values()]
    cv = [p["cvar"] for p in per.values()]
    n = len(per)

    def pstd(xs):
        m = sum(xs) / len(xs)
        return (sum((x - m) ** 2 for x in xs) / len(xs)) ** 0.5

    dataset = {"videos": n, "seqasr_mean": sum(s) / n, "seqasr_std": pstd(s), "cvar_mean": sum(cv) / n,
               "cvar_std": pstd(cv), "ndr": 100.0 * sum(p["ndr_flag"] for p in per.values()) / n}
    return {"per_video": per, "dataset": dataset}


def write(name, lines):
    with open(HERE / name, "w") as fh:
        for obj in lines:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def main():
    lines, truth = build_synthetic()
    write("synthetic.jsonl", lines)
    (HERE / "synthetic.golden.json").write_text(json.dumps(golden(truth, "max-threshold"), indent=1, sort_keys=True) + "\n")
    lines, truth = build_divergent()
    write("divergent.jsonl", lines)
    for mode in ("max-threshold", "per-frame-failure"):
        (HERE / f"divergent.{mode}.golden.json").write_text(
            json.dumps(golden(truth, mode), indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
