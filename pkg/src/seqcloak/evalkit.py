"""Sequence-level attack metrics: SeqASR, CVaR and NDR, plus report emission."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detector import frame_loss, group_by_video

NDR_MODES = ("max-threshold", "per-frame-failure")


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.3
    tau_iou: float = 0.1
    alpha: float = 0.1
    ndr_mode: str = "max-threshold"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InvalidInputError(f"tau must be in (0, 1), got {self.tau}")
        if not 0.0 <= self.tau_iou < 1.0:
            raise InvalidInputError(f"tau_iou must be in [0, 1), got {self.tau_iou}")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.ndr_mode not in NDR_MODES:
            raise InvalidInputError(f"ndr_mode must be one of {NDR_MODES}, got {self.ndr_mode!r}")


def trace(video):
    """``(conf, iou)`` arrays for a video given as detection records or as a ``(conf, iou)`` pair."""
    if isinstance(video, tuple) and len(video) == 2 and not hasattr(video[0], "boxes"):
        conf, iou = (np.asarray(v, dtype=np.float64) for v in video)
        return conf, iou
    vals = [frame_loss(r) for r in video]
    if not vals:
        return np.zeros(0), np.zeros(0)
    arr = np.array(vals, dtype=np.float64)
    return arr[:, 1], arr[:, 2]


def _check(conf):
    if len(conf) == 0:
        raise InvalidInputError("video has no frames (T = 0)")


def seqasr(video, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Percentage of frames with ``conf < tau`` or ``iou < tau_iou``."""
    conf, iou = trace(video)
    _check(conf)
    fail = (conf < cfg.tau) | (iou < cfg.tau_iou)
    return 100.0 * fail.sum() / len(conf)


def gated_conf(video, cfg: MetricsConfig = MetricsConfig()):
    conf, iou = trace(video)
    return np.where(iou >= cfg.tau_iou, conf, 0.0)


def tail_size(t, alpha):
    return max(1, math.ceil(alpha * t - 1e-12))


def cvar(video, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Mean of the top ``max(1, ceil(alpha T))`` IoU-gated confidences, in percent."""
    g = gated_conf(video, cfg)
    _check(g)
    m = tail_size(len(g), cfg.alpha)
    top = np.sort(g)[::-1][:m]
    return 100.0 * top.mean()


def ndr_flag(video, cfg: MetricsConfig = MetricsConfig()) -> bool:
    conf, iou = trace(video)
    _check(conf)
    if cfg.ndr_mode == "max-threshold":
        return bool(conf.max() < cfg.tau and iou.max() < cfg.tau_iou)
    return bool(np.all((conf < cfg.tau) | (iou < cfg.tau_iou)))


def ndr(videos, cfg: MetricsConfig = MetricsConfig()) -> float:
    videos = list(videos.values()) if isinstance(videos, dict) else list(videos)
    if not videos:
        raise InvalidInputError("empty video set")
    return 100.0 * sum(ndr_flag(v, cfg) for v in videos) / len(videos)


@dataclass
class MetricsReport:
    per_video: dict
    dataset: dict
    config: dict

    def to_dict(self):
        return {"per_video": self.per_video, "dataset": self.dataset, "config": self.config}


def compute_report(videos, cfg: MetricsConfig = MetricsConfig()) -> MetricsReport:
    """Per-video and dataset metrics. ``videos`` maps video id to records or ``(conf, iou)`` traces."""
    if not isinstance(videos, dict):
        videos = group_by_video(videos)
    if not videos:
        raise InvalidInputError("empty video set")
    per_video = {}
    for vid in sorted(videos):
        v = trace(videos[vid])
        per_video[vid] = {
            "frames": int(len(v[0])),
            "seqasr": float(seqasr(v, cfg)),
            "cvar": float(cvar(v, cfg)),
            "ndr_flag": bool(ndr_flag(v, cfg)),
        }
    s = np.array([p["seqasr"] for p in per_video.values()])
    c = np.array([p["cvar"] for p in per_video.values()])
    flags = [p["ndr_flag"] for p in per_video.values()]
    dataset = {
        "videos": len(per_video),
        "seqasr_mean": float(s.mean()), "seqasr_std": float(s.std()),
        "cvar_mean": float(c.mean()), "cvar_std": float(c.std()),
        "ndr": 100.0 * sum(flags) / len(flags),
    }
    config = asdict(cfg)
    config.update(cvar_gating="zero-fill", tail_size="max(1, ceil(alpha*T))", std="population",
                  missing_detection_conf=0.0)
    return MetricsReport(per_video, dataset, config)


# --------------------------------------------------------------------------- artifacts

def _svg_plot(path, series, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "seqcloak", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3))
        for label, y in series:
            ax.plot(np.arange(len(y)), y, label=label, lw=1.2)
        ax.set_xlabel("frame")
        ax.set_ylabel("gated confidence")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def report(videos, cfg: MetricsConfig = MetricsConfig(), out_dir=None, plots=True, runs=None) -> MetricsReport:
    """Write ``report.json``, ``report.csv``, ``summary.txt`` and per-video SVG curves to ``out_dir``.

    ``runs`` optionally maps a run label to another video set for the overlay plot.
    """
    if out_dir is None or str(out_dir) == "":
        raise OSError("output directory path is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not isinstance(videos, dict):
        videos = group_by_video(videos)
    rep = compute_report(videos, cfg)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["video_id", "frames", "seqasr", "cvar", "ndr_flag"])
        for vid, p in rep.per_video.items():
            wr.writerow([vid, p["frames"], f"{p['seqasr']:.6f}", f"{p['cvar']:.6f}", int(p["ndr_flag"])])
    d = rep.dataset
    (out / "summary.txt").write_text(
        "videos  SeqASR(up)        CVaR(down)        NDR(up)\n"
        f"{d['videos']:<7d} {d['seqasr_mean']:6.1f} +- {d['seqasr_std']:5.1f}  "
        f"{d['cvar_mean']:6.1f} +- {d['cvar_std']:5.1f}  {d['ndr']:6.1f}\n")
    if plots:
        pdir = out / "plots"
        pdir.mkdir(exist_ok=True)
        for vid in rep.per_video:
            _svg_plot(pdir / f"{_safe(vid)}.svg", [(vid, gated_conf(videos[vid], cfg))], f"video {vid}")
        if runs:
            series = []
            for label, vids in runs.items():
                if not isinstance(vids, dict):
                    vids = group_by_video(vids)
                first = sorted(vids)[0]
                series.append((f"{label}:{first}", gated_conf(vids[first], cfg)))
            _svg_plot(pdir / "overlay.svg", series, "confidence trajectories")
    return rep


def _safe(name):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(name))
