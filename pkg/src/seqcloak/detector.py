"""Detection records, IoU utilities, a differentiable toy person detector and log ingestion."""
from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PERSON = "person"


class LogParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    conf: float
    cls: str = PERSON
    window: int = -1  # toy-detector window index, -1 for external boxes

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must satisfy x2 > x1 and y2 > y1, got {self.coords}")
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")

    @property
    def coords(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class DetectionRecord:
    video_id: str
    frame: int
    boxes: list = field(default_factory=list)
    gt_box: tuple | None = None


def iou(a, b) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes; 0 for degenerate boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a[:4])
    bx1, by1, bx2, by2 = (float(v) for v in b[:4])
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(boxes, ref):
    """Vectorized IoU of ``boxes`` ``(n, 4)`` against one reference box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = (float(v) for v in ref[:4])
    if x2 <= x1 or y2 <= y1 or len(boxes) == 0:
        return np.zeros(len(boxes))
    iw = np.clip(np.minimum(boxes[:, 2], x2) - np.maximum(boxes[:, 0], x1), 0, None)
    ih = np.clip(np.minimum(boxes[:, 3], y2) - np.maximum(boxes[:, 1], y1), 0, None)
    inter = iw * ih
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + (x2 - x1) * (y2 - y1) - inter
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return np.where(valid & (union > 0), inter / np.where(union > 0, union, 1.0), 0.0)


def select_box(record: DetectionRecord):
    """Index of the person box with the highest IoU vs ground truth, or ``None``.

    Ties on IoU go to the higher confidence, then to the lower box index.
    """
    if record.gt_box is None:
        return None
    best, key = None, None
    for i, b in enumerate(record.boxes):
        if b.cls != PERSON:
            continue
        k = (iou(b.coords, record.gt_box), b.conf, -i)
        if key is None or k > key:
            best, key = i, k
    return best


def frame_loss(record: DetectionRecord):
    """``(loss, conf, iou)`` for one frame; all zeros when no person box exists."""
    i = select_box(record)
    if i is None:
        return 0.0, 0.0, 0.0
    b = record.boxes[i]
    return float(b.conf), float(b.conf), iou(b.coords, record.gt_box)


def nms(boxes, scores, thresh=0.5):
    """Greedy non-maximum suppression; keeps boxes whose IoU with every kept box is below ``thresh``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores), kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr < thresh]
    return keep


# --------------------------------------------------------------------------- toy detector

@dataclass(frozen=True)
class ToyDetectorConfig:
    """Contrast detector; ``score = sigmoid(kappa * (contrast - offset))``.

    ``kappa`` and ``offset`` come from :func:`calibrate_detector` on the
    smoke scene set (unattacked starting textures vs. empty backgrounds).
    """

    kappa: float = 32.2
    offset: float = 0.111
    scales: tuple = ((0.30, 0.15), (0.45, 0.22), (0.60, 0.30))  # (height, width) as fractions of R
    ring: float = 0.25  # ring margin, fraction of window size on each side
    stride_div: int = 32
    score_threshold: float = 0.05
    nms_iou: float = 0.5


def _windows(r, cfg: ToyDetectorConfig):
    stride = max(1, r // cfg.stride_div)
    out = []
    for fh, fw in cfg.scales:
        h = max(2, int(round(fh * r)))
        w = max(2, int(round(fw * r)))
        mh = max(1, int(round(cfg.ring * h)))
        mw = max(1, int(round(cfg.ring * w)))
        ys = np.arange(0, r - h + 1, stride)
        xs = np.arange(0, r - w + 1, stride)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        yy, xx = yy.ravel(), xx.ravel()
        inner = np.stack([xx, yy, xx + w, yy + h], axis=1)
        outer = np.stack([np.maximum(xx - mw, 0), np.maximum(yy - mh, 0),
                          np.minimum(xx + w + mw, r), np.minimum(yy + h + mh, r)], axis=1)
        out.append((inner, outer))
    inner = np.vstack([o[0] for o in out])
    outer = np.vstack([o[1] for o in out])
    return inner, outer


_WINDOW_CACHE = {}


def detector_windows(r, cfg: ToyDetectorConfig):
    key = (r, cfg)
    if key not in _WINDOW_CACHE:
        _WINDOW_CACHE[key] = _windows(r, cfg)
    return _WINDOW_CACHE[key]


def _box_sums(integral, boxes):
    x1, y1, x2, y2 = boxes.T
    return integral[y2, x2] - integral[y1, x2] - integral[y2, x1] + integral[y1, x1]


def window_scores(image, cfg: ToyDetectorConfig = ToyDetectorConfig()):
    """Scores of every sliding window, plus the contrast vectors needed for gradients."""
    img = np.asarray(image, dtype=np.float64)
    r = img.shape[0]
    inner, outer = detector_windows(r, cfg)
    integral = np.zeros((r + 1, img.shape[1] + 1, 3))
    integral[1:, 1:] = img.cumsum(0).cumsum(1)
    a_in = ((inner[:, 2] - inner[:, 0]) * (inner[:, 3] - inner[:, 1])).astype(np.float64)
    a_out = ((outer[:, 2] - outer[:, 0]) * (outer[:, 3] - outer[:, 1])).astype(np.float64)
    s_in = _box_sums(integral, inner)
    s_out = _box_sums(integral, outer)
    mu_in = s_in / a_in[:, None]
    mu_ring = (s_out - s_in) / (a_out - a_in)[:, None]
    diff = mu_in - mu_ring
    contrast = np.abs(diff).mean(axis=1)
    score = 1.0 / (1.0 + np.exp(-cfg.kappa * (contrast - cfg.offset)))
    return score, diff, inner, outer


def toy_detect(frame, cfg: ToyDetectorConfig = ToyDetectorConfig(), video_id="", gt_box=None) -> DetectionRecord:
    """Run the contrast detector on a frame (a :class:`Frame` or an image array)."""
    image = frame.image if hasattr(frame, "image") else frame
    if gt_box is None and hasattr(frame, "gt_box"):
        gt_box = tuple(float(v) for v in frame.gt_box)
    index = getattr(frame, "index", 0)
    score, _, inner, _ = window_scores(image, cfg)
    cand = np.flatnonzero(score > cfg.score_threshold)
    boxes = []
    if len(cand):
        keep = nms(inner[cand], score[cand], cfg.nms_iou)
        for k in keep:
            i = cand[k]
            x1, y1, x2, y2 = inner[i].tolist()
            boxes.append(Box(float(x1), float(y1), float(x2), float(y2), float(min(score[i], 1.0)), PERSON, int(i)))
    if gt_box is not None and (gt_box[2] <= gt_box[0] or gt_box[3] <= gt_box[1]):
        gt_box = None
    return DetectionRecord(video_id, index, boxes, gt_box)


def window_score_grad(image, window, cfg: ToyDetectorConfig = ToyDetectorConfig()):
    """Gradient of one window's score w.r.t. the image, shape ``(R, R, 3)``."""
    img = np.asarray(image, dtype=np.float64)
    inner, outer = detector_windows(img.shape[0], cfg)
    i = int(window)
    x1, y1, x2, y2 = inner[i]
    ox1, oy1, ox2, oy2 = outer[i]
    a_in = (x2 - x1) * (y2 - y1)
    a_ring = (ox2 - ox1) * (oy2 - oy1) - a_in
    s_in = img[y1:y2, x1:x2].sum(axis=(0, 1))
    s_out = img[oy1:oy2, ox1:ox2].sum(axis=(0, 1))
    diff = s_in / a_in - (s_out - s_in) / a_ring
    s = 1.0 / (1.0 + np.exp(-cfg.kappa * (np.abs(diff).mean() - cfg.offset)))
    dscore_dc = cfg.kappa * s * (1.0 - s)
    dc_dmu = np.sign(diff) / 3.0  # d contrast / d(mu_in - mu_ring), per channel
    g = np.zeros_like(img)
    g[oy1:oy2, ox1:ox2] = -dscore_dc * dc_dmu / a_ring
    g[y1:y2, x1:x2] = dscore_dc * dc_dmu / a_in
    return g


def calibrate_detector(contrast_low, contrast_high, conf_low=0.05, conf_high=0.8, base=None):
    """Fit ``kappa`` and ``offset`` so two reference contrasts map to two confidences.

    Typical use: ``contrast_low`` is the median selected-window contrast on
    person-free backgrounds, ``contrast_high`` the median on unattacked
    sequences.
    """
    if not contrast_high > contrast_low:
        raise ValueError("contrast_high must exceed contrast_low")
    if not 0 < conf_low < conf_high < 1:
        raise ValueError("need 0 < conf_low < conf_high < 1")
    lo = np.log(conf_low / (1 - conf_low))
    hi = np.log(conf_high / (1 - conf_high))
    kappa = (hi - lo) / (contrast_high - contrast_low)
    offset = contrast_high - hi / kappa
    base = base or ToyDetectorConfig()
    return dataclasses.replace(base, kappa=float(kappa), offset=float(offset))


def window_contrast(image, window, cfg: ToyDetectorConfig = ToyDetectorConfig()):
    _, diff, _, _ = window_scores(image, cfg)
    return float(np.abs(diff[int(window)]).mean())


def frame_loss_grad(frame, record: DetectionRecord, cfg: ToyDetectorConfig = ToyDetectorConfig()):
    """Gradient of :func:`frame_loss` w.r.t. the frame image (zero if no box was selected)."""
    image = frame.image if hasattr(frame, "image") else frame
    i = select_box(record)
    if i is None or record.boxes[i].window < 0:
        return np.zeros_like(image)
    return window_score_grad(image, record.boxes[i].window, cfg)


# --------------------------------------------------------------------------- log ingestion

def _parse_box(path, ln, obj, what):
    if not isinstance(obj, (list, tuple)) or len(obj) != 4:
        raise LogParseError(path, ln, f"{what} must be [x1, y1, x2, y2]")
    try:
        vals = [float(v) for v in obj]
    except (TypeError, ValueError):
        raise LogParseError(path, ln, f"{what} has non-numeric coordinates") from None
    if not (vals[2] > vals[0] and vals[3] > vals[1]):
        raise LogParseError(path, ln, f"{what} violates x2 > x1, y2 > y1: {vals}")
    return vals


def parse_log_line(path, ln, line) -> DetectionRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogParseError(path, ln, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise LogParseError(path, ln, "record must be a JSON object")
    for key in ("video_id", "frame", "gt_box", "boxes"):
        if key not in obj:
            raise LogParseError(path, ln, f"missing key {key!r}")
    if not isinstance(obj["video_id"], str):
        raise LogParseError(path, ln, "video_id must be a string")
    if not isinstance(obj["frame"], int) or isinstance(obj["frame"], bool) or obj["frame"] < 0:
        raise LogParseError(path, ln, "frame must be a non-negative integer")
    gt = _parse_box(path, ln, obj["gt_box"], "gt_box")
    if not isinstance(obj["boxes"], list):
        raise LogParseError(path, ln, "boxes must be a list")
    boxes = []
    for j, b in enumerate(obj["boxes"]):
        if not isinstance(b, dict) or "box" not in b or "conf" not in b:
            raise LogParseError(path, ln, f"boxes[{j}] needs 'box' and 'conf'")
        coords = _parse_box(path, ln, b["box"], f"boxes[{j}].box")
        try:
            conf = float(b["conf"])
        except (TypeError, ValueError):
            raise LogParseError(path, ln, f"boxes[{j}].conf must be a number") from None
        if not 0.0 <= conf <= 1.0:
            raise LogParseError(path, ln, f"boxes[{j}].conf={conf} outside [0, 1]")
        boxes.append(Box(*coords, conf, str(b.get("class", PERSON))))
    return DetectionRecord(obj["video_id"], obj["frame"], boxes, tuple(gt))


def ingest_log(path):
    """Parse a detection JSONL log into records grouped by video and sorted by frame.

    Missing frame indices inside a video are filled with box-less records
    (no ground truth) and reported with a warning.
    """
    path = Path(path)
    by_video = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = parse_log_line(path, ln, line)
            frames = by_video.setdefault(rec.video_id, {})
            if rec.frame in frames:
                raise LogParseError(path, ln, f"duplicate frame {rec.frame} for video {rec.video_id!r}")
            frames[rec.frame] = rec
    out = []
    for vid in sorted(by_video):
        frames = by_video[vid]
        lo, hi = min(frames), max(frames)
        missing = [t for t in range(lo, hi + 1) if t not in frames]
        if missing:
            warnings.warn(f"video {vid!r}: {len(missing)} missing frame(s) treated as no detection "
                          f"(first {missing[0]})", stacklevel=2)
        for t in range(lo, hi + 1):
            out.append(frames.get(t, DetectionRecord(vid, t, [], None)))
    return out


def group_by_video(records):
    videos = {}
    for rec in records:
        videos.setdefault(rec.video_id, []).append(rec)
    return {vid: sorted(recs, key=lambda r: r.frame) for vid, recs in videos.items()}


def record_to_json(rec: DetectionRecord) -> str:
    return json.dumps({
        "video_id": rec.video_id,
        "frame": int(rec.frame),
        "gt_box": list(rec.gt_box) if rec.gt_box is not None else None,
        "boxes": [{"box": list(b.coords), "conf": b.conf, "class": b.cls} for b in rec.boxes],
    }, sort_keys=True)


def write_log(path, records):
    with open(path, "w") as fh:
        for rec in records:
            if rec.gt_box is None:
                continue
            fh.write(record_to_json(rec) + "\n")
