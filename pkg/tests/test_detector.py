import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_pipeline
from gradcases import image_score_case
from oracles import box_iou_ref
from seqcloak.detector import (Box, DetectionRecord, LogParseError, ToyDetectorConfig, calibrate_detector,
                               detector_windows, frame_loss, ingest_log, iou, nms, select_box, toy_detect,
                               window_scores, write_log)


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)


def int_box():
    return st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 12), st.integers(1, 12)).map(
        lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=40, deadline=None)
@given(int_box(), int_box())
def test_iou_matches_raster_count(a, b):
    assert iou(a, b) == pytest.approx(box_iou_ref(a, b, 42), abs=1e-12)
    assert iou(a, b) == iou(b, a)


def rec(specs, gt=(0, 0, 10, 10)):
    return DetectionRecord("v", 0, [Box(*c, conf=p) for c, p in specs], gt)


def test_frame_loss_examples():
    assert frame_loss(rec([((0, 0, 10, 8), 0.9)]))[0] == 0.9
    assert frame_loss(DetectionRecord("v", 0, [], (0, 0, 1, 1))) == (0.0, 0.0, 0.0)
    # IoU 0.6 with conf 0.2 loses to IoU 0.7 with conf 0.1
    r = rec([((0, 0, 10, 6), 0.2), ((0, 0, 10, 7), 0.1)])
    assert frame_loss(r)[0] == 0.1


def test_ties_prefer_confidence_then_index():
    r = rec([((0, 0, 10, 5), 0.3), ((0, 5, 10, 10), 0.6)])
    assert select_box(r) == 1
    r = rec([((0, 0, 10, 5), 0.3), ((0, 0, 10, 5), 0.3)])
    assert select_box(r) == 0


def test_other_classes_ignored():
    r = DetectionRecord("v", 0, [Box(0, 0, 10, 10, 0.9, "car")], (0, 0, 10, 10))
    assert frame_loss(r) == (0.0, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(int_box(), st.floats(0, 1)), min_size=1, max_size=6), st.floats(0.1, 10.0))
def test_selection_scale_equivariant(boxes, scale):
    r = rec(boxes, gt=(3, 3, 20, 25))
    s = DetectionRecord("v", 0, [Box(*(scale * np.array(c, float)), conf=p) for c, p in boxes],
                        tuple(scale * np.array((3, 3, 20, 25), float)))
    assert select_box(r) == select_box(s)
    a, b = frame_loss(r), frame_loss(s)
    assert a[1] == b[1] and a[2] == pytest.approx(b[2], abs=1e-12)


def greedy_nms_ref(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) < thresh for j in keep):
            keep.append(i)
    return keep


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 50, (40, 2))
    wh = rng.uniform(5, 20, (40, 2))
    boxes = np.hstack([xy, xy + wh])
    scores = rng.random(40)
    keep = nms(boxes, scores, 0.5)
    assert keep == greedy_nms_ref(boxes, scores, 0.5)
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(boxes[i], boxes[j]) < 0.5


def naive_scores(img, cfg):
    inner, outer = detector_windows(img.shape[0], cfg)
    out = []
    for (x1, y1, x2, y2), (ox1, oy1, ox2, oy2) in zip(inner, outer):
        mu_in = img[y1:y2, x1:x2].reshape(-1, 3).mean(0)
        ring = np.ones(img.shape[:2], bool)
        ring[:] = False
        ring[oy1:oy2, ox1:ox2] = True
        ring[y1:y2, x1:x2] = False
        mu_ring = img[ring].mean(0)
        c = np.abs(mu_in - mu_ring).mean()
        out.append(1 / (1 + np.exp(-cfg.kappa * (c - cfg.offset))))
    return np.array(out)


def test_window_scores_match_naive():
    img = np.random.default_rng(0).random((32, 32, 3))
    cfg = ToyDetectorConfig()
    np.testing.assert_allclose(window_scores(img, cfg)[0], naive_scores(img, cfg), atol=1e-12)


def test_constant_image_has_no_boxes():
    r = toy_detect(np.full((64, 64, 3), 0.4))
    assert r.boxes == []


def test_camouflage_scores_lower():
    bg = np.full((64, 64, 3), 0.3)
    loud = bg.copy()
    loud[16:48, 24:40] = [0.9, 0.1, 0.1]
    quiet = bg.copy()
    quiet[16:48, 24:40] = 0.32
    cfg = ToyDetectorConfig()
    assert window_scores(quiet, cfg)[0].max() < window_scores(loud, cfg)[0].max()


def test_detection_deterministic_and_nms_separated():
    pipe = tiny_pipeline(resolution=64)
    scene = pipe.sample([2], "train")
    fr = pipe.render(scene, {"upper": np.full((8, 8, 3), 0.9)})[0]
    a, b = toy_detect(fr), toy_detect(fr)
    assert a == b
    for i, x in enumerate(a.boxes):
        for y in a.boxes[i + 1:]:
            assert iou(x.coords, y.coords) < 0.5


@pytest.mark.parametrize("seed", range(2))
def test_score_gradient(seed):
    assert image_score_case(seed) <= 1e-4


def test_calibration_hits_targets():
    cfg = calibrate_detector(0.02, 0.15, 0.05, 0.8)
    s = lambda c: 1 / (1 + np.exp(-cfg.kappa * (c - cfg.offset)))  # noqa: E731
    assert s(0.02) == pytest.approx(0.05, abs=1e-12)
    assert s(0.15) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(ValueError):
        calibrate_detector(0.2, 0.1)


def line(vid="a", frame=0, gt=(0, 0, 10, 10), boxes=()):
    return json.dumps({"video_id": vid, "frame": frame, "gt_box": list(gt),
                       "boxes": [{"box": list(b), "conf": c, "class": "person"} for b, c in boxes]})


def test_ingest_empty(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert ingest_log(tmp_path / "e.jsonl") == []


def test_ingest_one_line(tmp_path):
    (tmp_path / "a.jsonl").write_text(line(boxes=[((1, 1, 5, 5), 0.5)]) + "\n")
    recs = ingest_log(tmp_path / "a.jsonl")
    assert len(recs) == 1 and recs[0].boxes[0].conf == 0.5


def test_ingest_bad_box_line_number(tmp_path):
    (tmp_path / "b.jsonl").write_text(line() + "\n" + line(frame=1, boxes=[((5, 1, 5, 4), 0.5)]) + "\n")
    with pytest.raises(LogParseError) as err:
        ingest_log(tmp_path / "b.jsonl")
    assert err.value.line == 2


def test_ingest_gap_and_order(tmp_path):
    (tmp_path / "g.jsonl").write_text("\n".join([line("b", 0), line("a", 3), line("a", 0)]) + "\n")
    with pytest.warns(UserWarning, match="missing"):
        recs = ingest_log(tmp_path / "g.jsonl")
    assert [(r.video_id, r.frame) for r in recs] == [("a", 0), ("a", 1), ("a", 2), ("a", 3), ("b", 0)]
    assert recs[1].boxes == [] and frame_loss(recs[1]) == (0.0, 0.0, 0.0)


def test_ingest_duplicate(tmp_path):
    (tmp_path / "d.jsonl").write_text(line() + "\n" + line() + "\n")
    with pytest.raises(LogParseError, match="duplicate"):
        ingest_log(tmp_path / "d.jsonl")


def test_log_roundtrip(tmp_path):
    recs = [DetectionRecord("v", t, [Box(1, 2, 8, 9, 0.25 * t)], (0, 0, 10, 10)) for t in range(4)]
    write_log(tmp_path / "r.jsonl", recs)
    back = ingest_log(tmp_path / "r.jsonl")
    assert [frame_loss(r) for r in back] == [frame_loss(r) for r in recs]
