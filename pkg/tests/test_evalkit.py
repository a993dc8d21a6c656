import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cvar_ref, ndr_flag_ref, seqasr_ref
from seqcloak.detector import Box, DetectionRecord
from seqcloak.evalkit import (InvalidInputError, MetricsConfig, compute_report, cvar, ndr, ndr_flag, report,
                              seqasr, tail_size)


def ramp(t=10):
    return np.arange(1, t + 1) / t, np.ones(t)


def test_ramp_cvar():
    v = ramp()
    assert cvar(v, MetricsConfig(alpha=0.1)) == 100.0
    assert cvar(v, MetricsConfig(alpha=0.3)) == 90.0
    assert cvar(v, MetricsConfig(alpha=1.0)) == pytest.approx(55.0, abs=1e-12)


def test_seqasr_counts_low_conf_and_poor_iou():
    conf = np.array([0.9, 0.1, 0.8, 0.5])
    iou = np.array([0.9, 0.9, 0.05, 0.5])
    assert seqasr((conf, iou)) == 50.0


def test_cvar_gates_mislocalized_frames():
    # high confidence on the wrong region counts as zero
    assert cvar((np.array([0.95]), np.array([0.0]))) == 0.0


def test_tail_size_rounding():
    assert tail_size(1, 0.1) == 1
    assert tail_size(10, 0.1) == 1
    assert tail_size(11, 0.1) == 2
    assert tail_size(10, 0.3) == 3  # 0.3 * 10 is 3.0000000000000004 in floating point
    assert tail_size(109, 0.1) == 11


def test_ndr_modes_differ():
    # every frame fails by one criterion or the other, yet max conf and max IoU are both high
    conf = np.array([0.9, 0.1])
    iou = np.array([0.0, 0.9])
    assert not ndr_flag((conf, iou), MetricsConfig())
    assert ndr_flag((conf, iou), MetricsConfig(ndr_mode="per-frame-failure"))


def test_empty_video_rejected():
    with pytest.raises(InvalidInputError):
        seqasr((np.zeros(0), np.zeros(0)))
    with pytest.raises(InvalidInputError):
        ndr({})


@pytest.mark.parametrize("kw", [dict(tau=1.5), dict(tau=0.0), dict(alpha=0.0), dict(tau_iou=1.0),
                                dict(ndr_mode="sometimes")])
def test_bad_config(kw):
    with pytest.raises(InvalidInputError):
        MetricsConfig(**kw)


def test_records_and_traces_agree():
    recs = []
    for t, (c, o) in enumerate([(0.9, 1.0), (0.2, 1.0), (0.0, 0.0)]):
        boxes = [Box(0, 0, 10, 10, c)] if o > 0 else []
        recs.append(DetectionRecord("v", t, boxes, (0, 0, 10, 10)))
    a = compute_report({"v": recs}).per_video["v"]
    b = compute_report({"v": (np.array([0.9, 0.2, 0.0]), np.array([1.0, 1.0, 0.0]))}).per_video["v"]
    assert a == b


def traces(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        t = int(rng.integers(1, 120))
        conf = rng.random(t)
        iou = rng.random(t) * rng.choice([0.15, 1.0])
        yield conf, iou


@pytest.mark.parametrize("mode", ["max-threshold", "per-frame-failure"])
def test_against_bruteforce(mode):
    cfg = MetricsConfig(alpha=0.2, ndr_mode=mode)
    for conf, iou in traces(100, 1):
        v = (conf, iou)
        assert abs(seqasr(v, cfg) - seqasr_ref(conf, iou)) <= 1e-9
        assert abs(cvar(v, cfg) - cvar_ref(conf, iou, alpha=0.2)) <= 1e-9
        assert ndr_flag(v, cfg) == ndr_flag_ref(conf, iou, mode=mode)


finite = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_cvar_bounds(frames, alpha):
    conf = np.array([f[0] for f in frames])
    iou = np.array([f[1] for f in frames])
    cfg = MetricsConfig(alpha=alpha)
    g = np.where(iou >= cfg.tau_iou, conf, 0.0)
    c = cvar((conf, iou), cfg)
    assert 100 * g.mean() - 1e-9 <= c <= 100 * g.max() + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_cvar_monotone_in_alpha(frames, alpha):
    conf = np.array([f[0] for f in frames])
    iou = np.array([f[1] for f in frames])
    lo = cvar((conf, iou), MetricsConfig(alpha=alpha))
    hi = cvar((conf, iou), MetricsConfig(alpha=min(1.0, alpha + 0.3)))
    assert hi <= lo + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=60))
def test_seqasr_monotone_in_tau(frames):
    conf = np.array([f[0] for f in frames])
    iou = np.array([f[1] for f in frames])
    assert seqasr((conf, iou), MetricsConfig(tau=0.2)) <= seqasr((conf, iou), MetricsConfig(tau=0.6))


def test_report_files_deterministic(tmp_path):
    videos = {f"v{i}": tr for i, tr in enumerate(traces(3, 5))}
    report(videos, MetricsConfig(), tmp_path / "a", runs={"x": videos})
    report(videos, MetricsConfig(), tmp_path / "b", runs={"x": videos})
    for name in ("report.json", "report.csv", "summary.txt", "plots/v0.svg", "plots/overlay.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["dataset"]["videos"] == 3
    assert rep["config"]["cvar_gating"] == "zero-fill"


def test_report_dataset_uses_population_std(tmp_path):
    videos = {"a": (np.array([0.9]), np.array([1.0])), "b": (np.array([0.1]), np.array([1.0]))}
    d = compute_report(videos).dataset
    assert d["seqasr_mean"] == 50.0
    assert d["seqasr_std"] == 50.0


def test_report_empty_out_dir():
    with pytest.raises(OSError):
        report({"a": (np.ones(2), np.ones(2))}, MetricsConfig(), "")


def test_seqasr_examples():
    assert seqasr((np.zeros(5), np.ones(5))) == 100.0
    assert seqasr((np.array([0.9, 0.1, 0.9, 0.1]), np.ones(4))) == 50.0
    assert seqasr((np.array([0.9, 0.9]), np.array([0.05, 0.5]))) == 50.0


def test_ndr_examples():
    cfgs = [MetricsConfig(), MetricsConfig(ndr_mode="per-frame-failure")]
    missed = (np.zeros(4), np.zeros(4))
    seen = (np.array([0.9]), np.array([0.9]))
    one_box = (np.full(5, 0.1), np.array([0.0, 0.0, 0.5, 0.0, 0.0]))
    for cfg in cfgs:
        assert ndr([missed], cfg) == 100.0
        assert ndr([seen], cfg) == 0.0
    assert ndr([one_box], cfgs[0]) == 0.0
    assert ndr([one_box], cfgs[1]) == 100.0


def test_cvar_all_gated_zero_and_full_tail_is_mean():
    assert cvar((np.zeros(6), np.ones(6))) == 0.0
    conf = np.random.default_rng(0).random(17)
    iou = np.random.default_rng(1).random(17)
    g = np.where(iou >= 0.1, conf, 0.0)
    assert cvar((conf, iou), MetricsConfig(alpha=1.0)) == pytest.approx(100 * g.mean(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.tuples(finite, finite), min_size=1, max_size=20), min_size=1, max_size=5),
       st.floats(0.05, 0.5), st.floats(0.0, 0.4))
def test_thresholds_monotone(videos, tau, tau_iou):
    vids = [(np.array([f[0] for f in v]), np.array([f[1] for f in v])) for v in videos]
    lo = MetricsConfig(tau=tau, tau_iou=tau_iou)
    hi_tau = MetricsConfig(tau=tau + 0.4, tau_iou=tau_iou)
    hi_iou = MetricsConfig(tau=tau, tau_iou=tau_iou + 0.5)
    for mode in ("max-threshold", "per-frame-failure"):
        a = MetricsConfig(tau=tau, tau_iou=tau_iou, ndr_mode=mode)
        b = MetricsConfig(tau=tau + 0.4, tau_iou=tau_iou, ndr_mode=mode)
        assert ndr(vids, a) <= ndr(vids, b)
    for v in vids:
        assert seqasr(v, lo) <= seqasr(v, hi_tau)
        assert seqasr(v, lo) <= seqasr(v, hi_iou)
