import math

import numpy as np
import pytest

import seqcloak.optimizer as opt_mod
from conftest import tiny_params, tiny_pipeline
from gradcases import ctrl_case
from oracles import ctrl_ref
from seqcloak.optimizer import (ADAM_MAGIC, Adam, AttackConfig, AttackDiverged, ctrl_loss, lr_at, pack,
                                read_history, run_attack, seq_loss, unpack)
from seqcloak.renderer import ConfigurationError


def test_seq_loss_equal_losses():
    val, w = seq_loss([0.4] * 7, 2.0)
    np.testing.assert_allclose(w, 1 / 7)
    assert val == pytest.approx(0.4, abs=1e-15)


def test_seq_loss_gamma_zero_uniform():
    _, w = seq_loss([0.1, 0.9, 0.3], 0.0)
    np.testing.assert_array_equal(w, np.full(3, 1 / 3))


def test_seq_loss_two_frames():
    val, w = seq_loss([0.0, 1.0], 2.0)
    e2 = math.exp(2)
    np.testing.assert_allclose(w, [1 / (1 + e2), e2 / (1 + e2)], atol=1e-15)
    assert val == pytest.approx(e2 / (1 + e2), abs=1e-15)


def test_seq_loss_stable_for_large_losses():
    val, w = seq_loss([1000.0, 999.0], 5.0)
    assert np.all(np.isfinite(w)) and 999 < val <= 1000


def test_seq_loss_rejects_nonfinite():
    with pytest.raises(ValueError):
        seq_loss([0.1, np.nan], 2.0)


def test_ctrl_closed_forms():
    n = 12
    v, _ = ctrl_loss(np.full((3, 4, 2), 0.5), 0.1)
    assert v == 1 - 1 / n
    grid = np.stack(np.meshgrid(np.arange(4), np.arange(3)), -1).reshape(3, 4, 2) * 1.0
    v, _ = ctrl_loss(grid, 0.1)  # spacing / sigma = 10
    assert abs(v) <= 1e-6
    v, _ = ctrl_loss(np.array([[[0.0, 0.0], [0.3, 0.0]]]), 0.3)
    assert v == pytest.approx(math.exp(-1) / 2, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ctrl_matches_bruteforce_and_bounds(seed):
    pts = np.random.default_rng(seed).random((2, 5, 2))
    v, _ = ctrl_loss(pts, 0.2, chunk=3)
    n = 10
    assert v == pytest.approx(ctrl_ref(pts.reshape(-1, 2), 0.2), abs=1e-12)
    assert -1 / n <= v <= 1 - 1 / n


@pytest.mark.parametrize("seed", range(3))
def test_ctrl_gradient(seed):
    assert ctrl_case(seed) <= 1e-4


def test_lr_schedule():
    assert [lr_at(0.001, e) for e in (0, 149, 150, 299, 300)] == [0.001, 0.001, 0.0005, 0.0005, 0.00025]


def test_adam_against_formula():
    rng = np.random.default_rng(0)
    x = rng.random(4)
    a = Adam(4)
    m = v = np.zeros(4)
    ref = x.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        x = a.step(x, g, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(x, ref, rtol=1e-14)


def test_adam_state_file(tmp_path):
    a = Adam(5)
    a.step(np.zeros(5), np.arange(5.0), 0.1)
    a.save(tmp_path / "s.adam")
    raw = (tmp_path / "s.adam").read_bytes()
    assert raw.startswith(b"ADAM1") and raw[:8] == ADAM_MAGIC
    assert len(raw) == 24 + 2 * 8 * 5
    b = Adam.load(tmp_path / "s.adam")
    assert b.t == 1 and np.array_equal(a.m, b.m) and np.array_equal(a.v, b.v)
    (tmp_path / "bad.adam").write_bytes(b"nope" + raw[4:])
    with pytest.raises(ValueError):
        Adam.load(tmp_path / "bad.adam")


def test_pack_roundtrip_clips():
    params = tiny_params(("upper", "lower"))
    vec = pack(params, True)
    assert len(vec) == 2 * (3 * 4 * 2 + 3)
    vec[0] = 1.7
    back = unpack(vec, params, True)
    assert back["lower"].control_points.points.flat[0] == 1.0
    np.testing.assert_array_equal(back["lower"].extra["logit_bias"], np.zeros(3))


def test_config_validation():
    for kw in (dict(gamma=-1), dict(lambda_ctrl=-1), dict(mc_sequences=0), dict(sigma_ctrl=0)):
        with pytest.raises(ValueError):
            AttackConfig(**kw)


def small_cfg(**kw):
    base = dict(mc_sequences=2, epochs=30, sigma_ctrl=0.1, checkpoint_every=10)
    base.update(kw)
    return AttackConfig(**base)


def test_zero_epochs_identity():
    params = tiny_params()
    out, hist = run_attack(params, small_cfg(epochs=0), tiny_pipeline())
    assert hist == []
    assert out["upper"] is params["upper"]


def test_run_deterministic_and_resumable(tmp_path):
    params = tiny_params()
    pipe = tiny_pipeline()
    a, ha = run_attack(params, small_cfg(), pipe, out_dir=tmp_path / "a")
    b, hb = run_attack(params, small_cfg(), tiny_pipeline(), out_dir=tmp_path / "b")
    assert [r["loss"] for r in ha] == [r["loss"] for r in hb]
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    assert (tmp_path / "a/params.json").read_bytes() == (tmp_path / "b/params.json").read_bytes()
    assert sorted(p.name for p in (tmp_path / "a").glob("checkpoint_*.adam")) == [
        "checkpoint_000010.adam", "checkpoint_000020.adam", "checkpoint_000030.adam"]
    # stop after 20 epochs, then resume to 30
    run_attack(params, small_cfg(epochs=20), pipe, out_dir=tmp_path / "r")
    run_attack(params, small_cfg(), pipe, out_dir=tmp_path / "r", resume=True)
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "r/history.csv").read_bytes()
    assert (tmp_path / "a/params.json").read_bytes() == (tmp_path / "r/params.json").read_bytes()
    rows = read_history(tmp_path / "a/history.csv")
    assert [r["epoch"] for r in rows] == list(range(30))


def test_parallel_matches_serial():
    params = tiny_params()
    a, _ = run_attack(params, small_cfg(epochs=3), tiny_pipeline())
    b, _ = run_attack(params, small_cfg(epochs=3), tiny_pipeline(), jobs=2)
    assert np.array_equal(a["upper"].control_points.points, b["upper"].control_points.points)


def test_strong_repulsion_spreads_points():
    params = tiny_params(p_max=6)
    cfg = AttackConfig(mc_sequences=1, epochs=50, lambda_ctrl=1e6, sigma_ctrl=0.3, lr_points=0.01)
    _, hist = run_attack(params, cfg, tiny_pipeline())
    assert hist[-1]["L_ctrl"] < hist[0]["L_ctrl"]


def test_texture_group_moves_bias():
    params = tiny_params()
    out, hist = run_attack(params, small_cfg(epochs=5, optimize_texture=True), tiny_pipeline())
    assert np.any(out["upper"].extra["logit_bias"] != 0)
    assert hist[0]["lr_texture"] == 0.01 and hist[0]["lr_points"] == 0.001


def test_divergence_reports_last_good(monkeypatch):
    calls = {"n": 0}
    real = opt_mod.seq_loss

    def flaky(losses, gamma):
        calls["n"] += 1
        val, w = real(losses, gamma)
        return (float("nan"), w) if calls["n"] > 4 else (val, w)

    monkeypatch.setattr(opt_mod, "seq_loss", flaky)
    with pytest.raises(AttackDiverged) as err:
        run_attack(tiny_params(), small_cfg(), tiny_pipeline())
    assert len(err.value.history) == 2
    assert "upper" in err.value.params


def test_all_empty_frames_is_config_error():
    pipe = tiny_pipeline(start_offset=(60.0, 60.0))
    with pytest.raises(ConfigurationError):
        run_attack(tiny_params(), small_cfg(epochs=1), pipe)


def test_empty_pool_rejected():
    pipe = tiny_pipeline()
    pipe.pools = []
    with pytest.raises(ConfigurationError):
        run_attack(tiny_params(), small_cfg(epochs=1), pipe)
