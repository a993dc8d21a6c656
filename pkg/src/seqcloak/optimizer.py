"""Sequence-level EOT optimization of garment control points.

Each epoch draws ``M`` scene samples, renders the walking sequence with the
current textures, runs the detector, and weights the per-frame losses with a
temperature softmax so the most detectable frames dominate. A repulsion
penalty keeps control points spread out. Control points (and optionally a
per-cluster logit bias) are updated with Adam.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import frame_loss, frame_loss_grad
from .pipeline import ScenePipeline
from .renderer import ConfigurationError
from .texture_gen import (
    generate_texture,
    logit_field,
    logit_field_backward,
    resolve_noise_seed,
    smoothness_loss,
    texture_backward_logits,
)
from .texture_param import TextureParams, load_params, save_params, uv_grid

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss", "L_seq", "L_ctrl", "lr_points", "lr_texture",
                   "L_smooth", "mean_conf", "empty_frames", "seed")
ADAM_MAGIC = b"ADAM1\x00\x00\x00"


class AttackDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last good parameters and history."""

    def __init__(self, msg, params, history):
        super().__init__(msg)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 2.0
    lambda_ctrl: float = 50.0
    sigma_ctrl: float = 0.05
    mc_sequences: int = 8
    epochs: int = 1000
    lr_texture: float = 0.01
    lr_points: float = 0.001
    lr_halving_period: int = 150
    seed: int = 0
    optimize_texture: bool = False
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lambda_ctrl < 0:
            raise ValueError(f"lambda_ctrl must be >= 0, got {self.lambda_ctrl}")
        if not self.sigma_ctrl > 0:
            raise ValueError(f"sigma_ctrl must be > 0, got {self.sigma_ctrl}")
        if self.mc_sequences < 1:
            raise ValueError(f"mc_sequences must be >= 1, got {self.mc_sequences}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_halving_period < 1:
            raise ValueError("lr_halving_period must be >= 1")


# --------------------------------------------------------------------------- losses

def seq_loss(frame_losses, gamma):
    """Softmax-weighted sequence loss; returns ``(L_seq, weights)``.

    The weights are constants for differentiation, so ``dL_seq/dL_t = w_t``.
    """
    x = np.asarray(frame_losses, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("need at least one frame loss")
    if not np.all(np.isfinite(x)):
        raise ValueError("frame losses must be finite")
    a = gamma * x
    e = np.exp(a - a.max())
    w = e / e.sum()
    return float(w @ x), w


def ctrl_loss(points, sigma, chunk=1024):
    """Repulsion between all control points; returns ``(value, gradient)``.

    ``value = mean_ij exp(-|p_i - p_j|^2 / sigma^2) - 1/N`` over all ordered
    pairs including ``i == j``, so it is 0 for well separated points and
    ``1 - 1/N`` when every point coincides.
    """
    pts = getattr(points, "points", points)
    pts = np.asarray(pts, dtype=np.float64)
    shape = pts.shape
    p = pts.reshape(-1, 2)
    n = len(p)
    if n < 1:
        raise ValueError("need at least one control point")
    s2 = float(sigma) ** 2
    total = 0.0
    grad = np.empty_like(p)
    for lo in range(0, n, chunk):
        blk = p[lo:lo + chunk]
        diff = blk[:, None, :] - p[None, :, :]
        k = np.exp(-(diff * diff).sum(-1) / s2)
        total += float(k.sum())
        # each unordered pair appears twice in the ordered sum
        grad[lo:lo + chunk] = -4.0 / (n * n * s2) * np.einsum("ij,ijd->id", k, diff)
    return total / (n * n) - 1.0 / n, grad.reshape(shape)


def lr_at(lr0, epoch, period=150):
    return lr0 * 2.0 ** (-(epoch // period))


# --------------------------------------------------------------------------- adam

class Adam:
    """Adam over one flat float64 vector (b1 = 0.9, b2 = 0.999, eps = 1e-8)."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x, grad, lr):
        """In-place-free update; ``lr`` may be a scalar or per-entry array."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)

    def save(self, path):
        """Binary layout: magic, ``<Q`` step, ``<Q`` length, then ``m`` and ``v`` as ``<f8``."""
        with open(path, "wb") as fh:
            fh.write(ADAM_MAGIC)
            fh.write(struct.pack("<QQ", self.t, len(self.m)))
            fh.write(self.m.astype("<f8").tobytes())
            fh.write(self.v.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:8] != ADAM_MAGIC:
            raise ValueError(f"{path}: not an optimizer state file")
        t, n = struct.unpack_from("<QQ", data, 8)
        off = 24
        if len(data) != off + 16 * n:
            raise ValueError(f"{path}: truncated optimizer state")
        opt = cls(n)
        opt.t = t
        opt.m = np.frombuffer(data, "<f8", n, off).astype(np.float64)
        opt.v = np.frombuffer(data, "<f8", n, off + 8 * n).astype(np.float64)
        return opt


# --------------------------------------------------------------------------- parameter packing

def _bias(p: TextureParams):
    b = p.extra.get("logit_bias")
    return np.zeros(p.palette.k) if b is None else np.asarray(b, dtype=np.float64)


def pack(params: dict, with_bias):
    parts = []
    for g in sorted(params):
        parts.append(params[g].control_points.points.ravel())
    if with_bias:
        for g in sorted(params):
            parts.append(_bias(params[g]))
    return np.concatenate(parts)


def unpack(vec, params: dict, with_bias):
    out, off = {}, 0
    for g in sorted(params):
        p = params[g]
        n = p.control_points.points.size
        out[g] = p.with_points(np.clip(vec[off:off + n].reshape(p.control_points.points.shape), 0.0, 1.0))
        off += n
    if with_bias:
        for g in sorted(params):
            k = params[g].palette.k
            out[g] = dataclasses.replace(out[g], extra={**out[g].extra, "logit_bias": vec[off:off + k].copy()})
            off += k
    return out


# --------------------------------------------------------------------------- one Monte Carlo sample

def scene_seed(seed, epoch, sample):
    return [int(seed), 1, int(epoch), int(sample)]


def sample_pass(pipeline: ScenePipeline, params: dict, cfg: AttackConfig, epoch, sample, fields=None):
    """Forward and backward for one scene sample.

    Returns ``L_seq``, mean confidence, number of empty frames, the smoothness
    value and per-garment ``(dz, dbias)`` logit gradients of
    ``L_seq + smooth_weight * L_smooth`` (weight taken from the generator config).
    """
    scene = pipeline.sample(scene_seed(cfg.seed, epoch, sample), "train")
    noise_seed = resolve_noise_seed(pipeline.gen_cfg, cfg.seed, epoch, sample)
    textures = {}
    for g, p in params.items():
        fld = None if fields is None else fields[g]
        textures[g] = generate_texture(p.control_points, p.palette, p.mask, pipeline.gen_cfg, noise_seed,
                                       logit_bias=p.extra.get("logit_bias"), field=fld)
    frames = pipeline.render(scene, textures)
    records = pipeline.detect(frames)
    vals = [frame_loss(r) for r in records]
    losses = np.array([v[0] for v in vals])
    l_seq, w = seq_loss(losses, cfg.gamma)
    up = {g: np.zeros_like(t.pixels) for g, t in textures.items()}
    for t, (fr, rec) in enumerate(zip(frames, records)):
        if w[t] == 0.0 or losses[t] == 0.0:
            continue
        gimg = frame_loss_grad(fr, rec, pipeline.det_cfg)
        for g, gt in fr.pullback(gimg).items():
            up[g] += w[t] * gt
    smooth = 0.0
    sw = pipeline.gen_cfg.smooth_weight
    if sw > 0:
        for g, t in textures.items():
            v, gs = smoothness_loss(t)
            smooth += v
            up[g] += sw * gs
    grads = {g: texture_backward_logits(textures[g], up[g], noise_seed) for g in textures}
    n_empty = sum(bool(f.empty) for f in frames)
    return {"L_seq": l_seq, "mean_conf": float(np.mean([v[1] for v in vals])), "empty": n_empty,
            "frames": len(frames), "smooth": smooth, "grads": grads}


_WORKER = {}


def _worker_init(pipeline, cfg):
    _WORKER["pipeline"] = pipeline
    _WORKER["cfg"] = cfg


def _worker_task(args):
    params, epoch, sample = args
    return sample_pass(_WORKER["pipeline"], params, _WORKER["cfg"], epoch, sample)


# --------------------------------------------------------------------------- main loop

def _write_history(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_COLUMNS)
        for row in rows:
            wr.writerow([row[c] if isinstance(row[c], (int, str)) else repr(float(row[c]))
                         for c in HISTORY_COLUMNS])


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({c: (int(r[c]) if c in ("epoch", "empty_frames", "seed") else float(r[c]))
                    for c in HISTORY_COLUMNS})
    return out


def _latest_checkpoint(out_dir):
    ck = sorted(Path(out_dir).glob("checkpoint_*.json"))
    return ck[-1] if ck else None


def _save_checkpoint(out_dir, epoch, params, opt, history):
    out = Path(out_dir)
    save_params(out / f"checkpoint_{epoch:06d}.json", params)
    opt.save(out / f"checkpoint_{epoch:06d}.adam")
    _write_history(out / f"checkpoint_{epoch:06d}.csv", history)


def run_attack(params: dict, cfg: AttackConfig, pipeline: ScenePipeline, out_dir=None, resume=False,
               jobs=1, progress=None):
    """Optimize ``{garment_id: TextureParams}``; returns ``(params, history)``.

    With ``out_dir`` a checkpoint (parameter JSON, Adam state, history so
    far) is written every ``cfg.checkpoint_every`` epochs, and ``resume``
    continues from the newest one. ``jobs > 1`` evaluates the Monte Carlo
    samples in worker processes; gradients are summed in sample order, so the
    result does not depend on ``jobs``.
    """
    if isinstance(params, TextureParams):
        params = {params.garment_id: params}
    params = dict(params)
    if not pipeline.pools:
        raise ConfigurationError("scene pipeline has no background pool")
    history = []
    start = 0
    opt = Adam(len(pack(params, cfg.optimize_texture)))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ck = _latest_checkpoint(out_dir) if resume else None
        if ck is not None:
            params = load_params(ck)
            opt = Adam.load(ck.with_suffix(".adam"))
            history = read_history(ck.with_suffix(".csv"))
            start = int(ck.stem.split("_")[1])
            logger.info("resuming from %s at epoch %d", ck, start)
    if cfg.epochs == 0 or start >= cfg.epochs:
        return params, history

    n_pts = sum(p.control_points.points.size for p in params.values())
    uvs = {g: uv_grid(*p.mask.shape) for g, p in params.items()}
    pool = None
    if jobs > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(min(jobs, cfg.mc_sequences), _worker_init, (pipeline, cfg))
    last_good = params
    try:
        for epoch in range(start, cfg.epochs):
            lr_p = lr_at(cfg.lr_points, epoch, cfg.lr_halving_period)
            lr_t = lr_at(cfg.lr_texture, epoch, cfg.lr_halving_period)
            fields = {g: logit_field(p.control_points.points, uvs[g], pipeline.gen_cfg.field_sigma,
                                     return_kernel=True) for g, p in params.items()}
            if pool is None:
                results = [sample_pass(pipeline, params, cfg, epoch, m, fields) for m in range(cfg.mc_sequences)]
            else:
                results = pool.map(_worker_task, [(params, epoch, m) for m in range(cfg.mc_sequences)])
            n_frames = sum(r["frames"] for r in results)
            n_empty = sum(r["empty"] for r in results)
            if n_empty == n_frames:
                raise ConfigurationError(f"epoch {epoch}: every rendered frame is empty; "
                                         "the subject never enters the camera view")
            mc = cfg.mc_sequences
            l_seq = sum(r["L_seq"] for r in results) / mc
            smooth = sum(r["smooth"] for r in results) / mc
            grad_pts, grad_bias = [], []
            for g in sorted(params):
                p = params[g]
                dz = sum(r["grads"][g][0] for r in results) / mc
                db = sum(r["grads"][g][1] for r in results) / mc
                gp = logit_field_backward(p.control_points.points, uvs[g], pipeline.gen_cfg.field_sigma,
                                          fields[g][1], dz)
                grad_pts.append(gp)
                grad_bias.append(db)
            l_ctrl = 0.0
            for i, g in enumerate(sorted(params)):
                v, gc = ctrl_loss(params[g].control_points.points, cfg.sigma_ctrl)
                l_ctrl += v
                grad_pts[i] = grad_pts[i] + cfg.lambda_ctrl * gc
            loss = l_seq + cfg.lambda_ctrl * l_ctrl + pipeline.gen_cfg.smooth_weight * smooth
            if not math.isfinite(loss):
                raise AttackDiverged(f"non-finite loss at epoch {epoch}", last_good, history)
            history.append({"epoch": epoch, "loss": loss, "L_seq": l_seq, "L_ctrl": l_ctrl,
                            "lr_points": lr_p, "lr_texture": lr_t, "L_smooth": smooth,
                            "mean_conf": sum(r["mean_conf"] for r in results) / mc,
                            "empty_frames": n_empty, "seed": cfg.seed})
            grad = np.concatenate([gp.ravel() for gp in grad_pts]
                                  + (grad_bias if cfg.optimize_texture else []))
            lr_vec = np.full(len(grad), lr_p)
            lr_vec[n_pts:] = lr_t
            vec = opt.step(pack(params, cfg.optimize_texture), grad, lr_vec)
            if not np.all(np.isfinite(vec)):
                raise AttackDiverged(f"non-finite parameters at epoch {epoch}", last_good, history)
            params = unpack(vec, params, cfg.optimize_texture)
            last_good = params
            if progress is not None:
                progress(history[-1])
            done = epoch + 1
            if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
                _save_checkpoint(out_dir, done, params, opt, history)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    if out_dir is not None:
        _write_history(Path(out_dir) / "history.csv", history)
        save_params(Path(out_dir) / "params.json", params)
    return params, history


def config_to_dict(cfg: AttackConfig):
    return dataclasses.asdict(cfg)


def dump_config(path, cfg: AttackConfig):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
