"""Differentiable texture reconstruction from control points.

Forward path, per texel::

    z_c   = log(eps + sum_j exp(-|uv - p_cj|^2 / field_sigma^2))     logit field
    z'    = mix * z + (1 - mix) * blur(z)                              color-prior blend
    w0    = softmax((z' + b + g) / tau)                                g ~ Gumbel(0, 1)
    w     = clip(w0, clamp_shift, 1) / sum(...)                        weight floor
    pixel = sum_c w_c * palette_c / 255

Every step has a hand-written adjoint in :func:`texture_backward`; geometry
never enters here, so the pullback to the control points is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .texture_param import ControlPointSet, LockedPalette, uv_grid

LOG_EPS = 1e-12


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    tau_gumbel: float = 0.3
    blur_sigma: float = 1.0
    mix_ratio: float = 0.7
    clamp_shift: float = 0.01
    field_sigma: float = 0.03
    seed_mode: str = "per-iteration"
    # weight of the texture smoothness penalty, kept apart from the control-point repulsion weight
    smooth_weight: float = 10.0

    def __post_init__(self):
        if not self.tau_gumbel > 0:
            raise ValueError(f"tau_gumbel must be > 0, got {self.tau_gumbel}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError(f"mix_ratio must be in [0, 1], got {self.mix_ratio}")
        if not 0.0 <= self.clamp_shift < 1.0:
            raise ValueError(f"clamp_shift must be in [0, 1), got {self.clamp_shift}")
        if not self.field_sigma > 0:
            raise ValueError(f"field_sigma must be > 0, got {self.field_sigma}")
        if self.seed_mode not in ("fixed", "per-iteration"):
            raise ValueError(f"seed_mode must be 'fixed' or 'per-iteration', got {self.seed_mode!r}")


@dataclass
class GarmentTexture:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray
    weights: np.ndarray  # (H, W, K) convex mixture weights
    provenance: dict
    _cache: dict = field(default=None, repr=False)


# --------------------------------------------------------------------------- logit field

def logit_field(points, grid, field_sigma, return_kernel=False):
    """Per-cluster log-sum-of-Gaussians field.

    ``points`` is a :class:`ControlPointSet` or a ``(K, P, 2)`` array, ``grid``
    either ``(H, W)`` or a ``(H, W, 2)`` array of UV coordinates.
    Returns ``(H, W, K)`` logits (and the kernel sums when asked).
    """
    pts = points.points if isinstance(points, ControlPointSet) else np.asarray(points, dtype=np.float64)
    if isinstance(grid, tuple):
        uv = uv_grid(*grid)
    else:
        uv = np.asarray(grid, dtype=np.float64)
    h, w = uv.shape[:2]
    flat = uv.reshape(-1, 2)
    inv = 1.0 / (field_sigma * field_sigma)
    k = pts.shape[0]
    sums = np.empty((h * w, k))
    for c in range(k):
        diff = flat[:, None, :] - pts[c][None, :, :]
        sums[:, c] = np.exp(-np.einsum("npd,npd->np", diff, diff) * inv).sum(1)
    z = np.log(LOG_EPS + sums).reshape(h, w, k)
    if return_kernel:
        return z, sums.reshape(h, w, k)
    return z


def logit_field_backward(points, grid_uv, field_sigma, sums, dz):
    """Adjoint of :func:`logit_field`: ``dz`` is ``(H, W, K)``, returns ``(K, P, 2)``."""
    pts = np.asarray(points, dtype=np.float64)
    flat = grid_uv.reshape(-1, 2)
    inv = 1.0 / (field_sigma * field_sigma)
    coef = (dz.reshape(-1, pts.shape[0]) / (LOG_EPS + sums.reshape(-1, pts.shape[0])))
    grad = np.zeros_like(pts)
    for c in range(pts.shape[0]):
        if not np.any(coef[:, c]):
            continue
        diff = flat[:, None, :] - pts[c][None, :, :]  # uv - p
        e = np.exp(-np.einsum("npd,npd->np", diff, diff) * inv) * coef[:, c:c + 1]
        grad[c] = 2.0 * inv * np.einsum("np,npd->pd", e, diff)
    return grad


# --------------------------------------------------------------------------- blur

@lru_cache(maxsize=64)
def blur_matrix(n, sigma):
    """Dense 1D truncated-Gaussian operator (radius ceil(3 sigma), half-sample reflect)."""
    if sigma <= 0:
        return np.eye(n)
    r = int(np.ceil(3.0 * sigma))
    taps = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (taps / sigma) ** 2)
    g /= g.sum()
    m = np.zeros((n, n))
    period = 2 * n
    for i in range(n):
        idx = np.mod(i + taps, period)
        idx = np.where(idx >= n, period - 1 - idx, idx)
        np.add.at(m[i], idx, g)
    m.setflags(write=False)
    return m


def blur(z, sigma):
    """Separable Gaussian blur of an ``(H, W, K)`` field."""
    if sigma <= 0:
        return np.array(z, dtype=np.float64)
    bh = blur_matrix(z.shape[0], float(sigma))
    bw = blur_matrix(z.shape[1], float(sigma))
    return np.einsum("ij,jwk,vw->ivk", bh, z, bw, optimize=True)


def blur_adjoint(g, sigma):
    if sigma <= 0:
        return np.array(g, dtype=np.float64)
    bh = blur_matrix(g.shape[0], float(sigma))
    bw = blur_matrix(g.shape[1], float(sigma))
    return np.einsum("ij,ivk,vw->jwk", bh, g, bw, optimize=True)


# --------------------------------------------------------------------------- mixing

def gumbel_noise(shape, noise_seed):
    rng = np.random.default_rng(noise_seed)
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax_mix(logits, palette: LockedPalette, cfg: GeneratorConfig, noise_seed,
                       mask=None, noise=None, logit_bias=None) -> GarmentTexture:
    """Blend, perturb and softmax the logit field, then mix palette colors.

    ``noise`` overrides the seeded Gumbel draw (pass zeros to disable noise).
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))[0]
        raise NumericError(f"non-finite logit at pixel (row={bad[0]}, col={bad[1]}), cluster {bad[2]}")
    h, w, k = z.shape
    if k != palette.k:
        raise ValueError(f"logit channels ({k}) do not match palette size ({palette.k})")
    mask = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    g = gumbel_noise(z.shape, noise_seed) if noise is None else np.broadcast_to(noise, z.shape)
    zb = cfg.mix_ratio * z + (1.0 - cfg.mix_ratio) * blur(z, cfg.blur_sigma)
    if logit_bias is not None:
        zb = zb + np.asarray(logit_bias)[None, None, :]
    w0 = _softmax((zb + g) / cfg.tau_gumbel)
    wc = np.clip(w0, cfg.clamp_shift, 1.0)
    s = wc.sum(axis=-1, keepdims=True)
    weights = wc / s
    cols = palette.colors / 255.0
    pixels = (weights @ cols) * mask[..., None]
    weights = weights * mask[..., None]
    prov = {"noise_seed": noise_seed, "config": cfg, "noise_override": noise is not None}
    cache = {"w0": w0, "s": s, "weights": wc / s, "cols": cols, "mask": mask, "cfg": cfg}
    return GarmentTexture(pixels, mask, weights, prov, cache)


def generate_texture(points, palette: LockedPalette, mask, cfg: GeneratorConfig, noise_seed,
                     noise=None, logit_bias=None, field=None) -> GarmentTexture:
    """Full forward pass ``control points -> texture``.

    ``field`` may carry a precomputed ``(z, kernel_sums)`` pair for the same points,
    letting several noise draws share one logit-field evaluation.
    """
    pts = points.points if isinstance(points, ControlPointSet) else np.asarray(points, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    uv = uv_grid(*mask.shape)
    z, sums = field if field is not None else logit_field(pts, uv, cfg.field_sigma, return_kernel=True)
    tex = gumbel_softmax_mix(z, palette, cfg, noise_seed, mask=mask, noise=noise, logit_bias=logit_bias)
    tex._cache.update(points=pts, uv=uv, sums=sums)
    return tex


def texture_backward_logits(tex: GarmentTexture, upstream, noise_seed=None):
    """Pull ``d<upstream, pixels>`` back to the logit field; returns ``(dz, dbias)``."""
    if noise_seed is not None and noise_seed != tex.provenance["noise_seed"]:
        raise ContractError(f"noise seed {noise_seed!r} does not match the forward pass "
                            f"({tex.provenance['noise_seed']!r})")
    c = tex._cache
    cfg = c["cfg"]
    up = np.asarray(upstream, dtype=np.float64) * c["mask"][..., None]
    dw = up @ c["cols"].T
    w = c["weights"]
    dwc = (dw - (dw * w).sum(-1, keepdims=True)) / c["s"]
    w0 = c["w0"]
    dw0 = np.where(w0 > cfg.clamp_shift, dwc, 0.0)
    da = w0 * (dw0 - (dw0 * w0).sum(-1, keepdims=True))
    dzb = da / cfg.tau_gumbel
    dbias = dzb.sum(axis=(0, 1))
    dz = cfg.mix_ratio * dzb + (1.0 - cfg.mix_ratio) * blur_adjoint(dzb, cfg.blur_sigma)
    return dz, dbias


def texture_backward(tex: GarmentTexture, upstream, noise_seed=None):
    """Gradient of ``<upstream, pixels>`` w.r.t. control points ``(K, P, 2)`` and logit bias ``(K,)``."""
    dz, dbias = texture_backward_logits(tex, upstream, noise_seed)
    c = tex._cache
    gp = logit_field_backward(c["points"], c["uv"], c["cfg"].field_sigma, c["sums"], dz)
    return gp, dbias


def texture_grad(points, palette, mask, cfg, noise_seed, upstream, noise=None, forward=None):
    """Analytic ``d<upstream, pixels>/d points``.

    When ``forward`` is given it must come from the same noise seed.
    """
    if forward is None:
        forward = generate_texture(points, palette, mask, cfg, noise_seed, noise=noise)
    return texture_backward(forward, upstream, noise_seed)[0]


def resolve_noise_seed(cfg: GeneratorConfig, base_seed, epoch, sample):
    """Noise stream key: constant in ``fixed`` mode, fresh per epoch/sample otherwise."""
    if cfg.seed_mode == "fixed":
        return (int(base_seed), 0, 0)
    return (int(base_seed), int(epoch) + 1, int(sample))


def smoothness_loss(tex: GarmentTexture):
    """Mean squared difference between 4-neighbour valid texels; returns ``(value, d/dpixels)``."""
    p = tex.pixels
    m = tex.mask
    grad = np.zeros_like(p)
    total = 0.0
    count = 0
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(1, None)
        b[axis] = slice(None, -1)
        a, b = tuple(a), tuple(b)
        valid = (m[a] & m[b])[..., None]
        d = (p[a] - p[b]) * valid
        total += float((d * d).sum())
        count += int(valid.sum())
        grad[a] += 2.0 * d
        grad[b] -= 2.0 * d
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def in_palette_hull(tex: GarmentTexture, atol=1e-6):
    """True when every valid pixel is a convex palette combination (checked via stored weights)."""
    w = tex.weights[tex.mask]
    if np.any(w < -atol) or not np.allclose(w.sum(-1), 1.0, atol=atol):
        return False
    recon = w @ tex._cache["cols"]
    return bool(np.allclose(recon, tex.pixels[tex.mask], atol=atol))
