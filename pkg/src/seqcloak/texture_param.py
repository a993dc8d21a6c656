"""Palette + control-point parameterization of a UV texture.

Two K-Means stages turn a baked UV texture into a compact representation:

1. colors of the valid texels are clustered in 8-bit sRGB and every centroid
   is locked through a printer gamut operator;
2. for every locked color, the UV coordinates of the texels assigned to it
   are clustered into at most ``p_max`` control points, padded by midpoint
   insertion up to exactly ``p_max``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .gamut import GamutOperator, InkLimitGamut, gamut_from_id

logger = logging.getLogger(__name__)

GARMENT_IDS = ("upper", "lower", "hat")
KMEANS_MAX_ITER = 300
STAGE1_MAX_SAMPLES = 200_000
DEFAULT_K = 6
DEFAULT_P_MAX = 600


class InvalidInputError(ValueError):
    pass


def _check_garment(garment_id):
    if garment_id not in GARMENT_IDS:
        raise InvalidInputError(f"garment_id must be one of {GARMENT_IDS}, got {garment_id!r}")


@dataclass(frozen=True)
class UvTexture:
    """Baked UV texture (``uint8`` sRGB) with its validity mask."""

    pixels: np.ndarray
    mask: np.ndarray
    garment_id: str = "upper"

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        mask = np.asarray(self.mask).astype(bool)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidInputError(f"texture must be HxWx3, got shape {pixels.shape}")
        h, w = pixels.shape[:2]
        if h < 8 or w < 8:
            raise InvalidInputError(f"texture must be at least 8x8, got {h}x{w}")
        if mask.shape != (h, w):
            raise InvalidInputError(f"mask shape {mask.shape} does not match texture {h}x{w}")
        if not mask.any():
            raise InvalidInputError("mask has no valid pixel")
        if np.issubdtype(pixels.dtype, np.floating):
            if not np.all(pixels == np.round(pixels)):
                raise InvalidInputError("texture pixels must be integers in [0, 255]")
        if pixels.min() < 0 or pixels.max() > 255:
            raise InvalidInputError("texture pixels must lie in [0, 255]")
        _check_garment(self.garment_id)
        object.__setattr__(self, "pixels", pixels.astype(np.uint8))
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.pixels.shape[:2]

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(np.packbits(self.mask).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LockedPalette:
    colors: np.ndarray  # (K, 3) float, integer-valued sRGB
    gamut_id: str

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.ndim != 2 or colors.shape[1] != 3:
            raise InvalidInputError(f"palette must be Kx3, got {colors.shape}")
        if not 1 <= len(colors) <= 32:
            raise InvalidInputError(f"palette size must be in [1, 32], got {len(colors)}")
        if len(np.unique(colors, axis=0)) != len(colors):
            raise InvalidInputError("palette colors must be pairwise distinct")
        object.__setattr__(self, "colors", colors)

    @property
    def k(self) -> int:
        return len(self.colors)


@dataclass(frozen=True)
class ControlPointSet:
    points: np.ndarray  # (K, P_max, 2), (u, v) in [0, 1]
    garment_id: str = "upper"
    empty_clusters: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise InvalidInputError(f"control points must be K x P_max x 2, got {pts.shape}")
        if np.any(pts < 0) or np.any(pts > 1):
            raise InvalidInputError("control points must lie in the unit square")
        object.__setattr__(self, "points", pts)

    @property
    def k(self):
        return self.points.shape[0]

    @property
    def p_max(self):
        return self.points.shape[1]

    def with_points(self, points) -> "ControlPointSet":
        return ControlPointSet(points, self.garment_id, self.empty_clusters)


@dataclass(frozen=True)
class TextureParams:
    """Optimizable texture state: locked palette plus control points."""

    palette: LockedPalette
    control_points: ControlPointSet
    mask: np.ndarray
    seed: int = 0
    source_texture_sha256: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def garment_id(self):
        return self.control_points.garment_id

    def with_points(self, points) -> "TextureParams":
        return TextureParams(self.palette, self.control_points.with_points(points), self.mask,
                             self.seed, self.source_texture_sha256, dict(self.extra))


# --------------------------------------------------------------------------- k-means

class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list


def _assign(x, c):
    if len(c) > 64 and x.shape[1] <= 3:
        d, idx = cKDTree(c).query(x, k=1)
        return idx.astype(np.int64), d * d
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    step = max(1, 2_000_000 // max(len(c), 1))
    for s in range(0, len(x), step):
        # exact differences keep ties resolvable (lowest index wins)
        diff = x[s:s + step, None, :] - c[None, :, :]
        d = np.einsum("nkd,nkd->nk", diff, diff)
        labels[s:s + step] = d.argmin(1)
        dist[s:s + step] = d[np.arange(len(d)), labels[s:s + step]]
    return labels, dist


def kmeans_plusplus(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centers[0] = x[first]
    closest = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, ((x - centers[i]) ** 2).sum(1))
    return centers


def kmeans_fit(samples, k, seed, max_iter=KMEANS_MAX_ITER) -> KMeansResult:
    """K-Means++ seeded Lloyd iterations with full bookkeeping.

    Stops after ``max_iter`` Lloyd iterations or as soon as an assignment
    step leaves every label unchanged. Empty clusters are re-seeded at the
    sample farthest from its current centroid.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1:
        raise InvalidInputError(f"cluster count k must be >= 1, got {k}")
    if n < k:
        raise InvalidInputError(f"need at least k={k} samples for k clusters, got {n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    labels, dist = _assign(x, centroids)
    history = [float(dist.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = ((x - centroids[labels]) ** 2).sum(1)
            taken = set()
            for c in np.flatnonzero(~nonempty):
                order = np.argsort(-own, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centroids[c] = x[idx]
                own[idx] = 0.0
        new_labels, dist = _assign(x, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(centroids, labels, history[-1], n_iter, history)


def kmeans(samples, k, seed):
    """Cluster ``samples`` into ``k`` groups; returns ``(centroids, labels)``."""
    res = kmeans_fit(samples, k, seed)
    return res.centroids, res.labels


# --------------------------------------------------------------------------- palette

def lock_palette(raw_centroids, gamut: GamutOperator | None = None) -> LockedPalette:
    """Project centroids through ``gamut`` and round to 8-bit, keeping colors distinct."""
    gamut = gamut or InkLimitGamut()
    locked = np.rint(gamut(np.clip(np.asarray(raw_centroids, dtype=np.float64), 0, 255)))
    locked = np.clip(locked, 0, 255)
    out = []
    seen = set()
    for color in locked:
        color = _nudge_distinct(color, seen)
        seen.add(tuple(color))
        out.append(color)
    return LockedPalette(np.array(out), gamut.gamut_id)


def _nudge_distinct(color, seen):
    c = color.copy()
    while tuple(c) in seen:
        ch = int(np.argmax(c))
        if c[ch] >= 255:
            break
        c[ch] += 1
    if tuple(c) not in seen:
        return c
    # saturated channel: search outward from the original color
    for delta in range(1, 256):
        for ch in np.argsort(-color, kind="stable"):
            for sign in (1, -1):
                cand = color.copy()
                cand[ch] += sign * delta
                if 0 <= cand[ch] <= 255 and tuple(cand) not in seen:
                    return cand
    raise InvalidInputError("cannot make palette colors distinct")


def assign_to_palette(colors, palette: LockedPalette):
    """Nearest palette index per color (Euclidean sRGB, lowest index on ties)."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    return _assign(colors, palette.colors)[0]


def uv_grid(h, w):
    """UV coordinates of texel centers, shape ``(h, w, 2)``; row ``i`` maps to ``v=(i+0.5)/h``."""
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def extract_control_points(tex: UvTexture, palette: LockedPalette, p_max, seed) -> ControlPointSet:
    if p_max < 1:
        raise InvalidInputError(f"p_max must be >= 1, got {p_max}")
    if not np.asarray(tex.mask).any():
        raise InvalidInputError("mask has no valid pixel")
    rng = np.random.default_rng([seed, 2])
    h, w = tex.shape
    uv = uv_grid(h, w)[tex.mask]
    labels = assign_to_palette(tex.pixels[tex.mask], palette)
    points = np.empty((palette.k, p_max, 2))
    empty = []
    for c in range(palette.k):
        xc = uv[labels == c]
        if len(xc) == 0:
            empty.append(c)
            warnings.warn(f"color cluster {c} has no pixels; control points re-seeded uniformly "
                          "over the mask", stacklevel=2)
            points[c] = uv[rng.integers(len(uv), size=p_max)]
            continue
        n_centers = min(p_max, len(xc))
        centers, _ = kmeans(xc, n_centers, seed=[seed, 3, c])
        pts = list(centers)
        while len(pts) < p_max:
            if len(pts) == 1:
                i = j = 0
            else:
                i, j = rng.choice(len(pts), size=2, replace=False)
            pts.append(0.5 * (pts[i] + pts[j]))
        points[c] = np.array(pts)
    return ControlPointSet(np.clip(points, 0.0, 1.0), tex.garment_id, tuple(empty))


def build_texture_params(tex: UvTexture, k=DEFAULT_K, p_max=DEFAULT_P_MAX, seed=0,
                         gamut: GamutOperator | None = None) -> TextureParams:
    """Both K-Means stages end to end."""
    gamut = gamut or InkLimitGamut()
    rng = np.random.default_rng([seed, 1])
    colors = tex.pixels[tex.mask].astype(np.float64)
    if len(colors) > STAGE1_MAX_SAMPLES:
        colors = colors[np.sort(rng.choice(len(colors), STAGE1_MAX_SAMPLES, replace=False))]
    centroids, _ = kmeans(colors, k, seed=[seed, 0])
    palette = lock_palette(centroids, gamut)
    points = extract_control_points(tex, palette, p_max, seed)
    logger.info("palette %s, %d control points", palette.colors.astype(int).tolist(), points.points.shape[0] * p_max)
    return TextureParams(palette, points, tex.mask.copy(), seed, tex.sha256())


# --------------------------------------------------------------------------- io

def load_texture(texture_path, mask_path, garment_id="upper") -> UvTexture:
    from PIL import Image

    for p in (texture_path, mask_path):
        if not Path(p).is_file():
            raise InvalidInputError(f"no such file: {p}")
    try:
        with Image.open(texture_path) as im:
            pixels = np.asarray(im.convert("RGB"))
        with Image.open(mask_path) as im:
            mask = np.asarray(im.convert("L")) != 0
    except OSError as exc:
        raise InvalidInputError(f"cannot read image: {exc}") from exc
    return UvTexture(pixels, mask, garment_id)


def save_texture_png(path, pixels, mask=None):
    from PIL import Image

    arr = np.asarray(pixels)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.rint(arr * 255.0), 0, 255)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), "RGB").save(path)
    if mask is not None:
        Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(
            Path(path).with_name(Path(path).stem + "_mask.png"))


def params_to_dict(params: TextureParams) -> dict:
    pts = params.control_points
    d = {
        "garment_id": pts.garment_id,
        "palette": params.palette.colors.astype(int).tolist(),
        "control_points": pts.points.tolist(),
        "p_max": pts.p_max,
        "gamut_id": params.palette.gamut_id,
        "seed": params.seed,
        "source_texture_sha256": params.source_texture_sha256,
        "mask": _encode_mask(params.mask),
    }
    if "logit_bias" in params.extra:
        d["logit_bias"] = np.asarray(params.extra["logit_bias"], dtype=np.float64).tolist()
    return d


def _encode_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    return {"shape": list(mask.shape), "runs": _rle(mask.ravel())}


def _rle(flat):
    # alternating run lengths, starting with a run of False
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


def _decode_mask(obj):
    shape = tuple(obj["shape"])
    vals = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, state = 0, False
    for r in obj["runs"]:
        vals[pos:pos + r] = state
        pos += r
        state = not state
    return vals.reshape(shape)


def params_from_dict(d: dict) -> TextureParams:
    pts = np.asarray(d["control_points"], dtype=np.float64)
    if pts.shape[1] != d["p_max"]:
        raise InvalidInputError("control point count does not match p_max")
    palette = LockedPalette(np.asarray(d["palette"], dtype=np.float64), d["gamut_id"])
    cps = ControlPointSet(pts, d["garment_id"])
    mask = _decode_mask(d["mask"]) if "mask" in d else np.ones((64, 64), dtype=bool)
    extra = {}
    if "logit_bias" in d:
        extra["logit_bias"] = np.asarray(d["logit_bias"], dtype=np.float64)
    return TextureParams(palette, cps, mask, d.get("seed", 0), d.get("source_texture_sha256", ""), extra)


def save_params(path, params):
    """Write one parameter set, or a ``{garment_id: params}`` mapping, as JSON.

    A single garment is always written as a bare object, so files round-trip byte for byte.
    """
    if isinstance(params, dict) and len(params) == 1:
        params = next(iter(params.values()))
    if isinstance(params, TextureParams):
        payload = params_to_dict(params)
    else:
        payload = {"garments": [params_to_dict(p) for p in params.values()]}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_params(path) -> dict:
    """Load a parameter JSON file as a ``{garment_id: TextureParams}`` mapping."""
    d = json.loads(Path(path).read_text())
    items = d["garments"] if "garments" in d else [d]
    return {it["garment_id"]: params_from_dict(it) for it in items}


def palette_gamut(params: TextureParams) -> GamutOperator:
    return gamut_from_id(params.palette.gamut_id)
