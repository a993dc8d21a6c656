"""Scene sampling and a texture-differentiable rasterizer.

Geometry is held constant with respect to the texture, so each rendered
frame is an affine function of the texel values. The rasterizer records
that map explicitly (pixel -> 4 texels, bilinear weights, shading gain) and
:meth:`Frame.pullback` applies its transpose.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import REST_POSITIONS, body_mesh, forward_kinematics, skin
from .cache import cached_array
from .sequence_sim import MaterialParams, sample_material

DEFAULT_RESOLUTION = 416
SKIN_COLOR = np.array([0.80, 0.62, 0.52])


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------- backgrounds

def _perlin(shape, cells, rng):
    """2D Perlin gradient noise in roughly [-1, 1]."""
    h, w = shape
    ang = rng.uniform(0, 2 * np.pi, (cells + 1, cells + 1))
    grads = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    y = np.linspace(0, cells, h, endpoint=False)
    x = np.linspace(0, cells, w, endpoint=False)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    y0 = yy.astype(int)
    x0 = xx.astype(int)
    fy = yy - y0
    fx = xx - x0

    def dot(iy, ix, dy, dx):
        g = grads[iy, ix]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = dot(y0, x0, fy, fx)
    n01 = dot(y0, x0 + 1, fy, fx - 1)
    n10 = dot(y0 + 1, x0, fy - 1, fx)
    n11 = dot(y0 + 1, x0 + 1, fy - 1, fx - 1)
    sy = fy * fy * fy * (fy * (fy * 6 - 15) + 10)
    sx = fx * fx * fx * (fx * (fx * 6 - 15) + 10)
    a = n00 + sx * (n01 - n00)
    b = n10 + sx * (n11 - n10)
    return np.sqrt(2.0) * (a + sy * (b - a))


def procedural_background(key, resolution, palette="outdoor"):
    """Seeded gradient-plus-Perlin-noise image in [0, 1]."""
    seed = int.from_bytes(hashlib.sha256(f"bg:{key}".encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    r = resolution
    if palette == "outdoor":
        top = np.array([0.45, 0.55, 0.65]) + rng.uniform(-0.12, 0.12, 3)
        bottom = np.array([0.45, 0.45, 0.40]) + rng.uniform(-0.12, 0.12, 3)
    else:
        top = rng.uniform(0.1, 0.9, 3)
        bottom = rng.uniform(0.1, 0.9, 3)
    t = np.linspace(0.0, 1.0, r)[:, None, None]
    img = (1 - t) * top + t * bottom
    img = np.broadcast_to(img, (r, r, 3)).copy()
    noise = 0.0
    for octave, amp in ((2, 0.5), (4, 0.25), (8, 0.125)):
        noise = noise + amp * _perlin((r, r), octave, rng)
    tint = rng.uniform(0.5, 1.0, 3)
    img += 0.12 * noise[..., None] * tint
    return np.clip(img, 0.0, 1.0)


def _split_of(key):
    h = int.from_bytes(hashlib.sha256(str(key).encode()).digest()[:8], "little")
    if h % 2 == 0:
        return "train"
    return "val" if (h // 2) % 2 == 0 else "test"


class BackgroundPool:
    """Background images keyed by id, split into train/val/test by hash parity.

    Either procedural (``n`` seeded images) or backed by an image directory.
    """

    def __init__(self, keys, loader, name="procedural"):
        self.keys = list(keys)
        self._loader = loader
        self.name = name
        self._cache = {}

    @classmethod
    def procedural(cls, n=64, palette="outdoor", prefix="proc"):
        keys = [f"{prefix}-{i}" for i in range(n)]
        return cls(keys, lambda key, r: procedural_background(key, r, palette), name=f"procedural-{palette}")

    @classmethod
    def from_directory(cls, path):
        from PIL import Image

        path = Path(path)
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        files = sorted(p.name for p in path.iterdir() if p.suffix.lower() in exts)

        def load(key, r):
            with Image.open(path / key) as im:
                return np.asarray(im.convert("RGB").resize((r, r), Image.BILINEAR), dtype=np.float64) / 255.0

        return cls(files, load, name=str(path))

    def split(self, split):
        if split in (None, "all"):
            return list(self.keys)
        return [k for k in self.keys if _split_of(k) == split]

    def load(self, key, resolution):
        ck = (key, resolution)
        if ck not in self._cache:
            self._cache[ck] = cached_array("backgrounds", f"{self.name}:{key}:{resolution}",
                                           lambda: self._loader(key, resolution))
        return self._cache[ck]


# --------------------------------------------------------------------------- scene sampling

@dataclass(frozen=True)
class SceneConfig:
    elevation: tuple = (40.0, 70.0)
    azimuth: tuple = (0.0, 360.0)
    distance: tuple = (4.0, 4.0)
    speed: tuple = (1.0, 1.0)
    start_offset: tuple = (1.0, 1.0)
    direction: tuple = (0.0, 0.0)  # walking yaw, degrees
    light_intensity: tuple = (0.8, 1.2)
    color_temperature: tuple = (-1.0, 1.0)  # mapped to an RGB gain
    resolution: int = DEFAULT_RESOLUTION
    fov: float = 40.0
    ambient: float = 0.45
    target_height: float = 0.9

    def __post_init__(self):
        lo, hi = self.elevation
        if not 0 <= lo <= hi <= 90:
            raise ConfigurationError(f"elevation range must lie in [0, 90], got {self.elevation}")
        if not self.distance[0] > 0:
            raise ConfigurationError("distance must be positive")
        lo, hi = self.light_intensity
        if not 0 < lo <= hi <= 4:
            raise ConfigurationError(f"light intensity must lie in (0, 4], got {self.light_intensity}")


@dataclass(frozen=True)
class SceneSample:
    camera: dict
    motion: dict
    light: dict
    background: str
    material: MaterialParams
    seed: int

    def __post_init__(self):
        if not 0 <= self.camera["elevation"] <= 90:
            raise ConfigurationError("elevation outside [0, 90]")
        if not 0 <= self.camera["azimuth"] < 360:
            raise ConfigurationError("azimuth outside [0, 360)")
        if not self.camera["distance"] > 0:
            raise ConfigurationError("distance must be positive")
        if not 0 < self.light["intensity"] <= 4:
            raise ConfigurationError("light intensity outside (0, 4]")

    def to_dict(self):
        d = asdict(self)
        d["material"] = self.material.as_dict()
        return d


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_scene(rng_seed, pools, split="train", cfg: SceneConfig = SceneConfig()) -> SceneSample:
    """Draw camera, motion, light, background and cloth material for one video."""
    if isinstance(pools, BackgroundPool):
        pools = [pools]
    candidates = [k for pool in pools for k in pool.split(split)]
    if not candidates:
        raise ConfigurationError(f"background pool has no images in split {split!r}")
    rng = np.random.default_rng(rng_seed)
    elevation = _uniform(rng, cfg.elevation)
    azimuth = _uniform(rng, cfg.azimuth) % 360.0
    distance = _uniform(rng, cfg.distance)
    motion = {"speed": _uniform(rng, cfg.speed), "start_offset": _uniform(rng, cfg.start_offset),
              "direction": _uniform(rng, cfg.direction)}
    temp = _uniform(rng, cfg.color_temperature)
    d = rng.normal(size=3)
    d[1] = abs(d[1]) + 0.5
    light = {"intensity": _uniform(rng, cfg.light_intensity),
             "gain": [1.0 + 0.08 * temp, 1.0, 1.0 - 0.08 * temp],
             "direction": (d / np.linalg.norm(d)).tolist()}
    background = candidates[int(rng.integers(len(candidates)))]
    material = sample_material(int(rng.integers(2**63 - 1)))
    seed = int(rng.integers(2**63 - 1))
    return SceneSample({"elevation": elevation, "azimuth": azimuth, "distance": distance},
                       motion, light, background, material, seed)


# --------------------------------------------------------------------------- camera

def camera_pose(scene: SceneSample, target_height=0.9):
    """Camera center and world->camera rotation (rows: right, down, forward)."""
    e = np.radians(scene.camera["elevation"])
    a = np.radians(scene.camera["azimuth"])
    d = scene.camera["distance"]
    target = np.array([0.0, target_height, 0.0])
    eye = target + d * np.array([np.cos(e) * np.cos(a), np.sin(e), np.cos(e) * np.sin(a)])
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    n = np.linalg.norm(right)
    right = right / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])
    down = np.cross(fwd, right)
    return eye, np.stack([right, down, fwd])


def project(points, eye, rot, resolution, fov):
    """Pinhole projection to pixel coordinates; returns ``(xy, depth)``."""
    cam = (np.asarray(points) - eye) @ rot.T
    f = 0.5 * resolution / np.tan(np.radians(fov) / 2.0)
    z = cam[:, 2]
    safe = np.where(z > 1e-6, z, 1e-6)
    xy = np.stack([f * cam[:, 0] / safe, f * cam[:, 1] / safe], axis=1) + 0.5 * resolution
    return xy, z


# --------------------------------------------------------------------------- frames

@dataclass
class TexelJacobian:
    """Sparse linear map texels -> frame pixels for one garment.

    ``pixel`` (n,) flat pixel index, ``texel`` (n, 4) flat texel index,
    ``weight`` (n, 4) bilinear weights, ``gain`` (n, 3) per-channel shading,
    zeroed where the output was clipped.
    """

    pixel: np.ndarray
    texel: np.ndarray
    weight: np.ndarray
    gain: np.ndarray
    texture_shape: tuple

    def apply(self, texels, resolution):
        """Garment contribution to the image (exactly what the renderer wrote, before clipping)."""
        flat = np.asarray(texels).reshape(-1, 3)
        col = np.einsum("nk,nkc->nc", self.weight, flat[self.texel])
        return col

    def pullback(self, grad_image):
        h, w = self.texture_shape
        g = np.asarray(grad_image).reshape(-1, 3)[self.pixel] * self.gain  # (n, 3)
        out = np.zeros((h * w, 3))
        idx = self.texel.ravel()
        for c in range(3):
            vals = (self.weight * g[:, c:c + 1]).ravel()
            out[:, c] = np.bincount(idx, weights=vals, minlength=h * w)
        return out.reshape(h, w, 3)


@dataclass
class Frame:
    image: np.ndarray  # (R, R, 3) in [0, 1]
    gt_box: np.ndarray  # (4,) x1, y1, x2, y2 in pixels
    jacobians: dict = field(default_factory=dict)
    empty: bool = False
    garment_pixels: dict = field(default_factory=dict)
    index: int = 0

    def pullback(self, grad_image):
        """Gradient of a scalar w.r.t. every garment texture given its gradient w.r.t. the image."""
        return {g: jac.pullback(grad_image) for g, jac in self.jacobians.items()}


def _face_coverage(xy, faces, resolution):
    """Candidate (face, pixel) pairs whose pixel center lies in the projected triangle."""
    tri = xy[faces]  # (F, 3, 2)
    lo = np.ceil(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.floor(tri.max(axis=1) - 0.5).astype(np.int64)
    lo = np.clip(lo, 0, resolution)
    hi = np.clip(hi, -1, resolution - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
    fidx = np.repeat(np.arange(len(faces)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    off = np.arange(total) - start
    px = lo[fidx, 0] + off % nx[fidx]
    py = lo[fidx, 1] + off // nx[fidx]
    cx = px + 0.5
    cy = py + 0.5
    a, b, c = tri[fidx, 0], tri[fidx, 1], tri[fidx, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    w0 = (b[:, 0] - cx) * (c[:, 1] - cy) - (b[:, 1] - cy) * (c[:, 0] - cx)
    w1 = (c[:, 0] - cx) * (a[:, 1] - cy) - (c[:, 1] - cy) * (a[:, 0] - cx)
    w2 = (a[:, 0] - cx) * (b[:, 1] - cy) - (a[:, 1] - cy) * (b[:, 0] - cx)
    nz = np.abs(area) > 1e-12
    safe = np.where(nz, area, 1.0)
    bary = np.stack([w0, w1, w2], axis=1) / safe[:, None]
    inside = nz & np.all(bary >= -1e-9, axis=1)
    return fidx[inside], (py * resolution + px)[inside], bary[inside]


def _bilinear(uv, mask):
    """Texel indices ``(n, 4)`` and weights ``(n, 4)``; weights restricted to valid texels."""
    h, w = mask.shape
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1).clip(0, w - 1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1).clip(0, h - 1)
    wt = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    idx = ys * w + xs
    wt = wt * mask.ravel()[idx]
    s = wt.sum(axis=1, keepdims=True)
    wt = np.where(s > 0, wt / np.where(s > 0, s, 1.0), 0.0)
    return idx, wt


def _texture_pixels(texture):
    if hasattr(texture, "pixels"):
        return np.asarray(texture.pixels, dtype=np.float64), np.asarray(texture.mask, dtype=bool)
    arr = np.asarray(texture, dtype=np.float64)
    return arr, np.ones(arr.shape[:2], dtype=bool)


class Renderer:
    """Renders the body plus textured garments for one scene."""

    def __init__(self, scene: SceneSample, pools=None, cfg: SceneConfig = SceneConfig(), background=None,
                 body_resolution=(8, 2)):
        self.scene = scene
        self.cfg = cfg
        r = cfg.resolution
        if background is None:
            if pools is None:
                raise ConfigurationError("need background pools or an explicit background image")
            pools = [pools] if isinstance(pools, BackgroundPool) else pools
            background = next(p.load(scene.background, r) for p in pools if scene.background in p.keys)
        self.background = np.asarray(background, dtype=np.float64)
        self.eye, self.rot = camera_pose(scene, cfg.target_height)
        self.body_rest, self.body_faces, self.body_bones = body_mesh(*body_resolution)
        self.yaw = np.radians(scene.motion.get("direction", 0.0))
        light = scene.light
        self.light_dir = np.asarray(light["direction"], dtype=np.float64)
        self.light_rgb = light["intensity"] * np.asarray(light["gain"], dtype=np.float64)

    def render_frame(self, pose, garments, textures, index=0) -> Frame:
        """``garments``: ``{garment_id: GarmentMesh}`` for this frame; ``textures`` keyed likewise."""
        r = self.cfg.resolution
        rots, pos = forward_kinematics(pose, self.yaw)
        body_v = skin(self.body_rest - REST_POSITIONS[self.body_bones], self.body_bones, rots, pos)
        names = sorted(garments)
        verts = [body_v] + [garments[g].vertices for g in names]
        faces, owner, offset = [], [], 0
        for i, v in enumerate(verts):
            f = self.body_faces if i == 0 else garments[names[i - 1]].faces
            faces.append(f + offset)
            owner.append(np.full(len(f), i))
            offset += len(v)
        all_v = np.vstack(verts)
        faces = np.vstack(faces)
        owner = np.concatenate(owner)
        xy, depth = project(all_v, self.eye, self.rot, r, self.cfg.fov)

        # gt box: every body and garment vertex
        lo = xy.min(axis=0)
        hi = xy.max(axis=0)
        box = np.array([max(lo[0], 0.0), max(lo[1], 0.0), min(hi[0], float(r)), min(hi[1], float(r))])
        empty = bool(box[2] <= box[0] or box[3] <= box[1])
        if empty:
            box = np.zeros(4)

        visible = np.all(depth[faces] > 1e-3, axis=1)
        faces_v = faces[visible]
        owner_v = owner[visible]
        fidx, pix, bary = _face_coverage(xy, faces_v, r)
        image = self.background.copy().reshape(-1, 3)
        frame = Frame(image=None, gt_box=box, empty=empty, index=index)
        if len(pix):
            # visibility by perspective-correct per-pixel depth; ties go to the lower face index
            pix_depth = 1.0 / (bary / depth[faces_v[fidx]]).sum(axis=1)
            order = np.lexsort((fidx, pix_depth, pix))
            pix_s = pix[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix_s[1:] != pix_s[:-1]
            sel = order[first]
            fidx, pix, bary = fidx[sel], pix[sel], bary[sel]
            tri = faces_v[fidx]
            own = owner_v[fidx]

            # flat Lambertian shading with camera-facing normals
            p0, p1, p2 = all_v[tri[:, 0]], all_v[tri[:, 1]], all_v[tri[:, 2]]
            n = np.cross(p1 - p0, p2 - p0)
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
            view = self.eye - (p0 + p1 + p2) / 3.0
            n *= np.where((n * view).sum(1) < 0, -1.0, 1.0)[:, None]
            lam = np.clip(n @ self.light_dir, 0.0, None)
            shade = (self.cfg.ambient + (1.0 - self.cfg.ambient) * lam)[:, None] * self.light_rgb[None, :]

            uv_all = np.vstack([np.zeros((len(body_v), 2))] + [garments[g].uv for g in names])
            body = own == 0
            image[pix[body]] = np.clip(SKIN_COLOR * shade[body], 0.0, 1.0)
            for gi, g in enumerate(names, start=1):
                sel_g = own == gi
                if not np.any(sel_g):
                    frame.garment_pixels[g] = 0
                    continue
                tex, tmask = _texture_pixels(textures[g])
                # perspective-correct UV interpolation
                tri_g = tri[sel_g]
                bz = bary[sel_g] / depth[tri_g]
                bz /= bz.sum(axis=1, keepdims=True)
                uv = np.einsum("nk,nkd->nd", bz, uv_all[tri_g])
                tidx, tw = _bilinear(uv, tmask)
                col = np.einsum("nk,nkc->nc", tw, tex.reshape(-1, 3)[tidx])
                raw = col * shade[sel_g]
                inside = (raw >= 0.0) & (raw <= 1.0)
                image[pix[sel_g]] = np.clip(raw, 0.0, 1.0)
                frame.jacobians[g] = TexelJacobian(pix[sel_g], tidx, tw, shade[sel_g] * inside, tmask.shape)
                frame.garment_pixels[g] = int(sel_g.sum())
        frame.image = image.reshape(r, r, 3)
        return frame

    def render_sequence(self, poses, garment_frames, textures):
        """``garment_frames``: ``{garment_id: [GarmentMesh per frame]}``."""
        frames = []
        for t, pose in enumerate(poses):
            meshes = {g: seq[t] for g, seq in garment_frames.items()}
            frames.append(self.render_frame(pose, meshes, textures, index=t))
        return frames


def render_sequence(meshes, textures, scene, poses, pools=None, cfg: SceneConfig = SceneConfig(),
                    background=None):
    return Renderer(scene, pools, cfg, background).render_sequence(poses, meshes, textures)


def save_frames(out_dir, video_id, frames, scene: SceneSample | None = None):
    """PNG per frame plus ``manifest.json`` (video id, scene sample, frame count, gt boxes)."""
    from PIL import Image

    out = Path(out_dir) / str(video_id)
    out.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        arr = np.clip(np.rint(fr.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(out / f"frame_{fr.index:04d}.png")
    manifest = {
        "video_id": str(video_id),
        "scene": scene.to_dict() if scene is not None else None,
        "frame_count": len(frames),
        "gt_boxes": [fr.gt_box.tolist() for fr in frames],
        "empty": [bool(fr.empty) for fr in frames],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out
