"""Scene pipeline shared by the optimizer, the CLI and evaluation.

One :class:`ScenePipeline` bundles everything needed to turn garment
textures plus a scene seed into rendered frames and detections: the walk
cycle, the garment rest meshes, the background pools, and the renderer and
detector settings. :func:`smoke_pipeline` builds the small desk-scale scene
set used by the shipped smoke configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import canonical_walk_cycle
from .cache import cached_object
from .detector import ToyDetectorConfig, iou_matrix, toy_detect, window_scores
from .renderer import BackgroundPool, Renderer, SceneConfig, sample_scene
from .sequence_sim import make_garment, simulate_garment, synth_walk, uv_layout_mask
from .texture_gen import GeneratorConfig, generate_texture
from .texture_param import TextureParams, UvTexture, build_texture_params


@dataclass
class ScenePipeline:
    scene_cfg: SceneConfig = field(default_factory=SceneConfig)
    pools: list = field(default_factory=list)
    frames_per_interval: int = 12
    garment_ids: tuple = ("upper", "lower")
    mesh_resolution: tuple = (48, 28)
    body_resolution: tuple = (8, 2)
    gen_cfg: GeneratorConfig = field(default_factory=GeneratorConfig)
    det_cfg: ToyDetectorConfig = field(default_factory=ToyDetectorConfig)
    keyframes: list = field(default_factory=canonical_walk_cycle)

    def __post_init__(self):
        self._rest = {}

    def rest_mesh(self, garment_id):
        if garment_id not in self._rest:
            res = tuple(self.mesh_resolution)
            self._rest[garment_id] = cached_object("meshes", f"{garment_id}:{res}",
                                                   lambda: make_garment(garment_id, *res))
        return self._rest[garment_id]

    def sample(self, seed, split="train"):
        return sample_scene(seed, self.pools, split, self.scene_cfg)

    def simulate(self, scene):
        """Body poses and per-frame garment meshes for one scene sample."""
        mo = scene.motion
        poses = synth_walk(self.keyframes, self.frames_per_interval, mo["speed"], mo["start_offset"])
        yaw = np.radians(mo.get("direction", 0.0))
        meshes = {g: simulate_garment(self.rest_mesh(g), poses, scene.material, [scene.seed, i], yaw=yaw)
                  for i, g in enumerate(self.garment_ids)}
        return poses, meshes

    def render(self, scene, textures, simulated=None):
        poses, meshes = simulated if simulated is not None else self.simulate(scene)
        renderer = Renderer(scene, self.pools, self.scene_cfg, body_resolution=self.body_resolution)
        return renderer.render_sequence(poses, meshes, textures)

    def detect(self, frames, video_id=""):
        return [toy_detect(f, self.det_cfg, video_id) for f in frames]

    def textures(self, params: dict, noise_seed):
        """Generator output for every garment with one shared noise key."""
        return {g: generate_texture(p.control_points, p.palette, p.mask, self.gen_cfg, noise_seed,
                                    logit_bias=p.extra.get("logit_bias"))
                for g, p in params.items()}


def evaluate(pipeline: ScenePipeline, params_or_textures: dict, n_videos, seed, split="test", prefix="vid"):
    """Render and detect ``n_videos`` held-out scene samples.

    ``params_or_textures`` maps garment ids either to :class:`TextureParams`
    (exported once with a fixed noise draw, like a printed garment) or to
    ready textures. Returns ``{video_id: [DetectionRecord]}``.
    """
    textures = export_textures(pipeline, params_or_textures, seed)
    out = {}
    for v in range(n_videos):
        vid = f"{prefix}{v:04d}"
        scene = pipeline.sample([int(seed), 7, v], split)
        out[vid] = pipeline.detect(pipeline.render(scene, textures), vid)
    return out


def export_textures(pipeline: ScenePipeline, params_or_textures: dict, seed=0):
    items = dict(params_or_textures)
    if all(isinstance(p, TextureParams) for p in items.values()):
        return pipeline.textures(items, (int(seed), 0, 0))
    return items


# --------------------------------------------------------------------------- smoke scene set

SMOKE_TEXTURE_SIZE = 64
# a dark garment with a colorful print; the light colors give the attack room to work with
SMOKE_COLORS = np.array([
    [25, 25, 25], [120, 20, 25], [200, 40, 40], [30, 40, 110], [240, 200, 40], [245, 245, 245],
], dtype=np.float64)
SMOKE_COLOR_SHARE = np.array([0.3, 0.25, 0.2, 0.15, 0.05, 0.05])
SMOKE_GARMENTS = ("upper", "lower", "hat")


def smoke_scene_config(resolution=128):
    # soft overcast light keeps shading from dominating the person/background contrast
    return SceneConfig(resolution=resolution, ambient=0.7)


SMOKE_P_MAX = 64
SMOKE_K = 6


def coverage_sigma(n_points):
    """Kernel width that lets ``n_points`` roughly evenly spaced points cover the unit square."""
    return 1.0 / np.sqrt(n_points)


def smoke_pipeline() -> ScenePipeline:
    """Desk-scale scene set: procedural backgrounds, coarse meshes, short walks."""
    from .config import smoke_config

    return smoke_config().pipeline()


def starting_texture(garment_id, size=SMOKE_TEXTURE_SIZE, seed=0):
    """A conspicuous multi-color blob pattern used as the unoptimized garment texture."""
    rng = np.random.default_rng([seed, 11, sum(map(ord, garment_id))])
    mask = uv_layout_mask(garment_id, size, size)
    yy, xx = np.mgrid[0:size, 0:size] / size
    n_blobs = 40
    centers = rng.uniform(0, 1, size=(n_blobs, 2))
    counts = np.maximum(1, np.round(SMOKE_COLOR_SHARE * n_blobs)).astype(int)
    labels = rng.permutation(np.repeat(np.arange(len(SMOKE_COLORS)), counts))[:n_blobs]
    d2 = (xx[..., None] - centers[:, 0]) ** 2 + (yy[..., None] - centers[:, 1]) ** 2
    pix = SMOKE_COLORS[labels[np.argmin(d2, axis=-1)]]
    return UvTexture(np.rint(pix).astype(np.uint8), mask, garment_id)


def smoke_params(garment_ids=SMOKE_GARMENTS, k=SMOKE_K, p_max=SMOKE_P_MAX, seed=0, size=SMOKE_TEXTURE_SIZE):
    return {g: build_texture_params(starting_texture(g, size, seed), k=k, p_max=p_max, seed=seed)
            for g in garment_ids}


def person_contrast(image, gt_box, det_cfg: ToyDetectorConfig, min_iou=0.3):
    """Largest window contrast among windows that overlap the person box by ``min_iou``."""
    _, diff, inner, _ = window_scores(image, det_cfg)
    ov = iou_matrix(inner, gt_box)
    sel = ov >= min_iou
    if not np.any(sel):
        return 0.0
    return float(np.abs(diff[sel]).mean(axis=1).max())


def calibration_contrasts(pipeline: ScenePipeline, params: dict, n_videos=8, seed=0, split="val"):
    """Median person-window contrast with and without the person (background only)."""
    textures = export_textures(pipeline, params, seed)
    with_person, without = [], []
    for v in range(n_videos):
        scene = pipeline.sample([int(seed), 5, v], split)
        bg = pipeline.pools[0].load(scene.background, pipeline.scene_cfg.resolution) \
            if len(pipeline.pools) == 1 else None
        for fr in pipeline.render(scene, textures):
            if fr.empty:
                continue
            with_person.append(person_contrast(fr.image, fr.gt_box, pipeline.det_cfg))
            if bg is not None:
                without.append(person_contrast(bg, fr.gt_box, pipeline.det_cfg))
    return float(np.median(without)), float(np.median(with_person))
