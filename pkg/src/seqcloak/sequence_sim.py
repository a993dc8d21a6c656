"""Walking-sequence synthesis and a surrogate garment propagator.

The surrogate replaces a learned cloth simulator. Garment vertices are
rigidly skinned to their nearest body capsule and displaced along the
capsule's radial direction by a traveling wrinkle wave whose amplitude,
spatial frequency and temporal lag come from the sampled cloth material.
Seam vertices (necklines, shoulder seams, waistbands) are pinned to body
points every frame. Geometry never depends on the texture.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import (CAPSULES, JOINT_INDEX, REST_POSITIONS, BodyPose, _tube,
                   forward_kinematics, nearest_capsule, skin)

DEFAULT_FPS = 30.0

MATERIAL_RANGES = {
    "mu": ("log-uniform", 15909.0, 63636.0),
    "lame_lambda": ("uniform", 3535.41, 93333.74),
    "kappa_b": ("log-uniform", 6.37e-8, 1.31e-3),
    "rho": ("uniform", 0.0434, 0.7),
}


class InvalidSequenceError(ValueError):
    pass


def _midpoint(name):
    kind, lo, hi = MATERIAL_RANGES[name]
    return float(np.sqrt(lo * hi)) if kind == "log-uniform" else 0.5 * (lo + hi)


@dataclass(frozen=True)
class MaterialParams:
    mu: float
    lame_lambda: float
    kappa_b: float
    rho: float

    def __post_init__(self):
        for name, (_, lo, hi) in MATERIAL_RANGES.items():
            val = getattr(self, name)
            if not lo <= val <= hi:
                raise ValueError(f"{name}={val} outside [{lo}, {hi}]")

    @classmethod
    def midpoint(cls):
        return cls(**{name: _midpoint(name) for name in MATERIAL_RANGES})

    def as_dict(self):
        return {"mu": self.mu, "lame_lambda": self.lame_lambda, "kappa_b": self.kappa_b, "rho": self.rho}


def sample_material(seed) -> MaterialParams:
    rng = np.random.default_rng(seed)
    vals = {}
    for name, (kind, lo, hi) in MATERIAL_RANGES.items():
        if kind == "log-uniform":
            v = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        else:
            v = float(rng.uniform(lo, hi))
        vals[name] = min(max(v, lo), hi)
    return MaterialParams(**vals)


# --------------------------------------------------------------------------- walking

def synth_walk(keyframes, frames_per_interval, speed=1.0, start_offset=1.0, fps=DEFAULT_FPS):
    """Linearly interpolate ``M + 1`` keyframes into ``T = M * H + 1`` poses.

    The root additionally advances along +x (body-local forward) at ``speed``
    m/s, starting ``start_offset`` meters behind the origin.
    """
    keys = list(keyframes)
    if len(keys) < 2:
        raise InvalidSequenceError(f"need at least 2 keyframes, got {len(keys)}")
    h = int(frames_per_interval)
    if h < 1:
        raise InvalidSequenceError(f"frames_per_interval must be >= 1, got {frames_per_interval}")
    m = len(keys) - 1
    ang = np.stack([k.joint_angles for k in keys])
    root = np.stack([k.root_translation for k in keys])
    poses = []
    for t in range(m * h + 1):
        i, r = divmod(t, h)
        if i == m:
            i, r = m - 1, h
        a = r / h
        angles = (1.0 - a) * ang[i] + a * ang[i + 1]
        trans = (1.0 - a) * root[i] + a * root[i + 1]
        trans = trans + np.array([-start_offset + speed * t / fps, 0.0, 0.0])
        poses.append(BodyPose(angles, trans))
    return poses


def write_pose_csv(path, poses):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "joint", "rx", "ry", "rz", "root_x", "root_y", "root_z"])
        for t, p in enumerate(poses):
            for j in range(p.joint_angles.shape[0]):
                wr.writerow([t, j, *map(repr, p.joint_angles[j].tolist()),
                             *map(repr, p.root_translation.tolist())])


def read_pose_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t, j = int(row["frame"]), int(row["joint"])
            ang = [float(row[k]) for k in ("rx", "ry", "rz")]
            root = [float(row[k]) for k in ("root_x", "root_y", "root_z")]
            rows.setdefault(t, ({}, root))[0][j] = ang
    poses = []
    for t in sorted(rows):
        angs, root = rows[t]
        poses.append(BodyPose(np.array([angs[j] for j in sorted(angs)]), np.array(root)))
    return poses


# --------------------------------------------------------------------------- garments

@dataclass
class GarmentMesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3)
    uv: np.ndarray  # (V, 2)
    anchors: list  # [(vertex index, (joint index, local offset (3,)))]
    garment_id: str
    # skinning / wrinkle rig, computed at build time
    bones: np.ndarray = field(default=None, repr=False)
    radial: np.ndarray = field(default=None, repr=False)
    seam_distance: np.ndarray = field(default=None, repr=False)
    angle: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("faces reference missing vertices")
        if self.uv.shape != (n, 2):
            raise ValueError("every vertex needs a UV coordinate")

    def with_vertices(self, vertices):
        return GarmentMesh(vertices, self.faces, self.uv, self.anchors, self.garment_id,
                           self.bones, self.radial, self.seam_distance, self.angle)


# UV islands (u0, v0, u1, v1); texture row 0 is v = 0
UPPER_ISLANDS = {"torso": (0.0, 0.0, 1.0, 0.68), "l_sleeve": (0.0, 0.72, 0.48, 1.0),
                 "r_sleeve": (0.52, 0.72, 1.0, 1.0)}
LOWER_ISLANDS = {"waist": (0.0, 0.0, 1.0, 0.2), "l_leg": (0.0, 0.24, 0.48, 1.0),
                 "r_leg": (0.52, 0.24, 1.0, 1.0)}


def uv_layout_mask(garment_id, h, w):
    """Validity mask of the built-in UV layout for a garment at ``h x w`` texels."""
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    if garment_id == "hat":
        return (uu - 0.5) ** 2 + (vv - 0.5) ** 2 <= 0.25
    islands = UPPER_ISLANDS if garment_id == "upper" else LOWER_ISLANDS
    mask = np.zeros((h, w), dtype=bool)
    for u0, v0, u1, v1 in islands.values():
        mask |= (uu >= u0) & (uu <= u1) & (vv >= v0) & (vv <= v1)
    return mask


def _island(uvt, box, flip=False):
    u0, v0, u1, v1 = box
    t = uvt[:, 1]
    if flip:
        t = 1.0 - t
    return np.stack([u0 + (u1 - u0) * uvt[:, 0], v0 + (v1 - v0) * t], axis=1)


class _Builder:
    def __init__(self, garment_id):
        self.garment_id = garment_id
        self.parts = []

    def add(self, verts, faces, uv, radial, seam_dist, angle, candidates, anchor_rows):
        self.parts.append((verts, faces, uv, radial, seam_dist, angle, candidates, anchor_rows))

    def build(self):
        verts, faces, uvs, radials, seams, angles, bones, anchors = [], [], [], [], [], [], [], []
        offset = 0
        for v, f, uv, rad, sd, ang, cand, anchor_idx in self.parts:
            cap = nearest_capsule(v, cand)
            b = np.array([CAPSULES[c][0] for c in cap])
            verts.append(v)
            faces.append(f + offset)
            uvs.append(uv)
            radials.append(rad)
            seams.append(sd)
            angles.append(ang)
            bones.append(b)
            for i in anchor_idx:
                anchors.append((offset + int(i), (int(b[i]), v[i] - REST_POSITIONS[b[i]])))
            offset += len(v)
        return GarmentMesh(np.vstack(verts), np.vstack(faces), np.vstack(uvs), anchors, self.garment_id,
                           np.concatenate(bones), np.vstack(radials), np.concatenate(seams),
                           np.concatenate(angles))


def make_garment(garment_id, n_around=48, n_len=28):
    """Procedural rest-pose garment mesh with UVs, anchors and skinning rig.

    ``upper`` is a short-sleeved shirt (torso tube + two sleeves), ``lower``
    a pair of trousers (two leg tubes), ``hat`` a rigid dome. Default
    resolution gives roughly 2,000 vertices for the two cloth garments.
    """
    b = _Builder(garment_id)
    cols = n_around + 1
    if garment_id == "upper":
        top, hem = 1.46, 0.84
        v, f, uvt, rad, length = _tube((0.0, top, 0.0), (0.0, hem, 0.0), 0.172, 0.165, n_around, n_len)
        # pull the top ring in to form the neckline
        v[:cols] = np.array([0.0, top + 0.02, 0.0]) + 0.075 * rad[:cols]
        sd = uvt[:, 1] * length
        b.add(v, f, _island(uvt, UPPER_ISLANDS["torso"]), rad, sd, 2 * np.pi * uvt[:, 0], [0, 1],
              np.arange(cols))
        n_sleeve = max(2, n_len // 4)
        n_s = max(8, n_around // 2)
        for side, key in ((-1, "l_sleeve"), (1, "r_sleeve")):
            sh = REST_POSITIONS[JOINT_INDEX["l_shoulder" if side < 0 else "r_shoulder"]]
            el = REST_POSITIONS[JOINT_INDEX["l_elbow" if side < 0 else "r_elbow"]]
            end = sh + 0.45 * (el - sh)
            v, f, uvt, rad, length = _tube(sh, end, 0.075, 0.07, n_s, n_sleeve)
            arm = [4, 5] if side < 0 else [7, 8]
            b.add(v, f, _island(uvt, UPPER_ISLANDS[key]), rad, uvt[:, 1] * length,
                  2 * np.pi * uvt[:, 0], arm, np.arange(n_s + 1))
    elif garment_id == "lower":
        n_w = max(2, n_len // 5)
        v, f, uvt, rad, length = _tube((0.0, 0.99, 0.0), (0.0, 0.80, 0.0), 0.158, 0.165, n_around, n_w)
        b.add(v, f, _island(uvt, LOWER_ISLANDS["waist"]), rad, uvt[:, 1] * length, 2 * np.pi * uvt[:, 0],
              [0], np.arange(cols))
        n_l = n_around // 2 + 8
        for side, key in ((-1, "l_leg"), (1, "r_leg")):
            hip = REST_POSITIONS[JOINT_INDEX["l_hip" if side < 0 else "r_hip"]]
            top = np.array([0.0, 0.90, hip[2]])
            bottom = np.array([0.0, 0.10, hip[2]])
            v, f, uvt, rad, length = _tube(top, bottom, 0.092, 0.068, n_l, n_len)
            legs = [10, 11] if side < 0 else [12, 13]
            b.add(v, f, _island(uvt, LOWER_ISLANDS[key]), rad, 0.1 + uvt[:, 1] * length,
                  2 * np.pi * uvt[:, 0], legs, [])
    elif garment_id == "hat":
        n_r = max(4, n_len // 2)
        center = np.array([0.0, 1.66, 0.0])
        radius = 0.115
        polar = np.linspace(0.0, 0.5 * np.pi, n_r + 1)
        az = np.linspace(0.0, 2 * np.pi, n_around + 1)
        pp, aa = np.meshgrid(polar, az, indexing="ij")
        dirs = np.stack([np.sin(pp) * np.cos(aa), np.cos(pp), np.sin(pp) * np.sin(aa)], axis=-1)
        v = (center + radius * dirs).reshape(-1, 3)
        rr = pp / (0.5 * np.pi)
        uv = np.stack([0.5 + 0.5 * rr * np.cos(aa), 0.5 + 0.5 * rr * np.sin(aa)], axis=-1).reshape(-1, 2)
        faces = []
        for i in range(n_r):
            for j in range(n_around):
                v0 = i * (n_around + 1) + j
                faces.append((v0, v0 + n_around + 1, v0 + 1))
                faces.append((v0 + 1, v0 + n_around + 1, v0 + n_around + 2))
        b.add(v, np.array(faces), np.clip(uv, 0.0, 1.0), dirs.reshape(-1, 3), np.zeros(len(v)),
              aa.ravel(), [3], [])
    else:
        raise ValueError(f"unknown garment {garment_id!r}")
    return b.build()


# --------------------------------------------------------------------------- dynamics

WAVE_AMPLITUDE = 0.012  # m at the material midpoint
WAVE_FREQUENCY = 3.0  # cycles per meter at the material midpoint
RAMP_LENGTH = 0.12  # m from the seam to full wrinkle amplitude


def deformation_amplitude(mat: MaterialParams):
    return WAVE_AMPLITUDE * np.sqrt(_midpoint("mu") / mat.mu)


def wrinkle_frequency(mat: MaterialParams):
    return WAVE_FREQUENCY * (mat.kappa_b / _midpoint("kappa_b")) ** -0.25


def material_lag(mat: MaterialParams):
    _, lo, hi = MATERIAL_RANGES["rho"]
    return 0.8 * (mat.rho - lo) / (hi - lo)


def simulate_garment(rest: GarmentMesh, poses, mat: MaterialParams, seed, yaw=0.0, fps=DEFAULT_FPS):
    """Per-frame garment geometry following ``poses``.

    Hats stay rigid on the head. Cloth garments get a wrinkle wave whose
    phase advances from frame to frame driven by the low-pass filtered body
    motion, so heavier cloth (larger ``rho``) reacts with more lag.
    """
    poses = list(poses)
    if not poses:
        return []
    if rest.bones is None:
        bones = np.array([CAPSULES[c][0] for c in nearest_capsule(rest.vertices)])
    else:
        bones = rest.bones
    local = rest.vertices - REST_POSITIONS[bones]
    rigid = rest.garment_id == "hat"
    rng = np.random.default_rng(seed)
    psi = rng.uniform(0.0, 2 * np.pi)
    amp = deformation_amplitude(mat)
    freq = wrinkle_frequency(mat)
    lag = material_lag(mat)
    inflate = 0.003 * np.sqrt(_midpoint("lame_lambda") / mat.lame_lambda)
    ramp = np.clip(rest.seam_distance / RAMP_LENGTH, 0.0, 1.0) if rest.seam_distance is not None else 1.0
    anchor_idx = np.array([a[0] for a in rest.anchors], dtype=np.int64)
    anchor_bone = np.array([a[1][0] for a in rest.anchors], dtype=np.int64)
    anchor_local = np.array([a[1][1] for a in rest.anchors]).reshape(-1, 3)

    out = []
    phase = psi
    energy = 0.0
    prev_angles = poses[0].joint_angles
    for pose in poses:
        rots, pos = forward_kinematics(pose, yaw)
        if rigid:
            verts = skin(local, bones, rots, pos)
        else:
            motion = float(np.abs(pose.joint_angles - prev_angles).sum())
            energy = lag * energy + (1.0 - lag) * motion
            phase = phase + 2 * np.pi * (0.08 + 0.5 * energy) * (1.0 - 0.5 * lag) * (30.0 / fps)
            wave = np.sin(2 * np.pi * freq * rest.seam_distance + 2.0 * rest.angle - phase)
            disp = (inflate + amp * (0.6 + min(energy, 1.0)) * wave) * ramp
            verts = skin(local + disp[:, None] * _rest_radial(rest, bones), bones, rots, pos)
        if len(anchor_idx):
            verts[anchor_idx] = skin(anchor_local, anchor_bone, rots, pos)
        prev_angles = pose.joint_angles
        out.append(rest.with_vertices(verts))
    return out


def _rest_radial(rest, bones):
    if rest.radial is not None:
        return rest.radial
    # fall back to the direction away from the bound capsule's axis
    rad = rest.vertices - REST_POSITIONS[bones]
    rad[:, 1] = 0.0
    n = np.linalg.norm(rad, axis=1, keepdims=True)
    return rad / np.where(n > 0, n, 1.0)


def anchor_deviation(meshes, poses, yaw=0.0):
    """Largest distance between a pinned vertex and its body attachment point."""
    worst = 0.0
    for mesh, pose in zip(meshes, poses):
        if not mesh.anchors:
            continue
        rots, pos = forward_kinematics(pose, yaw)
        idx = np.array([a[0] for a in mesh.anchors])
        bones = np.array([a[1][0] for a in mesh.anchors])
        loc = np.array([a[1][1] for a in mesh.anchors])
        target = skin(loc, bones, rots, pos)
        worst = max(worst, float(np.linalg.norm(mesh.vertices[idx] - target, axis=1).max()))
    return worst


def write_obj(path, mesh: GarmentMesh):
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.uv:
            fh.write(f"vt {t[0]:.6f} {1.0 - t[1]:.6f}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]}/{f[0]} {f[1]}/{f[1]} {f[2]}/{f[2]}\n")
