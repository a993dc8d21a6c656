"""Parametric articulated capsule body (14 joints, standard adult male proportions).

Frame convention: y up, the body faces +x at zero yaw, its right side is +z.
Joint angles are local XYZ Euler rotations (radians) about each joint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

JOINTS = (
    "pelvis", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "r_hip", "r_knee",
)
J = len(JOINTS)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 0, 12])

PELVIS_HEIGHT = 0.95
REST_POSITIONS = np.array([
    [0.0, 0.95, 0.0],     # pelvis
    [0.0, 1.25, 0.0],     # chest
    [0.0, 1.48, 0.0],     # neck
    [0.0, 1.58, 0.0],     # head
    [0.0, 1.42, -0.19],   # l_shoulder
    [0.0, 1.13, -0.21],   # l_elbow
    [0.0, 0.88, -0.22],   # l_wrist
    [0.0, 1.42, 0.19],    # r_shoulder
    [0.0, 1.13, 0.21],    # r_elbow
    [0.0, 0.88, 0.22],    # r_wrist
    [0.0, 0.90, -0.10],   # l_hip
    [0.0, 0.50, -0.10],   # l_knee
    [0.0, 0.90, 0.10],    # r_hip
    [0.0, 0.50, 0.10],    # r_knee
])

# (joint, segment start, segment end, radius) in rest coordinates; the segment moves with the joint
CAPSULES = (
    (0, (0.0, 0.86, 0.0), (0.0, 1.25, 0.0), 0.145),
    (1, (0.0, 1.25, 0.0), (0.0, 1.44, 0.0), 0.155),
    (2, (0.0, 1.44, 0.0), (0.0, 1.58, 0.0), 0.055),
    (3, (0.0, 1.60, 0.0), (0.0, 1.72, 0.0), 0.10),
    (4, (0.0, 1.42, -0.19), (0.0, 1.13, -0.21), 0.05),
    (5, (0.0, 1.13, -0.21), (0.0, 0.88, -0.22), 0.042),
    (6, (0.0, 0.88, -0.22), (0.0, 0.78, -0.22), 0.04),
    (7, (0.0, 1.42, 0.19), (0.0, 1.13, 0.21), 0.05),
    (8, (0.0, 1.13, 0.21), (0.0, 0.88, 0.22), 0.042),
    (9, (0.0, 0.88, 0.22), (0.0, 0.78, 0.22), 0.04),
    (10, (0.0, 0.90, -0.10), (0.0, 0.50, -0.10), 0.075),
    (11, (0.0, 0.50, -0.10), (0.0, 0.06, -0.10), 0.055),
    (12, (0.0, 0.90, 0.10), (0.0, 0.50, 0.10), 0.075),
    (13, (0.0, 0.50, 0.10), (0.0, 0.06, 0.10), 0.055),
)


class InvalidPoseError(ValueError):
    pass


@dataclass(frozen=True)
class BodyPose:
    joint_angles: np.ndarray  # (J, 3) radians
    root_translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        ang = np.asarray(self.joint_angles, dtype=np.float64)
        root = np.asarray(self.root_translation, dtype=np.float64)
        if ang.shape != (J, 3):
            raise InvalidPoseError(f"joint_angles must be ({J}, 3), got {ang.shape}")
        if root.shape != (3,):
            raise InvalidPoseError(f"root_translation must be a 3-vector, got {root.shape}")
        if not np.all(np.isfinite(ang)) or np.any(np.abs(ang) > np.pi + 1e-12):
            raise InvalidPoseError("joint angles must be finite and within [-pi, pi]")
        object.__setattr__(self, "joint_angles", ang)
        object.__setattr__(self, "root_translation", root)

    @classmethod
    def rest(cls):
        return cls(np.zeros((J, 3)), np.array([0.0, PELVIS_HEIGHT, 0.0]))


def forward_kinematics(pose: BodyPose, yaw=0.0):
    """World rotation ``(J, 3, 3)`` and position ``(J, 3)`` of every joint.

    ``yaw`` rotates the whole body about +y (walking direction).
    """
    local = Rotation.from_euler("xyz", pose.joint_angles).as_matrix()
    rots = np.empty((J, 3, 3))
    pos = np.empty((J, 3))
    heading = Rotation.from_euler("y", yaw).as_matrix()
    for j in range(J):
        p = PARENTS[j]
        if p < 0:
            rots[j] = heading @ local[j]
            pos[j] = pose.root_translation
        else:
            rots[j] = rots[p] @ local[j]
            pos[j] = pos[p] + rots[p] @ (REST_POSITIONS[j] - REST_POSITIONS[p])
    return rots, pos


def skin(local, bones, rots, pos):
    """Rigidly transform bone-local points ``(V, 3)`` bound to ``bones`` ``(V,)``."""
    return pos[bones] + np.einsum("vij,vj->vi", rots[bones], local)


def nearest_capsule(points, candidates=None):
    """Index into :data:`CAPSULES` of the capsule surface closest to each rest-space point."""
    points = np.asarray(points, dtype=np.float64)
    caps = CAPSULES if candidates is None else [CAPSULES[i] for i in candidates]
    dists = []
    for _, a, b, r in caps:
        a = np.asarray(a)
        ab = np.asarray(b) - a
        t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = a + t[:, None] * ab
        dists.append(np.linalg.norm(points - closest, axis=1) - r)
    idx = np.argmin(np.stack(dists, axis=1), axis=1)
    if candidates is not None:
        idx = np.asarray(candidates)[idx]
    return idx


def _tube(a, b, r0, r1, n_around, n_len):
    """Open cylinder between rest points a and b; returns vertices, faces, (u, t) coords."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    u = np.linspace(0.0, 1.0, n_around + 1)
    t = np.linspace(0.0, 1.0, n_len + 1)
    tt, uu = np.meshgrid(t, u, indexing="ij")
    theta = 2.0 * np.pi * uu
    rad = r0 + (r1 - r0) * tt
    radial = np.cos(theta)[..., None] * e1 + np.sin(theta)[..., None] * e2
    verts = a + tt[..., None] * (length * axis) + rad[..., None] * radial
    faces = []
    cols = n_around + 1
    for i in range(n_len):
        for j in range(n_around):
            v0 = i * cols + j
            faces.append((v0, v0 + 1, v0 + cols))
            faces.append((v0 + 1, v0 + cols + 1, v0 + cols))
    return (verts.reshape(-1, 3), np.array(faces, dtype=np.int64),
            np.stack([uu.ravel(), tt.ravel()], axis=1), radial.reshape(-1, 3), length)


def body_mesh(n_around=8, n_len=2):
    """Closed capsule mesh of the body: ``(vertices, faces, bones)`` in rest pose."""
    verts, faces, bones = [], [], []
    offset = 0
    for joint, a, b, r in CAPSULES:
        v, f, _, _, _ = _tube(a, b, r, r, n_around, n_len)
        # cap both ends with a center vertex
        cols = n_around + 1
        ca = np.asarray(a, dtype=np.float64)
        cb = np.asarray(b, dtype=np.float64)
        v = np.vstack([v, ca, cb])
        ia, ib = len(v) - 2, len(v) - 1
        last = n_len * cols
        caps = [(ia, j + 1, j) for j in range(n_around)]
        caps += [(ib, last + j, last + j + 1) for j in range(n_around)]
        f = np.vstack([f, np.array(caps, dtype=np.int64)])
        verts.append(v)
        faces.append(f + offset)
        bones.append(np.full(len(v), joint))
        offset += len(v)
    return np.vstack(verts), np.vstack(faces), np.concatenate(bones)


def canonical_walk_cycle():
    """Nine keyframes of a walking gait plus a closing copy of the first one.

    Returns 10 :class:`BodyPose` objects (``M = 9`` intervals). The root
    translation carries only the vertical bob and lateral sway; forward
    progression is added during interpolation.
    """
    keys = []
    for k in range(9):
        phi = 2.0 * np.pi * k / 9.0
        ang = np.zeros((J, 3))
        hip = 0.42 * np.sin(phi)
        ang[JOINT_INDEX["l_hip"], 2] = hip
        ang[JOINT_INDEX["r_hip"], 2] = -hip
        # knee flexes (negative z) mostly during swing
        ang[JOINT_INDEX["l_knee"], 2] = -0.55 * max(0.0, np.sin(phi + 0.6)) - 0.05
        ang[JOINT_INDEX["r_knee"], 2] = -0.55 * max(0.0, np.sin(phi + 0.6 + np.pi)) - 0.05
        ang[JOINT_INDEX["l_shoulder"], 2] = -0.35 * np.sin(phi)
        ang[JOINT_INDEX["r_shoulder"], 2] = 0.35 * np.sin(phi)
        ang[JOINT_INDEX["l_elbow"], 2] = 0.25 + 0.1 * np.cos(phi)
        ang[JOINT_INDEX["r_elbow"], 2] = 0.25 - 0.1 * np.cos(phi)
        ang[JOINT_INDEX["pelvis"], 1] = 0.08 * np.sin(phi)
        ang[JOINT_INDEX["chest"], 1] = -0.12 * np.sin(phi)
        root = np.array([0.0, PELVIS_HEIGHT + 0.02 * np.cos(2 * phi), 0.02 * np.sin(phi)])
        keys.append(BodyPose(ang, root))
    keys.append(keys[0])
    return keys
