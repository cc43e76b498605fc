"""Procedural parametric body: shape blendshapes, skeleton, linear blend skinning.

The template is a deterministic humanoid (torso, head, two arms with an
articulated right hand, two legs) built from seeded surface grids.  Posing
runs shape blendshapes, forward kinematics over the joint tree and LBS,
with exact reverse-mode gradients for every pose / translation / shape
parameter.  The vertical axis is y; gravity points along -y.

Skinning weights use a sharp distance falloff with a relative cutoff, so
end-effector regions (soles, palm) bind rigidly to their bone while joint
neighborhoods blend smoothly.  Rigid soles are what lets the synthetic
generator plant feet exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blob
from .geometry import matrix_to_rot6d, rot6d_backward, rot6d_to_matrix

BODY_MAGIC = "GMKBODY1"

_WEIGHT_SIGMA = 0.025   # meters; falloff scale of bone-distance skinning
_WEIGHT_CUTOFF = 1e-5   # relative to the row maximum

# Joint removal order used when config.joints < 16 (children reparent,
# vertices rebind to the parent bone).
_MERGE_PRIORITY = ["r_finger_tip", "r_finger_mid", "r_finger_base", "l_shoulder",
                   "l_ankle", "l_knee", "head", "chest", "r_wrist", "r_elbow"]


@dataclass(frozen=True)
class BodyConfig:
    vertices: int = 2000
    joints: int = 16
    body_markers: int = 400
    hand_markers: int = 99
    foot_markers: int = 40
    shape_dims: int = 20
    seed: int = 0


@dataclass
class BodyTemplate:
    """Canonical-pose geometry, skeleton and marker bookkeeping."""

    vertices: np.ndarray       # (N, 3) rest positions
    faces: np.ndarray          # (F, 3) int64 triangles
    parents: np.ndarray        # (J,) int64, parent of joint j (root: -1)
    joint_names: list
    joints0: np.ndarray        # (J, 3) rest joint positions
    weights: np.ndarray        # (N, J) skinning weights, rows sum to 1
    blend_dirs: np.ndarray     # (K, N, 3) shape blendshape directions
    joint_reg: np.ndarray      # (J, N) delta regressor: J(beta) = J0 + reg @ (V - V0)
    marker_ids: np.ndarray     # (M,) body marker vertex ids
    hand_local: np.ndarray     # indices into marker_ids for right-hand markers
    foot_local: np.ndarray     # indices into marker_ids for foot markers
    head_pair: np.ndarray      # (2,) vertex ids; gaze axis points pair[0] -> pair[1]
    config: BodyConfig = field(default=None)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape_dims(self) -> int:
        return self.blend_dirs.shape[0]

    @property
    def hand_marker_ids(self) -> np.ndarray:
        return self.marker_ids[self.hand_local]

    @property
    def foot_marker_ids(self) -> np.ndarray:
        return self.marker_ids[self.foot_local]

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    @property
    def param_dim(self) -> int:
        """Flattened pose-plus-translation length (J * 6 + 3)."""
        return self.n_joints * 6 + 3


@dataclass
class BodyParams:
    """Shape coefficients, per-joint 6D rotations and root translation."""

    betas: np.ndarray    # (K,)
    pose6d: np.ndarray   # (J, 6)
    trans: np.ndarray    # (3,)

    def copy(self) -> "BodyParams":
        return BodyParams(self.betas.copy(), self.pose6d.copy(), self.trans.copy())


@dataclass
class PosedBody:
    vertices: np.ndarray   # (N, 3)
    joints: np.ndarray     # (J, 3)
    head: np.ndarray       # (3,) unit gaze vector


def identity_pose(template: BodyTemplate) -> np.ndarray:
    """Per-joint 6D coefficients of the identity rotation."""
    eye = matrix_to_rot6d(np.eye(3))
    return np.tile(eye, (template.n_joints, 1))


def flatten_params(pose6d: np.ndarray, trans: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(pose6d).reshape(-1), np.asarray(trans).reshape(3)])


def unflatten_params(theta: np.ndarray, n_joints: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    return theta[: n_joints * 6].reshape(n_joints, 6), theta[n_joints * 6:]


# ---------------------------------------------------------------------------
# Template construction
# ---------------------------------------------------------------------------

def _tube(p0, p1, radii, rings, segs, axis_u=None):
    """Ring/segment grid around the segment p0 -> p1 with per-ring radii."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    if axis_u is None:
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
    else:
        u = np.asarray(axis_u, dtype=np.float64)
    v = np.cross(axis, u)
    ts = np.linspace(0.0, 1.0, rings)
    radii = np.asarray(radii, dtype=np.float64)
    if radii.ndim == 0:
        radii = np.full(rings, float(radii))
    elif radii.shape[0] != rings:
        radii = np.interp(ts, np.linspace(0, 1, radii.shape[0]), radii)
    ang = 2.0 * np.pi * np.arange(segs) / segs
    verts = np.empty((rings * segs, 3))
    for ri, (t, r) in enumerate(zip(ts, radii)):
        center = p0 + t * length * axis
        ring = center + r * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
        verts[ri * segs:(ri + 1) * segs] = ring
    faces = []
    for ri in range(rings - 1):
        for si in range(segs):
            a = ri * segs + si
            b = ri * segs + (si + 1) % segs
            c = (ri + 1) * segs + si
            d = (ri + 1) * segs + (si + 1) % segs
            faces.append((a, b, d))
            faces.append((a, d, c))
    return verts, np.asarray(faces, dtype=np.int64)


def _box(center, half, face_grids):
    """Axis-aligned box as six independent face grids.

    ``face_grids`` maps face tags (+x, -x, +y, -y, +z, -z) to (a, b) grid
    resolutions.  Faces with resolution (0, 0) are omitted.
    """
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    axes = {"+x": (0, 1, 2, 1), "-x": (0, 1, 2, -1),
            "+y": (1, 0, 2, 1), "-y": (1, 0, 2, -1),
            "+z": (2, 0, 1, 1), "-z": (2, 0, 1, -1)}
    verts = []
    faces = []
    for tag in ("+x", "-x", "+y", "-y", "+z", "-z"):
        a, b = face_grids.get(tag, (0, 0))
        if a == 0 or b == 0:
            continue
        n_axis, u_axis, v_axis, sign = axes[tag]
        us = np.linspace(-1.0, 1.0, a)
        vs = np.linspace(-1.0, 1.0, b)
        base = len(verts)
        for ui, uu in enumerate(us):
            for vi, vv in enumerate(vs):
                p = center.copy()
                p[n_axis] += sign * half[n_axis]
                p[u_axis] += uu * half[u_axis]
                p[v_axis] += vv * half[v_axis]
                verts.append(p)
        for ui in range(a - 1):
            for vi in range(b - 1):
                q = base + ui * b + vi
                faces.append((q, q + 1, q + b + 1))
                faces.append((q, q + b + 1, q + b))
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def _segment_distance(points, a, b):
    """Distance from each point to segment a-b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _skeleton_spec():
    """Name, parent, rest position and skinning bone per joint."""
    J = {
        "pelvis":        (None,        (0.0, 0.97, 0.0),   ((0.0, 0.92, 0.0), (0.0, 1.14, 0.0))),
        "chest":         ("pelvis",    (0.0, 1.25, 0.0),   ((0.0, 1.20, 0.0), (0.0, 1.46, 0.0))),
        "head":          ("chest",     (0.0, 1.54, 0.0),   ((0.0, 1.56, 0.0), (0.0, 1.74, 0.0))),
        "l_shoulder":    ("chest",     (-0.19, 1.43, 0.0), ((-0.20, 1.40, 0.0), (-0.235, 0.93, 0.0))),
        "r_shoulder":    ("chest",     (0.19, 1.43, 0.0),  ((0.20, 1.40, 0.0), (0.21, 1.17, 0.0))),
        "r_elbow":       ("r_shoulder", (0.21, 1.16, 0.0), ((0.215, 1.145, 0.0), (0.23, 0.935, 0.0))),
        "r_wrist":       ("r_elbow",   (0.232, 0.915, 0.0), ((0.232, 0.905, 0.0), (0.232, 0.835, 0.0))),
        "r_finger_base": ("r_wrist",   (0.232, 0.825, 0.0), ((0.232, 0.820, 0.0), (0.232, 0.790, 0.0))),
        "r_finger_mid":  ("r_finger_base", (0.232, 0.785, 0.0), ((0.232, 0.780, 0.0), (0.232, 0.755, 0.0))),
        "r_finger_tip":  ("r_finger_mid", (0.232, 0.750, 0.0), ((0.232, 0.745, 0.0), (0.232, 0.715, 0.0))),
        "l_hip":         ("pelvis",    (-0.10, 0.92, 0.0), ((-0.103, 0.88, 0.0), (-0.105, 0.53, 0.0))),
        "l_knee":        ("l_hip",     (-0.105, 0.50, 0.0), ((-0.107, 0.47, 0.0), (-0.11, 0.12, 0.0))),
        "l_ankle":       ("l_knee",    (-0.11, 0.09, 0.0), ((-0.11, 0.075, 0.03), (-0.11, 0.03, 0.16))),
        "r_hip":         ("pelvis",    (0.10, 0.92, 0.0),  ((0.103, 0.88, 0.0), (0.105, 0.53, 0.0))),
        "r_knee":        ("r_hip",     (0.105, 0.50, 0.0), ((0.107, 0.47, 0.0), (0.11, 0.12, 0.0))),
        "r_ankle":       ("r_knee",    (0.11, 0.09, 0.0),  ((0.11, 0.075, 0.03), (0.11, 0.03, 0.16))),
    }
    return J


def _part_specs(scale: float):
    """Body part surface grids; counts scale with the vertex budget."""

    def rings(n):
        return max(3, int(round(n * scale)))

    def grid(n):
        return max(2, int(round(n * scale)))

    parts = [
        # (name, bone joint, kind, args)
        ("torso", "pelvis", "tube",
         dict(p0=(0.0, 0.84, 0.0), p1=(0.0, 1.47, 0.0),
              radii=[0.145, 0.155, 0.135, 0.145, 0.155, 0.11], rings=rings(24), segs=grid(16))),
        ("head", "head", "tube",
         dict(p0=(0.0, 1.50, 0.0), p1=(0.0, 1.76, 0.0),
              radii=[0.055, 0.095, 0.105, 0.10, 0.05], rings=rings(10), segs=grid(14))),
        ("l_arm", "l_shoulder", "tube",
         dict(p0=(-0.19, 1.45, 0.0), p1=(-0.235, 0.90, 0.0),
              radii=[0.05, 0.045, 0.04, 0.035], rings=rings(13), segs=grid(10))),
        ("r_upper_arm", "r_shoulder", "tube",
         dict(p0=(0.19, 1.45, 0.0), p1=(0.21, 1.17, 0.0),
              radii=[0.05, 0.047, 0.042], rings=rings(7), segs=grid(10))),
        ("r_forearm", "r_elbow", "tube",
         dict(p0=(0.21, 1.155, 0.0), p1=(0.232, 0.925, 0.0),
              radii=[0.042, 0.038, 0.031], rings=rings(7), segs=grid(10))),
        ("r_palm", "r_wrist", "box",
         dict(center=(0.2335, 0.868, 0.0), half=(0.013, 0.048, 0.042),
              face_grids={"+x": (grid(8), grid(7)), "-x": (grid(5), grid(4)),
                          "+z": (grid(5), grid(3)), "-z": (grid(5), grid(3)),
                          "-y": (grid(3), grid(4))})),
        ("r_finger_a", "r_finger_base", "tube",
         dict(p0=(0.232, 0.822, 0.0), p1=(0.232, 0.788, 0.0),
              radii=[0.020, 0.018], rings=rings(4), segs=grid(8), axis_u=(1.0, 0.0, 0.0))),
        ("r_finger_b", "r_finger_mid", "tube",
         dict(p0=(0.232, 0.784, 0.0), p1=(0.232, 0.752, 0.0),
              radii=[0.018, 0.016], rings=rings(4), segs=grid(8), axis_u=(1.0, 0.0, 0.0))),
        ("r_finger_c", "r_finger_tip", "tube",
         dict(p0=(0.232, 0.748, 0.0), p1=(0.232, 0.712, 0.0),
              radii=[0.016, 0.012], rings=rings(4), segs=grid(8), axis_u=(1.0, 0.0, 0.0))),
        ("l_thigh", "l_hip", "tube",
         dict(p0=(-0.103, 0.90, 0.0), p1=(-0.107, 0.515, 0.0),
              radii=[0.075, 0.065, 0.055], rings=rings(10), segs=grid(12))),
        ("r_thigh", "r_hip", "tube",
         dict(p0=(0.103, 0.90, 0.0), p1=(0.107, 0.515, 0.0),
              radii=[0.075, 0.065, 0.055], rings=rings(10), segs=grid(12))),
        ("l_shin", "l_knee", "tube",
         dict(p0=(-0.108, 0.485, 0.0), p1=(-0.11, 0.105, 0.0),
              radii=[0.055, 0.05, 0.035], rings=rings(9), segs=grid(12))),
        ("r_shin", "r_knee", "tube",
         dict(p0=(0.108, 0.485, 0.0), p1=(0.11, 0.105, 0.0),
              radii=[0.055, 0.05, 0.035], rings=rings(9), segs=grid(12))),
        ("l_foot", "l_ankle", "box",
         dict(center=(-0.11, 0.045, 0.06), half=(0.045, 0.042, 0.125),
              face_grids={"-y": (grid(6), grid(9)), "+y": (grid(3), grid(5)),
                          "+x": (grid(2), grid(7)), "-x": (grid(2), grid(7)),
                          "+z": (grid(3), grid(2)), "-z": (grid(3), grid(2))})),
        ("r_foot", "r_ankle", "box",
         dict(center=(0.11, 0.045, 0.06), half=(0.045, 0.042, 0.125),
              face_grids={"-y": (grid(6), grid(9)), "+y": (grid(3), grid(5)),
                          "+x": (grid(2), grid(7)), "-x": (grid(2), grid(7)),
                          "+z": (grid(3), grid(2)), "-z": (grid(3), grid(2))})),
    ]
    return parts


def build_template(config: BodyConfig | None = None) -> BodyTemplate:
    """Construct the deterministic humanoid template for ``config``.

    Same config (including seed) gives a bit-identical template.

    Raises:
        ValueError: if ``config.joints < 6`` ("insufficient skeleton") or the
            vertex budget cannot accommodate the requested marker counts.
    """
    config = config or BodyConfig()
    if config.joints < 6:
        raise ValueError("insufficient skeleton")
    if config.joints > 16:
        raise ValueError("joint count above 16 is not supported")
    rng = np.random.Generator(np.random.PCG64(config.seed))

    spec = _skeleton_spec()
    names = list(spec.keys())
    scale = np.sqrt(config.vertices / 2000.0)

    verts_list, faces_list, part_of = [], [], []
    part_slices = {}
    for name, bone_joint, kind, args in _part_specs(scale):
        if kind == "tube":
            v, f = _tube(**args)
        else:
            v, f = _box(**args)
        start = sum(len(x) for x in verts_list)
        faces_list.append(f + start)
        verts_list.append(v)
        part_slices[name] = (start, start + len(v), bone_joint)
    verts = np.concatenate(verts_list)
    faces = np.concatenate(faces_list)

    # absorb the remaining vertex budget as loose torso surface detail
    n_extra = config.vertices - verts.shape[0]
    if n_extra < 0:
        raise ValueError(f"vertex budget {config.vertices} too small (need >= {verts.shape[0]})")
    if n_extra > 0:
        ang = rng.uniform(0, 2 * np.pi, n_extra)
        y = rng.uniform(0.86, 1.44, n_extra)
        r = 0.14 + 0.01 * np.cos(3 * y)
        extra = np.stack([r * np.cos(ang), y, r * np.sin(ang)], axis=1)
        start = verts.shape[0]
        verts = np.concatenate([verts, extra])
        part_slices["torso_detail"] = (start, start + n_extra, "pelvis")

    # -- skeleton (with optional merges down to config.joints) -------------
    keep = list(names)
    merged_into = {}
    for victim in _MERGE_PRIORITY:
        if len(keep) <= config.joints:
            break
        parent = spec[victim][0]
        merged_into[victim] = parent
        keep.remove(victim)

    def resolve(name):
        while name in merged_into:
            name = merged_into[name]
        return name

    joint_names = keep
    j_index = {n: i for i, n in enumerate(joint_names)}
    parents = np.array(
        [-1 if spec[n][0] is None else j_index[resolve(spec[n][0])] for n in joint_names],
        dtype=np.int64)
    joints0 = np.array([spec[n][1] for n in joint_names])
    bones = {n: spec[n][2] for n in joint_names}

    # -- skinning weights ---------------------------------------------------
    J = len(joint_names)
    d2 = np.empty((verts.shape[0], J))
    for j, n in enumerate(joint_names):
        a, b = bones[n]
        d2[:, j] = _segment_distance(verts, a, b) ** 2
    d2 -= d2.min(axis=1, keepdims=True)
    w = np.exp(-d2 / _WEIGHT_SIGMA ** 2)
    w[w < _WEIGHT_CUTOFF * w.max(axis=1, keepdims=True)] = 0.0
    weights = w / w.sum(axis=1, keepdims=True)

    # -- joint delta regressor ----------------------------------------------
    jd = np.linalg.norm(verts[None, :, :] - joints0[:, None, :], axis=-1)
    jr = np.exp(-(jd / 0.06) ** 2)
    jr[jr < 1e-4 * jr.max(axis=1, keepdims=True)] = 0.0
    joint_reg = jr / jr.sum(axis=1, keepdims=True)

    # -- shape blendshapes ----------------------------------------------------
    blend_dirs = _build_blendshapes(verts, part_slices, config.shape_dims, rng)

    # -- markers --------------------------------------------------------------
    hand_parts = ["r_palm", "r_finger_a", "r_finger_b", "r_finger_c"]
    hand_pool = np.concatenate([np.arange(*part_slices[p][:2]) for p in hand_parts])
    if hand_pool.shape[0] < config.hand_markers:
        raise ValueError("hand region smaller than requested hand marker count")
    hand_ids = hand_pool[np.unique(np.linspace(0, hand_pool.shape[0] - 1,
                                               config.hand_markers).round().astype(int))]
    while hand_ids.shape[0] < config.hand_markers:  # fill collisions from the pool
        missing = config.hand_markers - hand_ids.shape[0]
        rest = np.setdiff1d(hand_pool, hand_ids)
        hand_ids = np.sort(np.concatenate([hand_ids, rest[:missing]]))

    foot_ids = []
    for p in ("l_foot", "r_foot"):
        s, e, _ = part_slices[p]
        ids = np.arange(s, e)
        order = np.argsort(verts[ids, 1], kind="stable")
        foot_ids.append(ids[order[: config.foot_markers // 2]])
    foot_ids = np.sort(np.concatenate(foot_ids))

    other_budget = config.body_markers - hand_ids.shape[0] - foot_ids.shape[0]
    if other_budget < 0:
        raise ValueError("body marker budget smaller than hand + foot markers")
    other_parts = [p for p in part_slices if p not in hand_parts + ["l_foot", "r_foot"]]
    pool = np.concatenate([np.arange(*part_slices[p][:2]) for p in other_parts])
    other = pool[np.unique(np.linspace(0, pool.shape[0] - 1, other_budget).round().astype(int))]
    while other.shape[0] < other_budget:
        missing = other_budget - other.shape[0]
        rest = np.setdiff1d(pool, other)
        other = np.sort(np.concatenate([other, rest[:missing]]))

    marker_ids = np.concatenate([hand_ids, foot_ids, other])
    hand_local = np.arange(hand_ids.shape[0], dtype=np.int64)
    foot_local = np.arange(hand_ids.shape[0], hand_ids.shape[0] + foot_ids.shape[0], dtype=np.int64)

    # -- gaze axis: back-of-head vertex -> nose vertex ------------------------
    hs, he, _ = part_slices["head"]
    head_verts = verts[hs:he]
    band = np.abs(head_verts[:, 1] - 1.63) < 0.06
    cand = np.arange(hs, he)[band]
    nose = cand[np.argmax(verts[cand, 2])]
    back = cand[np.argmin(verts[cand, 2])]
    head_pair = np.array([back, nose], dtype=np.int64)

    return BodyTemplate(
        vertices=verts, faces=faces, parents=parents, joint_names=joint_names,
        joints0=joints0, weights=weights, blend_dirs=blend_dirs, joint_reg=joint_reg,
        marker_ids=marker_ids.astype(np.int64), hand_local=hand_local,
        foot_local=foot_local, head_pair=head_pair, config=config)


def _build_blendshapes(verts, part_slices, n_dims, rng):
    N = verts.shape[0]
    dirs = np.zeros((n_dims, N, 3))
    center = np.array([0.0, 0.95, 0.0])

    def part_mask(names):
        m = np.zeros(N, dtype=bool)
        for p in names:
            if p in part_slices:
                s, e, _ = part_slices[p]
                m[s:e] = True
        return m

    semantic = []
    semantic.append((verts - center) * 0.05)                           # global scale
    h = np.zeros((N, 3)); h[:, 1] = (verts[:, 1] - 0.95) * 0.06
    semantic.append(h)                                                 # height
    wdt = np.zeros((N, 3)); wdt[:, 0] = verts[:, 0] * 0.07; wdt[:, 2] = verts[:, 2] * 0.07
    semantic.append(wdt)                                               # width
    arms = part_mask(["l_arm", "r_upper_arm", "r_forearm", "r_palm",
                      "r_finger_a", "r_finger_b", "r_finger_c"])
    a = np.zeros((N, 3)); a[arms, 1] = (verts[arms, 1] - 1.43) * 0.05
    semantic.append(a)                                                 # arm length
    legs = part_mask(["l_thigh", "r_thigh", "l_shin", "r_shin", "l_foot", "r_foot"])
    l = np.zeros((N, 3)); l[legs, 1] = (verts[legs, 1] - 0.92) * 0.05
    semantic.append(l)                                                 # leg length
    torso = part_mask(["torso", "torso_detail"])
    t = np.zeros((N, 3))
    t[torso, 0] = verts[torso, 0] * 0.09
    t[torso, 2] = verts[torso, 2] * 0.09
    semantic.append(t)                                                 # torso girth
    hd = part_mask(["head"])
    hh = np.zeros((N, 3)); hh[hd] = (verts[hd] - np.array([0.0, 1.63, 0.0])) * 0.06
    semantic.append(hh)                                                # head size
    hand = part_mask(["r_palm", "r_finger_a", "r_finger_b", "r_finger_c"])
    hb = np.zeros((N, 3)); hb[hand] = (verts[hand] - np.array([0.233, 0.86, 0.0])) * 0.05
    semantic.append(hb)                                                # hand size

    for k in range(n_dims):
        if k < len(semantic):
            dirs[k] = semantic[k]
            continue
        # smooth low-frequency displacement field
        d = np.zeros((N, 3))
        for _ in range(3):
            freq = rng.normal(0.0, 2.5, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            d += np.sin(verts @ freq + phase)[:, None] * direction
        rms = np.sqrt(np.mean(np.sum(d * d, axis=1)))
        dirs[k] = d * (0.01 / rms)
    return dirs


# ---------------------------------------------------------------------------
# Posing (forward + backward)
# ---------------------------------------------------------------------------

@dataclass
class PoseCache:
    betas: np.ndarray
    pose6d: np.ndarray
    rot: np.ndarray
    rot_world: np.ndarray
    t_world: np.ndarray
    j_rest: np.ndarray
    v_shaped_sub: np.ndarray
    vert_ids: np.ndarray
    batched: bool


def pose_vertices(template: BodyTemplate, betas, pose6d, trans,
                  vert_ids=None) -> tuple[np.ndarray, np.ndarray, PoseCache]:
    """Pose a batch of bodies; returns (vertices, joints, cache).

    Args:
        betas: (K,) or (B, K) shape coefficients.
        pose6d: (J, 6) or (B, J, 6) per-joint 6D rotations.
        trans: (3,) or (B, 3) root translations, applied last.
        vert_ids: optional vertex subset to realize (default: all).

    Returns:
        vertices (B, M, 3), joints (B, J, 3) and a cache for
        :func:`pose_vertices_backward`.  Leading batch dims are squeezed on
        return if the inputs were unbatched.
    """
    pose6d = np.asarray(pose6d, dtype=np.float64)
    batched = pose6d.ndim == 3
    if not batched:
        pose6d = pose6d[None]
    B = pose6d.shape[0]
    J = template.n_joints
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim == 1:
        betas = np.broadcast_to(betas, (B, betas.shape[0]))
    trans = np.asarray(trans, dtype=np.float64)
    if trans.ndim == 1:
        trans = np.broadcast_to(trans, (B, 3))
    ids = np.arange(template.n_vertices) if vert_ids is None else np.asarray(vert_ids, dtype=np.int64)

    rot = rot6d_to_matrix(pose6d)                                     # (B, J, 3, 3)
    delta = np.einsum("bk,kni->bni", betas, template.blend_dirs)      # (B, N, 3)
    j_rest = template.joints0[None] + np.einsum("jn,bni->bji", template.joint_reg, delta)
    v_shaped_sub = template.vertices[ids][None] + delta[:, ids]

    rot_w = np.empty((B, J, 3, 3))
    t_w = np.empty((B, J, 3))
    rot_w[:, 0] = rot[:, 0]
    t_w[:, 0] = j_rest[:, 0]
    for j in range(1, J):
        p = template.parents[j]
        rot_w[:, j] = rot_w[:, p] @ rot[:, j]
        off = j_rest[:, j] - j_rest[:, p]
        t_w[:, j] = np.einsum("bxy,by->bx", rot_w[:, p], off) + t_w[:, p]

    a_tr = t_w - np.einsum("bjxy,bjy->bjx", rot_w, j_rest)            # (B, J, 3)
    w_sub = template.weights[ids]                                     # (M, J)
    verts = (np.einsum("mj,bjxy,bmy->bmx", w_sub, rot_w, v_shaped_sub)
             + w_sub @ a_tr + trans[:, None, :])
    joints = t_w + trans[:, None, :]

    cache = PoseCache(betas=betas, pose6d=pose6d, rot=rot, rot_world=rot_w,
                      t_world=t_w, j_rest=j_rest, v_shaped_sub=v_shaped_sub,
                      vert_ids=ids, batched=batched)
    if not batched:
        return verts[0], joints[0], cache
    return verts, joints, cache


def pose_vertices_backward(template: BodyTemplate, cache: PoseCache,
                           d_verts, d_joints=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode gradients of :func:`pose_vertices`.

    Args:
        d_verts: cotangent of the returned vertices, (B, M, 3) or (M, 3).
        d_joints: optional cotangent of the returned joints.

    Returns:
        (d_pose6d, d_trans, d_betas) matching the forward input shapes.
    """
    d_verts = np.asarray(d_verts, dtype=np.float64)
    if d_verts.ndim == 2:
        d_verts = d_verts[None]
    B, M, _ = d_verts.shape
    J = template.n_joints
    ids = cache.vert_ids
    w_sub = template.weights[ids]
    rot_w, t_w, j_rest = cache.rot_world, cache.t_world, cache.j_rest

    if d_joints is None:
        d_joints = np.zeros((B, J, 3))
    else:
        d_joints = np.asarray(d_joints, dtype=np.float64)
        if d_joints.ndim == 2:
            d_joints = d_joints[None]

    d_trans = d_verts.sum(axis=1) + d_joints.sum(axis=1)
    d_arot = np.einsum("mj,bmx,bmy->bjxy", w_sub, d_verts, cache.v_shaped_sub)
    d_atr = np.einsum("mj,bmx->bjx", w_sub, d_verts)
    d_vsub = np.einsum("mj,bjxy,bmx->bmy", w_sub, rot_w, d_verts)

    d_tw = d_atr + d_joints
    d_rw = d_arot - np.einsum("bjx,bjy->bjxy", d_atr, j_rest)
    d_jrest = -np.einsum("bjyx,bjy->bjx", rot_w, d_atr)

    d_rot = np.zeros_like(cache.rot)
    for j in range(J - 1, 0, -1):
        p = template.parents[j]
        off = j_rest[:, j] - j_rest[:, p]
        d_rw[:, p] += d_rw[:, j] @ np.swapaxes(cache.rot[:, j], 1, 2)
        d_rw[:, p] += np.einsum("bx,by->bxy", d_tw[:, j], off)
        d_rot[:, j] = np.einsum("byx,byz->bxz", rot_w[:, p], d_rw[:, j])
        d_off = np.einsum("byx,by->bx", rot_w[:, p], d_tw[:, j])
        d_jrest[:, j] += d_off
        d_jrest[:, p] -= d_off
        d_tw[:, p] += d_tw[:, j]
    d_rot[:, 0] = d_rw[:, 0]
    d_jrest[:, 0] += d_tw[:, 0]

    d_delta = np.einsum("jn,bjx->bnx", template.joint_reg, d_jrest)
    np.add.at(d_delta, (slice(None), ids), d_vsub)
    d_betas = np.einsum("bnx,knx->bk", d_delta, template.blend_dirs)
    d_pose6d = rot6d_backward(cache.pose6d, d_rot)

    if not cache.batched:
        return d_pose6d[0], d_trans[0], d_betas[0]
    return d_pose6d, d_trans, d_betas


def head_direction(v_back: np.ndarray, v_nose: np.ndarray) -> np.ndarray:
    """Unit gaze vector from the two head markers."""
    d = np.asarray(v_nose, dtype=np.float64) - np.asarray(v_back, dtype=np.float64)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def head_direction_backward(v_back, v_nose, d_h):
    """VJP of :func:`head_direction` w.r.t. both marker positions."""
    d = np.asarray(v_nose, dtype=np.float64) - np.asarray(v_back, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    h = d / n
    d_d = (d_h - h * np.sum(h * d_h, axis=-1, keepdims=True)) / n
    return -d_d, d_d


def pose_body(template: BodyTemplate, params: BodyParams) -> PosedBody:
    """Pose the full body and derive the head orientation."""
    verts, joints, _ = pose_vertices(template, params.betas, params.pose6d, params.trans)
    back, nose = template.head_pair
    return PosedBody(vertices=verts, joints=joints,
                     head=head_direction(verts[back], verts[nose]))


def lowest_vertex(vertices: np.ndarray) -> tuple[int, float]:
    """Index and height of the minimum-y vertex (ties: lowest index)."""
    verts = np.asarray(vertices, dtype=np.float64)
    idx = int(np.argmin(verts[:, 1]))
    return idx, float(verts[idx, 1])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_template(path, template: BodyTemplate) -> None:
    cfg = template.config or BodyConfig()
    meta = {
        "joint_names": template.joint_names,
        "config": {"vertices": cfg.vertices, "joints": cfg.joints,
                   "body_markers": cfg.body_markers, "hand_markers": cfg.hand_markers,
                   "foot_markers": cfg.foot_markers, "shape_dims": cfg.shape_dims,
                   "seed": cfg.seed},
    }
    arrays = {
        "vertices": template.vertices, "faces": template.faces,
        "parents": template.parents, "joints0": template.joints0,
        "weights": template.weights, "blend_dirs": template.blend_dirs,
        "joint_reg": template.joint_reg, "marker_ids": template.marker_ids,
        "hand_local": template.hand_local, "foot_local": template.foot_local,
        "head_pair": template.head_pair,
    }
    blob.write_blob(path, BODY_MAGIC, meta, arrays)


def load_template(path) -> BodyTemplate:
    _, meta, arrays = blob.read_blob(path, BODY_MAGIC)
    cfg = BodyConfig(**meta["config"])
    return BodyTemplate(
        vertices=arrays["vertices"], faces=arrays["faces"],
        parents=arrays["parents"], joint_names=list(meta["joint_names"]),
        joints0=arrays["joints0"], weights=arrays["weights"],
        blend_dirs=arrays["blend_dirs"], joint_reg=arrays["joint_reg"],
        marker_ids=arrays["marker_ids"], hand_local=arrays["hand_local"],
        foot_local=arrays["foot_local"], head_pair=arrays["head_pair"], config=cfg)
