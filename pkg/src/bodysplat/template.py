"""Articulated body prior: rest template, skinning, and part topology.

The template is a fixed-size point body: 6890 surface vertices labeled with
15 body parts, skinned to a 24-joint kinematic tree with up to 4 weights per
vertex. Posing is linear blend skinning over axis-angle joint rotations plus
a root translation (75 pose values). The 15-part adjacency graph encodes
which parts count as kinematic neighbors for contrastive supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, knn_all
from .errors import ParseError, ValidationError

NUM_JOINTS = 24
NUM_VERTICES = 6890
NUM_SHAPE_PARAMS = 10
MAX_SKIN_JOINTS = 4

PART_NAMES = [
    "head", "neck", "torso",
    "left_upper_arm", "right_upper_arm",
    "left_forearm", "right_forearm",
    "left_hand", "right_hand",
    "left_thigh", "right_thigh",
    "left_calf", "right_calf",
    "left_foot", "right_foot",
]

HEAD, NECK, TORSO = 0, 1, 2
L_UPPER_ARM, R_UPPER_ARM = 3, 4
L_FOREARM, R_FOREARM = 5, 6
L_HAND, R_HAND = 7, 8
L_THIGH, R_THIGH = 9, 10
L_CALF, R_CALF = 11, 12
L_FOOT, R_FOOT = 13, 14

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_toe", "r_toe", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_palm", "r_palm",
]

JOINT_PARENTS = np.array([
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
    18, 19, 20, 21,
])

# Joint whose rotation carries each part's surface.
PART_DRIVING_JOINT = {
    HEAD: 15, NECK: 12, TORSO: 0,
    L_UPPER_ARM: 16, R_UPPER_ARM: 17,
    L_FOREARM: 18, R_FOREARM: 19,
    L_HAND: 20, R_HAND: 21,
    L_THIGH: 1, R_THIGH: 2,
    L_CALF: 4, R_CALF: 5,
    L_FOOT: 7, R_FOOT: 8,
}

# Kinematic-chain adjacency between the 15 parts. Arms hang off the neck
# (clavicle region) so no part exceeds 4 neighbors.
PART_ADJACENCY_PAIRS = [
    (HEAD, NECK), (NECK, TORSO),
    (NECK, L_UPPER_ARM), (NECK, R_UPPER_ARM),
    (L_UPPER_ARM, L_FOREARM), (L_FOREARM, L_HAND),
    (R_UPPER_ARM, R_FOREARM), (R_FOREARM, R_HAND),
    (TORSO, L_THIGH), (TORSO, R_THIGH),
    (L_THIGH, L_CALF), (L_CALF, L_FOOT),
    (R_THIGH, R_CALF), (R_CALF, R_FOOT),
]


@dataclass
class PriorTopology:
    """Symmetric 15x15 boolean body-part adjacency."""

    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)


def default_prior_topology() -> PriorTopology:
    adj = np.zeros((15, 15), dtype=bool)
    for a, b in PART_ADJACENCY_PAIRS:
        adj[a, b] = adj[b, a] = True
    return PriorTopology(adjacency=adj)


def prior_adjacent(topology: PriorTopology, part_a: int, part_b: int) -> bool:
    """Whether two parts are linked in the kinematic adjacency."""
    for p in (part_a, part_b):
        if not 0 <= p < 15:
            raise ValueError(f"part id {p} outside [0, 14]")
    return bool(topology.adjacency[part_a, part_b])


@dataclass
class PoseParams:
    """75 pose values: 24 axis-angle joint rotations plus root translation."""

    joint_rotations: np.ndarray              # (24, 3) radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(24, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @classmethod
    def zero(cls) -> "PoseParams":
        return cls(joint_rotations=np.zeros((24, 3)))

    def validate(self):
        mags = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(mags >= np.pi):
            j = int(np.argmax(mags))
            raise ValidationError(
                f"joint {j} axis-angle magnitude {mags[j]:.4f} outside canonical range (< pi)"
            )


@dataclass
class BodyTemplate:
    """Rest-pose body: vertices, part labels, skin weights, joint tree."""

    vertices: np.ndarray       # (6890, 3)
    part_labels: np.ndarray    # (6890,) int in [0, 14]
    skin_joints: np.ndarray    # (6890, 4) int, padded with 0
    skin_weights: np.ndarray   # (6890, 4) float >= 0, rows sum to 1
    joints: np.ndarray         # (24, 3) rest joint positions
    parents: np.ndarray        # (24,) parent indices, root is -1
    shape_params: np.ndarray = field(default_factory=lambda: np.zeros(10))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.skin_joints = np.asarray(self.skin_joints, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.shape_params = np.asarray(self.shape_params, dtype=np.float64)

    @property
    def height(self) -> float:
        """Vertical extent of the rest template."""
        return float(self.vertices[:, 1].max() - self.vertices[:, 1].min())


def validate_template(template: BodyTemplate):
    """Raise ValidationError naming the first violated structural rule."""
    t = template
    if t.vertices.shape != (NUM_VERTICES, 3):
        raise ValidationError(
            f"vertex count: expected {NUM_VERTICES} vertices, got {t.vertices.shape[0]}"
        )
    if t.joints.shape != (NUM_JOINTS, 3) or t.parents.shape != (NUM_JOINTS,):
        raise ValidationError(f"joint count: expected {NUM_JOINTS} joints")
    if t.parents[0] != -1:
        raise ValidationError("joint tree: joint 0 must be the root (parent -1)")
    for j in range(1, NUM_JOINTS):
        p = int(t.parents[j])
        if not 0 <= p < NUM_JOINTS:
            raise ValidationError(f"joint tree: joint {j} has invalid parent {p}")
        seen = {j}
        while p != -1:
            if p in seen:
                raise ValidationError(f"joint tree: cycle through joint {j}")
            seen.add(p)
            p = int(t.parents[p])
    if np.any((t.part_labels < 0) | (t.part_labels > 14)):
        v = int(np.argmax((t.part_labels < 0) | (t.part_labels > 14)))
        raise ValidationError(f"part label: vertex {v} labeled {t.part_labels[v]}")
    present = np.unique(t.part_labels)
    if len(present) != 15:
        missing = sorted(set(range(15)) - set(present.tolist()))
        raise ValidationError(f"part coverage: parts {missing} have no vertices")
    if np.any(t.skin_weights < 0):
        v = int(np.argmax(np.any(t.skin_weights < 0, axis=1)))
        raise ValidationError(f"skin weights: vertex {v} has a negative weight")
    sums = t.skin_weights.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-6
    if np.any(bad):
        v = int(np.argmax(bad))
        raise ValidationError(f"skin weights: vertex {v} weights sum to {sums[v]:.6f}")
    if np.any((t.skin_joints < 0) | (t.skin_joints >= NUM_JOINTS)):
        v = int(np.argmax(np.any((t.skin_joints < 0) | (t.skin_joints >= NUM_JOINTS), axis=1)))
        raise ValidationError(f"skin weights: vertex {v} references an invalid joint")


def axis_angle_to_quat(aa: np.ndarray) -> np.ndarray:
    """Axis-angle vectors to (w, x, y, z) quaternions, (..., 3) -> (..., 4)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * theta
    # series for sin(theta/2)/theta near zero
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * aa], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w, x, y, z) quaternions, broadcastable."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L with L @ p == q * p, vectorized over leading axes."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def joint_transforms(template: BodyTemplate, pose: PoseParams):
    """World transforms of all joints and the rest-relative skinning maps.

    Returns (rot (24,3,3), shift (24,3), quats (24,4)) where a point rigidly
    attached to joint j maps as x_world = rot[j] @ (x - J_j) + J_j + shift[j]
    (root translation not yet applied). Tracking the shift from the rest
    joint keeps the zero pose exactly the identity in float arithmetic.
    """
    pose.validate()
    from .cloud import quats_to_matrices

    local_q = axis_angle_to_quat(pose.joint_rotations)
    local_r = quats_to_matrices(local_q)
    world_r = np.empty((NUM_JOINTS, 3, 3))
    shift = np.empty((NUM_JOINTS, 3))
    world_q = np.empty((NUM_JOINTS, 4))
    for j in range(NUM_JOINTS):  # parents precede children in the canonical tree
        p = int(template.parents[j])
        if p < 0:
            world_r[j] = local_r[j]
            shift[j] = 0.0
            world_q[j] = local_q[j]
        else:
            offset = template.joints[j] - template.joints[p]
            world_r[j] = world_r[p] @ local_r[j]
            shift[j] = (world_r[p] - np.eye(3)) @ offset + shift[p]
            world_q[j] = quat_multiply(world_q[p], local_q[j])
    world_q /= np.linalg.norm(world_q, axis=1, keepdims=True)
    return world_r, shift, world_q


def blend_maps(skin_joints, skin_weights, template: BodyTemplate, pose: PoseParams):
    """Per-point affine skinning maps x' = M @ x + b (root translation in b).

    Works for any point set carrying (joint, weight) rows, not only the
    template's own vertices. Also returns the world quaternion of each
    point's dominant joint, used to carry Gaussian orientations.
    """
    rot, shift, quats = joint_transforms(template, pose)
    w = np.asarray(skin_weights, dtype=np.float64)
    j = np.asarray(skin_joints, dtype=np.int64)
    # x' = sum_k w_k (R_k (x - J_k) + J_k + shift_k)
    m = np.einsum("nk,nkab->nab", w, rot[j])
    joints_k = template.joints[j]
    offsets = joints_k + shift[j] - np.einsum("nkab,nkb->nka", rot[j], joints_k)
    b = np.einsum("nk,nka->na", w, offsets) + pose.root_translation
    dominant = j[np.arange(len(j)), np.argmax(w, axis=1)]
    return m, b, quats[dominant]


def pose_vertices(template: BodyTemplate, pose: PoseParams) -> np.ndarray:
    """Linear-blend-skin the template vertices into the given pose."""
    m, b, _ = blend_maps(template.skin_joints, template.skin_weights, template, pose)
    return np.einsum("nab,nb->na", m, template.vertices) + b


def init_gaussians(template: BodyTemplate, posed: PoseParams | None = None) -> GaussianCloud:
    """One Gaussian per template vertex.

    Positions at (optionally posed) vertices, one-hot semantics from part
    labels, isotropic scale equal to the mean distance to the vertex's 3
    nearest rest-pose neighbors, opacity 0.1, mid-gray color.
    """
    positions = template.vertices if posed is None else pose_vertices(template, posed)
    n = positions.shape[0]
    neighbors = knn_all(template.vertices, 3)
    dists = np.linalg.norm(template.vertices[neighbors] - template.vertices[:, np.newaxis, :], axis=2)
    iso = dists.mean(axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    semantics = np.zeros((n, 15))
    semantics[np.arange(n), template.part_labels] = 1.0
    return GaussianCloud(
        positions=np.array(positions, dtype=np.float64),
        rotations=rotations,
        scales=np.repeat(iso[:, np.newaxis], 3, axis=1),
        opacities=np.full(n, 0.1),
        colors=np.full((n, 3), 0.5),
        semantics=semantics,
    )


# ---------------------------------------------------------------------------
# Template file format (plain text, line oriented)
#
#   bodysplat-template 1
#   shape s0 .. s9
#   joints 24
#   <parent> <x> <y> <z>                          x24, joint id is line order
#   vertices 6890
#   <x> <y> <z> <part> <joint> <weight> [...]     x6890, 1..4 (joint, weight)
# ---------------------------------------------------------------------------

FORMAT_TAG = "bodysplat-template"


def save_template(template: BodyTemplate, path):
    lines = [f"{FORMAT_TAG} 1"]
    lines.append("shape " + " ".join(repr(float(v)) for v in template.shape_params))
    lines.append(f"joints {NUM_JOINTS}")
    for j in range(NUM_JOINTS):
        x, y, z = (float(v) for v in template.joints[j])
        lines.append(f"{int(template.parents[j])} {x!r} {y!r} {z!r}")
    lines.append(f"vertices {template.vertices.shape[0]}")
    for v in range(template.vertices.shape[0]):
        x, y, z = (float(c) for c in template.vertices[v])
        row = [f"{x!r} {y!r} {z!r} {int(template.part_labels[v])}"]
        for sj, sw in zip(template.skin_joints[v], template.skin_weights[v]):
            if sw > 0:
                row.append(f"{int(sj)} {float(sw)!r}")
        if len(row) == 1:  # degenerate all-zero row, keep it parseable
            row.append(f"{int(template.skin_joints[v][0])} {float(template.skin_weights[v][0])!r}")
        lines.append(" ".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_template(path) -> BodyTemplate:
    """Parse and validate a template file.

    Malformed lines raise ParseError with the line number; structural
    problems raise ValidationError naming the violated rule.
    """
    with open(path) as fh:
        raw = fh.read().splitlines()

    def parse_floats(tokens, count, lineno, what):
        if len(tokens) != count:
            raise ParseError(f"expected {count} values for {what}, got {len(tokens)}",
                             path=path, line=lineno)
        try:
            return [float(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(f"bad number in {what}: {exc}", path=path, line=lineno)

    if not raw or not raw[0].startswith(FORMAT_TAG):
        raise ParseError(f"missing '{FORMAT_TAG}' header", path=path, line=1)
    ln = 1
    tokens = raw[ln].split()
    if not tokens or tokens[0] != "shape":
        raise ParseError("expected 'shape' line", path=path, line=ln + 1)
    shape = parse_floats(tokens[1:], NUM_SHAPE_PARAMS, ln + 1, "shape parameters")
    ln += 1
    tokens = raw[ln].split()
    if len(tokens) != 2 or tokens[0] != "joints":
        raise ParseError("expected 'joints <count>' line", path=path, line=ln + 1)
    n_joints = int(tokens[1])
    if n_joints != NUM_JOINTS:
        raise ValidationError(f"joint count: expected {NUM_JOINTS}, file declares {n_joints}")
    joints = np.zeros((NUM_JOINTS, 3))
    parents = np.zeros(NUM_JOINTS, dtype=np.int64)
    for j in range(NUM_JOINTS):
        ln += 1
        if ln >= len(raw):
            raise ParseError("unexpected end of file in joint block", path=path, line=ln + 1)
        tokens = raw[ln].split()
        if len(tokens) != 4:
            raise ParseError("joint line needs '<parent> <x> <y> <z>'", path=path, line=ln + 1)
        try:
            parents[j] = int(tokens[0])
        except ValueError:
            raise ParseError(f"bad parent index {tokens[0]!r}", path=path, line=ln + 1)
        joints[j] = parse_floats(tokens[1:], 3, ln + 1, "joint position")
    ln += 1
    tokens = raw[ln].split()
    if len(tokens) != 2 or tokens[0] != "vertices":
        raise ParseError("expected 'vertices <count>' line", path=path, line=ln + 1)
    n_vertices = int(tokens[1])
    body = raw[ln + 1:]
    body = [b for b in body if b.strip()]
    if len(body) != n_vertices:
        raise ParseError(
            f"vertex block has {len(body)} lines, header declares {n_vertices}",
            path=path, line=ln + 2,
        )
    vertices = np.zeros((n_vertices, 3))
    labels = np.zeros(n_vertices, dtype=np.int64)
    skin_joints = np.zeros((n_vertices, MAX_SKIN_JOINTS), dtype=np.int64)
    skin_weights = np.zeros((n_vertices, MAX_SKIN_JOINTS))
    for v in range(n_vertices):
        lineno = ln + 2 + v
        tokens = body[v].split()
        if len(tokens) < 6 or len(tokens) % 2 != 0:
            raise ParseError(
                "vertex line needs '<x> <y> <z> <part> <joint> <weight> [...]'",
                path=path, line=lineno,
            )
        vertices[v] = parse_floats(tokens[:3], 3, lineno, "vertex position")
        try:
            labels[v] = int(tokens[3])
        except ValueError:
            raise ParseError(f"bad part label {tokens[3]!r}", path=path, line=lineno)
        pairs = tokens[4:]
        if len(pairs) > 2 * MAX_SKIN_JOINTS:
            raise ParseError(f"more than {MAX_SKIN_JOINTS} skin weights", path=path, line=lineno)
        for slot in range(len(pairs) // 2):
            try:
                skin_joints[v, slot] = int(pairs[2 * slot])
                skin_weights[v, slot] = float(pairs[2 * slot + 1])
            except ValueError as exc:
                raise ParseError(f"bad skin weight pair: {exc}", path=path, line=lineno)
    template = BodyTemplate(
        vertices=vertices, part_labels=labels, skin_joints=skin_joints,
        skin_weights=skin_weights, joints=joints, parents=parents,
        shape_params=np.asarray(shape),
    )
    validate_template(template)
    return template
