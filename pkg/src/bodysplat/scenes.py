"""Synthetic articulated scenes: procedural body templates and datasets.

The generator builds a capsule-limb humanoid whose 15 parts are sampled to
exactly 6890 surface points, rigged to the canonical 24-joint tree. Dataset
synthesis renders the template itself (as small opaque Gaussians) through a
camera ring along a smooth seeded pose trajectory, producing ground-truth
images, semantic masks, per-frame poses, and a manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, knn_all
from .errors import ParseError
from .template import (
    BodyTemplate,
    JOINT_PARENTS,
    NUM_VERTICES,
    PART_DRIVING_JOINT,
    PoseParams,
    init_gaussians,
    pose_vertices,
    save_template,
    validate_template,
)
from . import template as tpl

PROPORTION_NAMES = [
    "height", "torso_length", "arm_length", "leg_length", "head_size",
    "thickness", "shoulder_width", "hip_width", "hand_size", "foot_size",
]
PROPORTION_RANGE = (0.5, 2.0)


def default_proportions() -> np.ndarray:
    return np.ones(10)


def _skeleton(p: np.ndarray) -> np.ndarray:
    """Rest joint positions (y up, meters) for the given 10 proportions."""
    height, torso, arm, leg, head, _thick, shoulder, hip, hand, foot = p
    hip_y = 0.95 * leg
    spine_top = hip_y + 0.47 * torso
    j = np.zeros((24, 3))
    j[0] = (0, hip_y, 0)                                   # pelvis
    j[1] = (0.09 * hip, hip_y - 0.04, 0)                   # l_hip
    j[2] = (-0.09 * hip, hip_y - 0.04, 0)                  # r_hip
    j[3] = (0, hip_y + 0.10 * torso, 0)                    # spine1
    j[4] = (0.10 * hip, hip_y - 0.04 - 0.43 * leg, 0)      # l_knee
    j[5] = (-0.10 * hip, hip_y - 0.04 - 0.43 * leg, 0)     # r_knee
    j[6] = (0, hip_y + 0.20 * torso, 0)                    # spine2
    j[7] = (0.10 * hip, 0.08 * leg, 0)                     # l_ankle
    j[8] = (-0.10 * hip, 0.08 * leg, 0)                    # r_ankle
    j[9] = (0, hip_y + 0.30 * torso, 0)                    # spine3
    j[10] = (0.10 * hip, 0.02, 0.14 * foot)                # l_toe
    j[11] = (-0.10 * hip, 0.02, 0.14 * foot)               # r_toe
    j[12] = (0, spine_top, 0)                              # neck
    j[13] = (0.06 * shoulder, spine_top - 0.03, 0)         # l_collar
    j[14] = (-0.06 * shoulder, spine_top - 0.03, 0)        # r_collar
    j[15] = (0, spine_top + 0.09, 0)                       # head
    j[16] = (0.19 * shoulder, spine_top - 0.04, 0)         # l_shoulder
    j[17] = (-0.19 * shoulder, spine_top - 0.04, 0)        # r_shoulder
    j[18] = (0.19 * shoulder + 0.27 * arm, spine_top - 0.04, 0)   # l_elbow
    j[19] = (-0.19 * shoulder - 0.27 * arm, spine_top - 0.04, 0)  # r_elbow
    j[20] = (0.19 * shoulder + 0.52 * arm, spine_top - 0.04, 0)   # l_wrist
    j[21] = (-0.19 * shoulder - 0.52 * arm, spine_top - 0.04, 0)  # r_wrist
    j[22] = (0.19 * shoulder + 0.62 * arm * hand, spine_top - 0.04, 0)   # l_palm
    j[23] = (-0.19 * shoulder - 0.62 * arm * hand, spine_top - 0.04, 0)  # r_palm
    return j * height


def _capsules(p: np.ndarray, joints: np.ndarray):
    """(part -> (a, b, radius)) capsule per body part."""
    height, _torso, _arm, _leg, head, thick, *_ , hand, foot = p
    r = 0.05 * thick * height
    head_top = joints[15] + np.array([0, 0.20 * head * height, 0])
    caps = {
        tpl.HEAD: (joints[15], head_top, 1.9 * r * head),
        tpl.NECK: (joints[12], joints[15], 0.9 * r),
        tpl.TORSO: (joints[0], joints[12], 2.6 * r),
        tpl.L_UPPER_ARM: (joints[16], joints[18], 0.85 * r),
        tpl.R_UPPER_ARM: (joints[17], joints[19], 0.85 * r),
        tpl.L_FOREARM: (joints[18], joints[20], 0.7 * r),
        tpl.R_FOREARM: (joints[19], joints[21], 0.7 * r),
        tpl.L_HAND: (joints[20], joints[22], 0.55 * r * hand),
        tpl.R_HAND: (joints[21], joints[23], 0.55 * r * hand),
        tpl.L_THIGH: (joints[1], joints[4], 1.3 * r),
        tpl.R_THIGH: (joints[2], joints[5], 1.3 * r),
        tpl.L_CALF: (joints[4], joints[7], 0.95 * r),
        tpl.R_CALF: (joints[5], joints[8], 0.95 * r),
        tpl.L_FOOT: (joints[7], joints[10], 0.65 * r * foot),
        tpl.R_FOOT: (joints[8], joints[11], 0.65 * r * foot),
    }
    return caps


def _capsule_area(a, b, r):
    length = np.linalg.norm(b - a)
    return 2 * np.pi * r * length + 4 * np.pi * r * r


def _sample_capsule_surface(a, b, r, n, rng):
    """n points uniform on the surface of the capsule from a to b."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    w = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
    # orthonormal frame around w
    ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, ref)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    side = 2 * np.pi * r * length
    cap = 4 * np.pi * r * r
    pick = rng.uniform(0, side + cap, size=n)
    on_side = pick < side
    pts = np.empty((n, 3))
    k = int(on_side.sum())
    phi = rng.uniform(0, 2 * np.pi, size=k)
    t = rng.uniform(0, length, size=k)
    pts[on_side] = (a + t[:, None] * w
                    + r * np.cos(phi)[:, None] * u + r * np.sin(phi)[:, None] * v)
    m = n - k
    if m:
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        along = d @ w
        top = along >= 0
        centers = np.where(top[:, None], b, a)
        pts[~on_side] = centers + r * d
    return pts


def _axial_coordinate(points, a, b):
    axis = b - a
    length = np.linalg.norm(axis)
    return (points - a) @ (axis / length), length


def generate_template(seed: int, proportions=None) -> BodyTemplate:
    """Procedural capsule humanoid with exactly 6890 surface points.

    Points are allocated to the 15 parts proportionally to capsule surface
    area; vertices near a part's proximal joint blend its driving joint with
    the parent joint, everything else binds rigidly.
    """
    p = default_proportions() if proportions is None else np.asarray(proportions, float)
    if p.shape != (10,):
        raise ValueError("proportions must have 10 entries")
    if np.any(p < PROPORTION_RANGE[0]) or np.any(p > PROPORTION_RANGE[1]):
        raise ValueError(f"proportions outside documented range {PROPORTION_RANGE}")
    rng = np.random.default_rng(seed)
    joints = _skeleton(p)
    caps = _capsules(p, joints)
    areas = np.array([_capsule_area(*caps[m]) for m in range(15)])
    quota = areas / areas.sum() * NUM_VERTICES
    counts = np.floor(quota).astype(int)
    remainder = NUM_VERTICES - counts.sum()
    for m in np.argsort(-(quota - counts))[:remainder]:
        counts[m] += 1

    vertices = np.zeros((NUM_VERTICES, 3))
    labels = np.zeros(NUM_VERTICES, dtype=np.int64)
    skin_joints = np.zeros((NUM_VERTICES, 4), dtype=np.int64)
    skin_weights = np.zeros((NUM_VERTICES, 4))
    cursor = 0
    for m in range(15):
        a, b, r = caps[m]
        n = counts[m]
        pts = _sample_capsule_surface(a, b, r, n, rng)
        sl = slice(cursor, cursor + n)
        vertices[sl] = pts
        labels[sl] = m
        driving = PART_DRIVING_JOINT[m]
        parent = int(JOINT_PARENTS[driving])
        skin_joints[sl, 0] = driving
        skin_weights[sl, 0] = 1.0
        if parent >= 0 and m != tpl.TORSO:
            # blend toward the parent bone near the proximal joint
            t, _ = _axial_coordinate(pts, a, b)
            blend = 0.8 * r
            z = np.clip(t / blend, 0.0, 1.0)
            w_own = 0.5 + 0.5 * z
            skin_weights[sl, 0] = w_own
            skin_joints[sl, 1] = parent
            skin_weights[sl, 1] = 1.0 - w_own
        cursor += n
    template = BodyTemplate(
        vertices=vertices, part_labels=labels, skin_joints=skin_joints,
        skin_weights=skin_weights, joints=joints, parents=JOINT_PARENTS.copy(),
        shape_params=p,
    )
    validate_template(template)
    return template


# --- pose trajectories --------------------------------------------------------

LIMB_JOINTS = [1, 2, 4, 5, 13, 14, 16, 17, 18, 19, 20, 21]
SPINE_JOINTS = [3, 6, 9, 12, 15]


def pose_trajectory(seed: int, n_source_frames: int, limb_amplitude: float = 0.25,
                    spine_amplitude: float = 0.08, root_spin: float = 0.0):
    """Smooth seeded poses: band-limited joint noise plus a root yaw sweep.

    Each joint axis mixes three low-frequency sinusoids; the root optionally
    sweeps linearly from -root_spin to +root_spin over the clip so a single
    camera sees most of the body. All magnitudes stay inside the canonical
    range.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0]))
    t = np.arange(n_source_frames) / max(1, n_source_frames - 1)
    freqs = np.array([0.5, 1.0, 1.5])
    amp = np.zeros(24)
    amp[LIMB_JOINTS] = limb_amplitude
    amp[SPINE_JOINTS] = spine_amplitude
    coeffs = rng.uniform(-1, 1, size=(24, 3, 3))   # joint, axis, harmonic
    phases = rng.uniform(0, 2 * np.pi, size=(24, 3, 3))
    poses = []
    for ti in t:
        waves = np.sin(2 * np.pi * freqs * ti + phases)        # (24, 3, 3)
        rotations = amp[:, np.newaxis] * (coeffs * waves).sum(axis=2) / 3.0
        rotations[0, 1] += root_spin * (2.0 * ti - 1.0)
        mags = np.linalg.norm(rotations, axis=1, keepdims=True)
        limit = 0.98 * np.pi
        scale = np.where(mags > limit, limit / np.maximum(mags, 1e-12), 1.0)
        poses.append(PoseParams(joint_rotations=rotations * scale))
    return poses


# --- cameras and ground truth --------------------------------------------------


def camera_ring(n_cameras: int, center, distance: float, image_size: int,
                focal: float, elevation: float = 0.0):
    """Cameras evenly spaced on a horizontal ring looking at ``center``.

    Camera 0 is tagged train, the rest test.
    """
    from .render import look_at

    entries = []
    center = np.asarray(center, dtype=np.float64)
    for i in range(n_cameras):
        angle = 2 * np.pi * i / n_cameras
        eye = center + np.array([
            distance * np.sin(angle), elevation, -distance * np.cos(angle),
        ])
        cam = look_at(eye, center, fx=focal, fy=focal,
                      width=image_size, height=image_size)
        entries.append((f"cam{i}", cam, "train" if i == 0 else "test"))
    return entries


def ground_truth_colors(template: BodyTemplate, seed: int) -> np.ndarray:
    """Per-vertex appearance: part base colors plus speckled local detail."""
    from .fileio import MASK_PALETTE

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC01]))
    base = MASK_PALETTE[template.part_labels + 1].astype(np.float64) / 255.0
    base = 0.15 + 0.6 * base
    colors = base + rng.normal(0.0, 0.05, size=base.shape)
    # sparse strong speckles give each part genuine high-frequency content
    n = len(colors)
    speckle = rng.random(n) < 0.03
    colors[speckle] = rng.uniform(0.05, 0.95, size=(int(speckle.sum()), 3))
    return np.clip(colors, 0.02, 0.98)


def reference_splatter(template: BodyTemplate, pose: PoseParams | None,
                       colors: np.ndarray, opacity: float = 0.99,
                       scale_factor: float = 0.7) -> GaussianCloud:
    """The template itself as small near-opaque Gaussians (ground truth)."""
    cloud = init_gaussians(template, posed=pose)
    cloud.opacities[:] = opacity
    cloud.scales *= scale_factor
    cloud.colors = np.array(colors, dtype=np.float64)
    return cloud


# --- dataset synthesis ----------------------------------------------------------


@dataclass
class SceneView:
    frame: int
    camera_id: str
    camera: object
    pose_path: str
    image_path: str
    mask_path: str
    split: str
    _pose: object = field(default=None, repr=False)
    _image: np.ndarray = field(default=None, repr=False)
    _mask: np.ndarray = field(default=None, repr=False)

    def pose(self) -> PoseParams:
        if self._pose is None:
            values = np.loadtxt(self.pose_path).reshape(25, 3)
            self._pose = PoseParams(joint_rotations=values[:24],
                                    root_translation=values[24])
        return self._pose

    def image(self) -> np.ndarray:
        if self._image is None:
            from .fileio import load_image
            self._image = load_image(self.image_path)
        return self._image

    def mask(self) -> np.ndarray:
        if self._mask is None:
            from .fileio import load_mask
            self._mask = load_mask(self.mask_path)
        return self._mask


@dataclass
class SceneDataset:
    root: str
    template_path: str
    views: list

    def split(self, tag: str):
        return [v for v in self.views if v.split == tag]

    @property
    def train_views(self):
        return self.split("train")

    @property
    def test_views(self):
        return self.split("test")


def _save_pose(pose: PoseParams, path):
    rows = np.vstack([pose.joint_rotations, pose.root_translation[np.newaxis]])
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def generate_dataset(template: BodyTemplate, n_frames: int, frame_stride: int,
                     cameras, seed: int, out_dir,
                     limb_amplitude: float = 0.25, root_spin: float = 0.0,
                     mask_alpha: float = 0.5) -> SceneDataset:
    """Render the ground-truth dataset and write it under ``out_dir``.

    Keeps every ``frame_stride``-th source frame for ``n_frames`` frames.
    Ground truth is the template splatted with near-opaque vertex Gaussians;
    masks are the argmax of the rendered semantics. Deterministic per seed.
    """
    from .fileio import save_image, save_mask, write_cameras
    from .render import argmax_mask, render

    cameras = list(cameras)
    if not cameras:
        raise ValueError("camera rig must contain at least one camera")
    out_dir = str(out_dir)
    for sub in ("poses", "images", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    template_path = os.path.join(out_dir, "template.txt")
    save_template(template, template_path)
    write_cameras(cameras, os.path.join(out_dir, "cameras.txt"))

    n_source = n_frames * frame_stride
    poses = pose_trajectory(seed, n_source, limb_amplitude=limb_amplitude,
                            root_spin=root_spin)
    colors = ground_truth_colors(template, seed)

    views = []
    manifest = ["frame\tcamera\tpose\timage\tmask\tsplit"]
    for fi in range(n_frames):
        pose = poses[fi * frame_stride]
        pose_rel = os.path.join("poses", f"frame_{fi:04d}.txt")
        _save_pose(pose, os.path.join(out_dir, pose_rel))
        gt_cloud = reference_splatter(template, pose, colors)
        for cam_id, cam, split in cameras:
            out = render(gt_cloud, cam)
            image_rel = os.path.join("images", f"f{fi:04d}_{cam_id}.png")
            mask_rel = os.path.join("masks", f"f{fi:04d}_{cam_id}.png")
            save_image(out.color, os.path.join(out_dir, image_rel))
            save_mask(argmax_mask(out, mask_alpha), os.path.join(out_dir, mask_rel))
            manifest.append(
                f"{fi}\t{cam_id}\t{pose_rel}\t{image_rel}\t{mask_rel}\t{split}"
            )
            views.append(SceneView(
                frame=fi, camera_id=cam_id, camera=cam,
                pose_path=os.path.join(out_dir, pose_rel),
                image_path=os.path.join(out_dir, image_rel),
                mask_path=os.path.join(out_dir, mask_rel),
                split=split,
            ))
    with open(os.path.join(out_dir, "manifest.tsv"), "w") as fh:
        fh.write("\n".join(manifest) + "\n")
    return SceneDataset(root=out_dir, template_path=template_path, views=views)


def load_dataset(root) -> SceneDataset:
    """Read a dataset directory back through its manifest."""
    from .errors import ParseError
    from .fileio import read_cameras

    root = str(root)
    manifest_path = os.path.join(root, "manifest.tsv")
    cameras = {cid: cam for cid, cam, _ in read_cameras(os.path.join(root, "cameras.txt"))}
    views = []
    with open(manifest_path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError("manifest line needs 6 fields", path=manifest_path, line=lineno)
        frame, cam_id, pose_rel, image_rel, mask_rel, split = fields
        if cam_id not in cameras:
            raise ParseError(f"unknown camera '{cam_id}'", path=manifest_path, line=lineno)
        paths = [os.path.join(root, rel) for rel in (pose_rel, image_rel, mask_rel)]
        for p in paths:
            if not os.path.exists(p):
                raise ParseError(f"missing file {p}", path=manifest_path, line=lineno)
        views.append(SceneView(
            frame=int(frame), camera_id=cam_id, camera=cameras[cam_id],
            pose_path=paths[0], image_path=paths[1], mask_path=paths[2], split=split,
        ))
    return SceneDataset(root=root, template_path=os.path.join(root, "template.txt"),
                        views=views)
