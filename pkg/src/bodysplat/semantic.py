"""Semantic consistency loss between rendered semantics and mask labels.

Each Gaussian is tied to the pixel its center projects into. The loss asks
the alpha-blended semantic distribution at that pixel, and at the pixels of
the point's k nearest 3D neighbors, to agree with the ground-truth mask
label there. Divergence is cross-entropy, so gradients flow back through
the renderer into every blend parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import GaussianCloud, knn_all
from .render import Camera, PointGradients, RenderOutput, Z_NEAR, render_with_grads

EPS = 1e-8


@dataclass
class SemanticSupervision:
    """Ground-truth mask for one training view: 0 background, 1..15 parts."""

    gt_mask: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        self.gt_mask = np.asarray(self.gt_mask)
        if self.gt_mask.min() < 0 or self.gt_mask.max() > 15:
            raise ValueError("mask labels must lie in [0, 15]")


def label_divergence(pixel_semantic: np.ndarray, target: np.ndarray):
    """Cross-entropy D(pixel, target) and its gradient w.r.t. the pixel side.

    The pixel distribution is alpha-scaled and may sum to less than one.
    """
    p = np.asarray(pixel_semantic, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    value = float(-np.sum(t * np.log(p + EPS)))
    grad = -t / (p + EPS)
    return value, grad


def pixels_of_cloud(cloud: GaussianCloud, camera: Camera):
    """Integer pixel of every center (floor rule) and a validity mask."""
    t = cloud.positions @ camera.rotation.T + camera.translation
    tz = t[:, 2]
    ok = tz > Z_NEAR
    safe = np.where(ok, tz, 1.0)
    u = camera.fx * t[:, 0] / safe + camera.cx
    v = camera.fy * t[:, 1] / safe + camera.cy
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)
    ok &= (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    return px, py, ok


def pixel_of_gaussian(point, camera: Camera):
    """Pixel containing one projected center, or None when off-screen."""
    cloud = GaussianCloud(
        positions=point.position[np.newaxis],
        rotations=point.rotation[np.newaxis],
        scales=point.scale[np.newaxis],
        opacities=[point.opacity],
        colors=point.color[np.newaxis],
        semantics=point.semantic[np.newaxis],
    )
    px, py, ok = pixels_of_cloud(cloud, camera)
    if not ok[0]:
        return None
    return int(px[0]), int(py[0])


def semantic_loss_adjoints(cloud: GaussianCloud, render: RenderOutput,
                           supervision: SemanticSupervision, camera: Camera,
                           k: int):
    """Loss value plus the (H, W, 15) adjoint image on the semantic channels.

    Points whose center is off-screen or lands on a background mask pixel
    are excluded from the average; neighbor terms falling on such pixels
    contribute zero while keeping the 1/k normalization.
    """
    n = len(cloud)
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    mask = supervision.gt_mask
    if mask.shape != (camera.height, camera.width):
        raise ValueError("mask size does not match the camera")

    px, py, ok = pixels_of_cloud(cloud, camera)
    labels = np.where(ok, mask[np.clip(py, 0, camera.height - 1),
                               np.clip(px, 0, camera.width - 1)], 0)
    included = ok & (labels > 0)
    n_inc = int(included.sum())
    adjoint = np.zeros((camera.height, camera.width, 15))
    if n_inc == 0:
        return 0.0, adjoint, 0

    neighbors = knn_all(cloud.positions, k)
    sem_img = render.semantic
    anchors = np.nonzero(included)[0]
    part = labels[anchors] - 1

    # anchor terms: D(X at own pixel, one-hot own label)
    own_p = sem_img[py[anchors], px[anchors], part]
    loss = float(-np.log(own_p + EPS).sum())
    np.add.at(adjoint, (py[anchors], px[anchors], part), -1.0 / (own_p + EPS) / n_inc)

    # neighbor terms: D(X at neighbor pixel, one-hot own label) / k
    nb = neighbors[anchors]                      # (n_inc, k)
    nb_ok = ok[nb] & (labels[nb] > 0)
    nb_flat = nb.ravel()
    valid = nb_ok.ravel()
    anchor_part = np.repeat(part, k)[valid]
    nb_px = px[nb_flat][valid]
    nb_py = py[nb_flat][valid]
    nb_p = sem_img[nb_py, nb_px, anchor_part]
    loss += float(-np.log(nb_p + EPS).sum()) / k
    np.add.at(adjoint, (nb_py, nb_px, anchor_part), -1.0 / (nb_p + EPS) / (n_inc * k))

    return loss / n_inc, adjoint, n_inc


def semantic_loss(cloud: GaussianCloud, render: RenderOutput,
                  supervision: SemanticSupervision, camera: Camera, k: int):
    """Scalar loss and gradients for every blend parameter.

    The render passed in must come from this cloud and camera; gradients are
    produced by replaying the blend with the loss adjoints.
    """
    value, adjoint, _ = semantic_loss_adjoints(cloud, render, supervision, camera, k)
    full = np.zeros((camera.height, camera.width, 18))
    full[..., 3:] = adjoint
    _, grads = render_with_grads(cloud, camera, full)
    return value, grads
