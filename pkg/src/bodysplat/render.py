"""CPU splatting renderer with semantic channels and an exact backward pass.

Both render paths share one blend definition. Per camera, every Gaussian is
projected to a 2D splat (EWA-style: cov2d = J W Sigma W^T J^T + 0.3 I) and
culled when behind the near plane or when its 3-sigma circle misses the
image. Per pixel, the surviving splats are composited front to back:

    alpha_i = min(0.99, opacity_i * exp(-q_i / 2)),  q_i = d^T cov2d^-1 d
    skip the splat when alpha_i < 1/255
    stop once transmittance drops below 1e-4
    color    += c_i * alpha_i * T;  semantic += y_i * alpha_i * T
    T        *= 1 - alpha_i

``render_reference`` evaluates this definition literally with per-pixel
loops and is the oracle; ``render`` computes the identical result by sorting
(pixel, splat) pairs and running segmented scans, which is what the training
loop uses. ``render_with_grads`` is the exact adjoint of that forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, covariances_from_rs, quats_to_matrices

Z_NEAR = 0.01
COV2D_REG = 0.3          # low-pass regularizer added to cov2d
ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped
T_MIN = 1e-4             # per-pixel early termination
CULL_SIGMA = 3.0


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) world-to-camera, orthonormal, det +1
    translation: np.ndarray   # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")


def look_at(eye, target, fx, fy, width, height, cx=None, cy=None) -> Camera:
    """Camera at ``eye`` looking toward ``target``, world +y appearing up."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    down = np.array([0.0, -1.0, 0.0])
    if abs(z @ down) > 0.999:
        down = np.array([0.0, 0.0, -1.0])
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Camera(
        fx=fx, fy=fy,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        rotation=rot, translation=-rot @ eye, width=width, height=height,
    )


@dataclass
class Splat2D:
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, regularized
    depth: float          # camera-space z
    source_index: int


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3)
    semantic: np.ndarray   # (H, W, 15)
    alpha: np.ndarray      # (H, W)
    depth: np.ndarray      # (H, W) opacity-weighted depth


@dataclass
class PointGradients:
    """Per-point parameter gradients; culled points carry zeros."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    semantic: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PointGradients":
        return cls(
            position=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
            scale=np.zeros((n, 3)), opacity=np.zeros(n),
            color=np.zeros((n, 3)), semantic=np.zeros((n, 15)),
        )


def _camera_space(cloud: GaussianCloud, camera: Camera):
    return cloud.positions @ camera.rotation.T + camera.translation


def project_cloud(cloud: GaussianCloud, camera: Camera):
    """Project every Gaussian; returns per-point splat arrays and visibility.

    cov2d is returned as the (a, b, c) packing of [[a, b], [b, c]].
    """
    t = _camera_space(cloud, camera)
    tz = t[:, 2]
    in_front = tz > Z_NEAR
    safe_z = np.where(in_front, tz, 1.0)
    mean2d = np.stack([
        camera.fx * t[:, 0] / safe_z + camera.cx,
        camera.fy * t[:, 1] / safe_z + camera.cy,
    ], axis=1)

    cov3d = covariances_from_rs(cloud.rotations, cloud.scales)
    w = camera.rotation
    n = len(cloud)
    # J rows: d(mean2d)/d(t); third row of the classic 3x3 Jacobian is unused
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = camera.fx / safe_z
    j[:, 0, 2] = -camera.fx * t[:, 0] / safe_z ** 2
    j[:, 1, 1] = camera.fy / safe_z
    j[:, 1, 2] = -camera.fy * t[:, 1] / safe_z ** 2
    teff = j @ w
    cov2d = teff @ cov3d @ np.transpose(teff, (0, 2, 1))
    a = cov2d[:, 0, 0] + COV2D_REG
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1] + COV2D_REG

    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)
    on_screen = (
        (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width - 1)
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height - 1)
    )
    visible = in_front & on_screen & (det > 0)
    return mean2d, np.stack([a, b, c], axis=1), tz, lam_max, visible


def project(point, camera: Camera):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    cloud = GaussianCloud(
        positions=point.position[np.newaxis],
        rotations=point.rotation[np.newaxis],
        scales=point.scale[np.newaxis],
        opacities=[point.opacity],
        colors=point.color[np.newaxis],
        semantics=point.semantic[np.newaxis],
    )
    mean2d, abc, tz, _, visible = project_cloud(cloud, camera)
    if not visible[0]:
        return None
    a, b, c = abc[0]
    return Splat2D(
        mean2d=mean2d[0], cov2d=np.array([[a, b], [b, c]]),
        depth=float(tz[0]), source_index=0,
    )


def _empty_output(camera: Camera) -> RenderOutput:
    h, w = camera.height, camera.width
    return RenderOutput(
        color=np.zeros((h, w, 3)), semantic=np.zeros((h, w, 15)),
        alpha=np.zeros((h, w)), depth=np.zeros((h, w)),
    )


def render_reference(cloud: GaussianCloud, camera: Camera) -> RenderOutput:
    """Literal per-pixel blender: the slow oracle the fast path must match."""
    mean2d, abc, tz, _, visible = project_cloud(cloud, camera)
    out = _empty_output(camera)
    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        return out
    order = idx[np.lexsort((idx, tz[idx]))]
    det = abc[:, 0] * abc[:, 2] - abc[:, 1] ** 2
    conic = np.stack([abc[:, 2] / det, -abc[:, 1] / det, abc[:, 0] / det], axis=1)
    for py in range(camera.height):
        for px in range(camera.width):
            trans = 1.0
            for s in order:
                if trans < T_MIN:
                    break
                dx = px - mean2d[s, 0]
                dy = py - mean2d[s, 1]
                ca, cb, cc = conic[s]
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                alpha = min(ALPHA_CLAMP, cloud.opacities[s] * np.exp(-0.5 * q))
                if alpha < ALPHA_MIN:
                    continue
                wgt = alpha * trans
                out.color[py, px] += wgt * cloud.colors[s]
                out.semantic[py, px] += wgt * cloud.semantics[s]
                out.alpha[py, px] += wgt
                out.depth[py, px] += wgt * tz[s]
                trans *= 1.0 - alpha
    return out


def _pair_tables(cloud: GaussianCloud, camera: Camera):
    """Flatten the scene into depth-ranked (pixel, splat) pairs.

    Pairs are restricted to a per-splat bounding box that conservatively
    contains every pixel where alpha could reach ALPHA_MIN, then filtered to
    exactly the alpha >= ALPHA_MIN set, sorted by (pixel, depth rank), and
    annotated with blend weights from a segmented transmittance scan.
    """
    mean2d, abc, tz, lam_max, visible = project_cloud(cloud, camera)
    vis = np.nonzero(visible)[0]
    empty = dict(n_pairs=0, vis=vis)
    if len(vis) == 0:
        return empty
    opac = cloud.opacities[vis]
    live = opac > ALPHA_MIN
    vis = vis[live]
    if len(vis) == 0:
        return empty
    opac = cloud.opacities[vis]
    m2 = mean2d[vis]
    a, b, c = abc[vis, 0], abc[vis, 1], abc[vis, 2]
    det = a * c - b * b
    # conic (inverse covariance) entries
    ca, cb, cc = c / det, -b / det, a / det
    depth = tz[vis]

    # radius where alpha falls below ALPHA_MIN, conservative via lambda_max
    qmax = 2.0 * np.log(opac / ALPHA_MIN)
    radius = np.sqrt(qmax * lam_max[vis])
    x0 = np.clip(np.ceil(m2[:, 0] - radius), 0, camera.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(m2[:, 0] + radius), 0, camera.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(m2[:, 1] - radius), 0, camera.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(m2[:, 1] + radius), 0, camera.height - 1).astype(np.int64)
    wbox = x1 - x0 + 1
    hbox = y1 - y0 + 1
    counts = wbox * hbox
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    if total == 0:
        return empty

    sid = np.repeat(np.arange(len(vis)), counts)       # local splat id per pair
    local = np.arange(total) - starts[sid]
    px = x0[sid] + local % wbox[sid]
    py = y0[sid] + local // wbox[sid]

    dx = px - m2[sid, 0]
    dy = py - m2[sid, 1]
    q = ca[sid] * dx * dx + 2.0 * cb[sid] * dx * dy + cc[sid] * dy * dy
    gauss = np.exp(-0.5 * q)
    alpha_raw = opac[sid] * gauss
    alpha = np.minimum(ALPHA_CLAMP, alpha_raw)
    keep = alpha >= ALPHA_MIN
    sid, px, py, dx, dy, gauss, alpha = (
        arr[keep] for arr in (sid, px, py, dx, dy, gauss, alpha)
    )
    clamped = alpha_raw[keep] >= ALPHA_CLAMP
    if len(sid) == 0:
        return empty

    # depth rank with source-index tie-break makes compositing deterministic
    rank = np.empty(len(vis), dtype=np.int64)
    rank[np.lexsort((vis, depth))] = np.arange(len(vis))
    pix = py * camera.width + px
    order = np.lexsort((rank[sid], pix))
    sid, px, py, dx, dy, gauss, alpha, pix, clamped = (
        arr[order] for arr in (sid, px, py, dx, dy, gauss, alpha, pix, clamped)
    )

    seg_start = np.concatenate([[True], pix[1:] != pix[:-1]])
    log_t = np.concatenate([[0.0], np.cumsum(np.log1p(-alpha))[:-1]])
    base = log_t[np.maximum.accumulate(np.where(seg_start, np.arange(len(pix)), 0))]
    t_before = np.exp(log_t - base)
    active = t_before >= T_MIN
    weight = np.where(active, alpha * t_before, 0.0)

    return dict(
        n_pairs=len(sid), vis=vis, sid=sid, pix=pix, dx=dx, dy=dy,
        gauss=gauss, alpha=alpha, clamped=clamped, active=active,
        t_before=t_before, weight=weight, seg_start=seg_start,
        depth=depth, conic=np.stack([ca, cb, cc], axis=1), mean2d=m2,
    )


def _accumulate(tables, cloud, camera) -> RenderOutput:
    out = _empty_output(camera)
    if tables["n_pairs"] == 0:
        return out
    vis, sid, pix, weight = tables["vis"], tables["sid"], tables["pix"], tables["weight"]
    hw = camera.height * camera.width
    shape2 = (camera.height, camera.width)
    for ch in range(3):
        out.color[..., ch] = np.bincount(
            pix, weights=weight * cloud.colors[vis[sid], ch], minlength=hw
        ).reshape(shape2)
    for ch in range(15):
        out.semantic[..., ch] = np.bincount(
            pix, weights=weight * cloud.semantics[vis[sid], ch], minlength=hw
        ).reshape(shape2)
    out.alpha[:] = np.bincount(pix, weights=weight, minlength=hw).reshape(shape2)
    out.depth[:] = np.bincount(
        pix, weights=weight * tables["depth"][sid], minlength=hw
    ).reshape(shape2)
    return out


def render(cloud: GaussianCloud, camera: Camera) -> RenderOutput:
    """Forward render of color, semantic, alpha, and depth buffers."""
    if len(cloud) == 0:
        return _empty_output(camera)
    return _accumulate(_pair_tables(cloud, camera), cloud, camera)


def render_with_grads(cloud: GaussianCloud, camera: Camera,
                      pixel_loss_grads: np.ndarray, _tables=None, _out=None):
    """Render and backpropagate pixel adjoints to every Gaussian parameter.

    ``pixel_loss_grads`` has shape (H, W, 18): 3 color channels followed by
    15 semantic channels. Returns (RenderOutput, PointGradients); points that
    were culled or never contributed receive zero gradients. ``_tables`` and
    ``_out`` let callers that already ran the forward pass skip repeating it.
    """
    adj = np.asarray(pixel_loss_grads, dtype=np.float64)
    if adj.shape != (camera.height, camera.width, 18):
        raise ValueError(
            f"adjoint shape {adj.shape} does not match (H, W, 18) = "
            f"({camera.height}, {camera.width}, 18)"
        )
    n = len(cloud)
    grads = PointGradients.zeros(n)
    tables = _pair_tables(cloud, camera) if _tables is None else _tables
    out = _accumulate(tables, cloud, camera) if _out is None else _out
    if tables["n_pairs"] == 0:
        return out, grads

    vis = tables["vis"]
    sid, pix = tables["sid"], tables["pix"]
    weight, t_before, alpha = tables["weight"], tables["t_before"], tables["alpha"]
    active, clamped = tables["active"], tables["clamped"]
    dx, dy, gauss = tables["dx"], tables["dy"], tables["gauss"]
    seg_start = tables["seg_start"]
    m = len(vis)
    gsid = vis[sid]  # global point index per pair

    adj_c = adj[..., :3].reshape(-1, 3)[pix]
    adj_s = adj[..., 3:].reshape(-1, 15)[pix]
    # u: how much one unit of blend weight at this pair changes the loss
    u = np.einsum("pc,pc->p", cloud.colors[gsid], adj_c)
    u += np.einsum("pc,pc->p", cloud.semantics[gsid], adj_s)

    # linear channels
    for ch in range(3):
        grads.color[:, ch] = np.bincount(gsid, weights=weight * adj_c[:, ch], minlength=n)
    for ch in range(15):
        grads.semantic[:, ch] = np.bincount(gsid, weights=weight * adj_s[:, ch], minlength=n)

    # d loss / d alpha_i = T_i u_i - (sum of downstream w_j u_j) / (1 - alpha_i)
    wu = weight * u
    rev_cum = np.cumsum(wu[::-1])[::-1]
    tail = np.concatenate([rev_cum[1:], [0.0]])  # sum of wu strictly after i
    seg_last = np.concatenate([seg_start[1:], [True]])
    # subtract the part of the tail belonging to later pixel segments
    last_indices = np.nonzero(seg_last)[0]
    seg_tail_base = tail[last_indices][np.searchsorted(last_indices, np.arange(len(pix)))]
    downstream = tail - seg_tail_base
    d_alpha = np.where(active, t_before * u - downstream / (1.0 - alpha), 0.0)

    free = active & ~clamped  # pairs where alpha responds to opacity and q
    d_opacity = np.where(free, d_alpha * gauss, 0.0)
    grads.opacity[:] = np.bincount(gsid, weights=d_opacity, minlength=n)
    d_q = np.where(free, d_alpha * (-0.5) * alpha, 0.0)

    conic = tables["conic"]
    ca, cb, cc = conic[sid, 0], conic[sid, 1], conic[sid, 2]
    # d = pixel - mean2d, so dq/dmean2d = -2 Conic d
    d_mx = np.bincount(gsid, weights=-d_q * (2 * ca * dx + 2 * cb * dy), minlength=n)
    d_my = np.bincount(gsid, weights=-d_q * (2 * cb * dx + 2 * cc * dy), minlength=n)
    d_conic_a = np.bincount(gsid, weights=d_q * dx * dx, minlength=n)
    d_conic_b = np.bincount(gsid, weights=d_q * 2.0 * dx * dy, minlength=n)
    d_conic_c = np.bincount(gsid, weights=d_q * dy * dy, minlength=n)

    _project_backward(
        cloud, camera, grads,
        d_mean2d=np.stack([d_mx, d_my], axis=1),
        d_conic=np.stack([d_conic_a, d_conic_b, d_conic_c], axis=1),
    )
    return out, grads


def _project_backward(cloud, camera, grads, d_mean2d, d_conic):
    """Chain pixel-space gradients through projection to 3D parameters."""
    t = _camera_space(cloud, camera)
    tz = t[:, 2]
    _, abc, _, _, visible = project_cloud(cloud, camera)
    live = visible & (
        (np.abs(d_mean2d).sum(axis=1) > 0) | (np.abs(d_conic).sum(axis=1) > 0)
    )
    idx = np.nonzero(live)[0]
    if len(idx) == 0:
        return
    tz = tz[idx]
    tx, ty = t[idx, 0], t[idx, 1]
    fx, fy = camera.fx, camera.fy

    # conic = inv(cov2d): dL/dcov2d = -inv @ K @ inv with K the sym adjoint
    a, b, c = abc[idx, 0], abc[idx, 1], abc[idx, 2]
    det = a * c - b * b
    inv = np.empty((len(idx), 2, 2))
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    k = np.empty((len(idx), 2, 2))
    k[:, 0, 0] = d_conic[idx, 0]
    k[:, 0, 1] = k[:, 1, 0] = 0.5 * d_conic[idx, 1]
    k[:, 1, 1] = d_conic[idx, 2]
    d_cov = -inv @ k @ inv

    # cov2d = T_eff cov3d T_eff^T + reg; T_eff = J W
    w = camera.rotation
    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * tx / tz ** 2
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * ty / tz ** 2
    teff = j @ w
    cov3d = covariances_from_rs(cloud.rotations[idx], cloud.scales[idx])
    d_cov3d = np.transpose(teff, (0, 2, 1)) @ d_cov @ teff
    d_teff = 2.0 * d_cov @ teff @ cov3d
    d_j = d_teff @ w.T

    # J depends on the camera-space point
    d_tx = d_j[:, 0, 2] * (-fx / tz ** 2)
    d_ty = d_j[:, 1, 2] * (-fy / tz ** 2)
    d_tz = (
        d_j[:, 0, 0] * (-fx / tz ** 2)
        + d_j[:, 0, 2] * (2 * fx * tx / tz ** 3)
        + d_j[:, 1, 1] * (-fy / tz ** 2)
        + d_j[:, 1, 2] * (2 * fy * ty / tz ** 3)
    )
    # mean2d = (fx tx / tz + cx, fy ty / tz + cy)
    gmx, gmy = d_mean2d[idx, 0], d_mean2d[idx, 1]
    d_tx += gmx * fx / tz
    d_ty += gmy * fy / tz
    d_tz += -gmx * fx * tx / tz ** 2 - gmy * fy * ty / tz ** 2
    d_t = np.stack([d_tx, d_ty, d_tz], axis=1)
    grads.position[idx] += d_t @ w

    # cov3d = M M^T, M = R diag(s)
    d_sym = 0.5 * (d_cov3d + np.transpose(d_cov3d, (0, 2, 1)))
    rot = quats_to_matrices(cloud.rotations[idx])
    mmat = rot * cloud.scales[idx][:, np.newaxis, :]
    d_m = 2.0 * d_sym @ mmat
    grads.scale[idx] += np.einsum("nik,nik->nk", rot, d_m)
    d_r = d_m * cloud.scales[idx][:, np.newaxis, :]

    q = cloud.rotations[idx]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    qw, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_r
    d_qw = 2.0 * (
        -g[:, 0, 1] * qz + g[:, 0, 2] * qy + g[:, 1, 0] * qz
        - g[:, 1, 2] * qx - g[:, 2, 0] * qy + g[:, 2, 1] * qx
    )
    d_qx = 2.0 * (
        g[:, 0, 1] * qy + g[:, 0, 2] * qz + g[:, 1, 0] * qy
        - 2 * g[:, 1, 1] * qx - g[:, 1, 2] * qw + g[:, 2, 0] * qz
        + g[:, 2, 1] * qw - 2 * g[:, 2, 2] * qx
    )
    d_qy = 2.0 * (
        -2 * g[:, 0, 0] * qy + g[:, 0, 1] * qx + g[:, 0, 2] * qw
        + g[:, 1, 0] * qx + g[:, 1, 2] * qz - g[:, 2, 0] * qw
        + g[:, 2, 1] * qz - 2 * g[:, 2, 2] * qy
    )
    d_qz = 2.0 * (
        -2 * g[:, 0, 0] * qz - g[:, 0, 1] * qw + g[:, 0, 2] * qx
        + g[:, 1, 0] * qw - 2 * g[:, 1, 1] * qz + g[:, 1, 2] * qy
        + g[:, 2, 0] * qx + g[:, 2, 1] * qy
    )
    d_qn = np.stack([d_qw, d_qx, d_qy, d_qz], axis=1)
    # through the normalization q -> q / |q|
    grads.rotation[idx] += (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / norm


def argmax_mask(output: RenderOutput, alpha_threshold: float) -> np.ndarray:
    """Per-pixel part labels: 0 background, 1..15 the dominant part."""
    if not 0.0 < alpha_threshold < 1.0:
        raise ValueError("alpha_threshold must be inside (0, 1)")
    labels = output.semantic.argmax(axis=2).astype(np.uint8) + 1
    labels[output.alpha < alpha_threshold] = 0
    return labels
