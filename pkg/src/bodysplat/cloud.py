"""Gaussian point cloud data model with body-part semantic attributes.

A cloud stores one anisotropic 3D Gaussian per point: position, unit
quaternion rotation, positive per-axis scale, opacity, RGB color, and a
length-15 probability vector over body parts. Storage is
structure-of-arrays so that projection, blending, and optimization can
run vectorized; ``point(i)`` gives an attribute view of a single point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCovarianceError

NUM_PARTS = 15

QUAT_NORM_TOL = 1e-6
SEMANTIC_SUM_TOL = 1e-6

# Below this size an exhaustive scan beats building a kd-tree.
BRUTE_FORCE_MAX = 256


@dataclass
class GaussianPoint:
    """A single Gaussian with semantic attributes (arrays are views)."""

    position: np.ndarray   # (3,) world units
    rotation: np.ndarray   # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray      # (3,) strictly positive world units
    opacity: float         # in [0, 1]
    color: np.ndarray      # (3,) RGB in [0, 1]
    semantic: np.ndarray   # (15,) probability vector over body parts


@dataclass
class GaussianCloud:
    """Ordered Gaussian collection; ``generation`` counts densify/prune passes."""

    positions: np.ndarray   # (N, 3)
    rotations: np.ndarray   # (N, 4)
    scales: np.ndarray      # (N, 3)
    opacities: np.ndarray   # (N,)
    colors: np.ndarray      # (N, 3)
    semantics: np.ndarray   # (N, 15)
    generation: int = 0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        self.semantics = np.atleast_2d(np.asarray(self.semantics, dtype=np.float64))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def point(self, i: int) -> GaussianPoint:
        return GaussianPoint(
            position=self.positions[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
            semantic=self.semantics[i],
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            scales=self.scales.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            semantics=self.semantics.copy(),
            generation=self.generation,
        )


@dataclass
class Violation:
    """One invariant violation found by :func:`validate_cloud`."""

    index: int
    fieldname: str
    message: str

    def __str__(self):
        return f"point {self.index}: {self.fieldname}: {self.message}"


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Vectorized quaternion-to-rotation-matrix, (N, 4) -> (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance_from_rs(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Build the 3x3 covariance R S S^T R^T from a quaternion and a scale.

    The factorization keeps the result symmetric positive definite for any
    unit quaternion and positive scale.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    norm = np.linalg.norm(rotation)
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise ValueError(f"quaternion norm {norm:.8f} deviates from 1 beyond tolerance")
    if np.any(scale <= 0):
        raise ValueError(f"scale must be strictly positive, got {scale}")
    r = quat_to_matrix(rotation)
    m = r * scale[np.newaxis, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def covariances_from_rs(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Vectorized covariance construction, (N, 4) x (N, 3) -> (N, 3, 3)."""
    r = quats_to_matrices(rotations)
    m = r * np.asarray(scales, dtype=np.float64)[:, np.newaxis, :]
    return m @ np.transpose(m, (0, 2, 1))


def evaluate_density(point: GaussianPoint, x: np.ndarray) -> float:
    """Normalized Gaussian density of ``point`` at location ``x``."""
    cov = covariance_from_rs(point.rotation, point.scale)
    if np.linalg.cond(cov) > 1e12:
        raise DegenerateCovarianceError(
            f"covariance condition number {np.linalg.cond(cov):.3e} exceeds 1e12"
        )
    d = np.asarray(x, dtype=np.float64) - point.position
    sol = np.linalg.solve(cov, d)
    quad = float(d @ sol)
    det = float(np.linalg.det(cov))
    return float((2.0 * np.pi) ** -1.5 * det ** -0.5 * np.exp(-0.5 * quad))


def _exact_knn(positions: np.ndarray, query_index: int, k: int,
               candidates: np.ndarray) -> np.ndarray:
    """Pick the k nearest candidates by (squared distance, index)."""
    diff = positions[candidates] - positions[query_index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((candidates, d2))
    return candidates[order[:k]]


def knn_indices(cloud: GaussianCloud, query_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors of one point, nearest first.

    The query point is excluded; exact distance ties break toward the lower
    index so results are reproducible across runs and backends.
    """
    n = len(cloud)
    if not 0 <= query_index < n:
        raise ValueError(f"query_index {query_index} out of range for {n} points")
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    pos = cloud.positions
    if n <= BRUTE_FORCE_MAX:
        candidates = np.delete(np.arange(n), query_index)
        return _exact_knn(pos, query_index, k, candidates)
    tree = cKDTree(pos)
    dist, _ = tree.query(pos[query_index], k=k + 1)
    # Re-query by radius so boundary ties are all present, then order exactly.
    candidates = np.asarray(tree.query_ball_point(pos[query_index], dist[-1] * (1 + 1e-12)))
    candidates = candidates[candidates != query_index]
    return _exact_knn(pos, query_index, k, candidates)


def knn_all(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors for every point at once, (N, k) index array.

    Matches :func:`knn_indices` row by row, including the tie rule. Rows with
    exact distance ties at the k-th neighbor boundary fall back to an exact
    radius query; continuous data almost never takes that path.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    if n <= BRUTE_FORCE_MAX:
        diff = positions[:, np.newaxis, :] - positions[np.newaxis, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(d2, np.inf)
        idx = np.arange(n)[np.newaxis, :].repeat(n, axis=0)
        order = np.lexsort((idx, d2), axis=1)
        return order[:, :k]
    tree = cKDTree(positions)
    m = min(n, k + 3)
    _, idx = tree.query(positions, k=m)
    # Column 0 is the query itself (distance 0); drop it after tie-safe sorting.
    diff = positions[idx] - positions[:, np.newaxis, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[idx == np.arange(n)[:, np.newaxis]] = -1.0  # self sorts first, then dropped
    order = np.lexsort((idx, d2), axis=1)
    sorted_idx = np.take_along_axis(idx, order, axis=1)
    sorted_d2 = np.take_along_axis(d2, order, axis=1)
    out = sorted_idx[:, 1:k + 1].astype(np.int64)
    if m == n:
        return out  # every point was a candidate, sort is already exact
    # A tie across the kept/dropped boundary needs the exact path.
    risky = sorted_d2[:, k] == sorted_d2[:, k + 1]
    for i in np.nonzero(risky)[0]:
        dist_i, _ = tree.query(positions[i], k=k + 1)
        cand = np.asarray(tree.query_ball_point(positions[i], dist_i[-1] * (1 + 1e-12)))
        cand = cand[cand != i]
        out[i] = _exact_knn(positions, i, k, cand)
    return out


def validate_cloud(cloud: GaussianCloud) -> list[Violation]:
    """Check every point against the data-model invariants.

    Returns one entry per violated field per point; an empty list means the
    cloud is valid. Violations are data, not exceptions.
    """
    out: list[Violation] = []
    n = len(cloud)
    if n < 1:
        out.append(Violation(-1, "points", "cloud must contain at least one point"))
        return out

    def bad(mask, fieldname, message):
        for i in np.nonzero(mask)[0]:
            out.append(Violation(int(i), fieldname, message))

    norms = np.linalg.norm(cloud.rotations, axis=1)
    bad(np.abs(norms - 1.0) > QUAT_NORM_TOL, "rotation", "quaternion not unit norm")
    bad(np.any(cloud.scales <= 0, axis=1), "scale", "scale component not positive")
    bad((cloud.opacities < 0) | (cloud.opacities > 1), "opacity", "outside [0, 1]")
    bad(np.any((cloud.colors < 0) | (cloud.colors > 1), axis=1), "color",
        "channel outside [0, 1]")
    bad(np.any(cloud.semantics < 0, axis=1), "semantic", "negative entry")
    sums = cloud.semantics.sum(axis=1)
    bad(np.abs(sums - 1.0) > SEMANTIC_SUM_TOL, "semantic", "does not sum to 1")
    bad(~np.all(np.isfinite(cloud.positions), axis=1), "position", "non-finite")
    return out
