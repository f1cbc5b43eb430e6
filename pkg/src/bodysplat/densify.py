"""Surface disentanglement: find attribute outliers per part and split them.

Within each semantic cluster, every Gaussian gets a 7-dimensional appearance
vector (color, opacity, log radii), standardized per cluster. Nodes whose
mean distance to their cluster mates is largest are the high-frequency
candidates; densification replaces each of them with two children offset
along the principal covariance axis, at reduced scale, inheriting the
parent's remaining attributes including its semantic vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, quats_to_matrices

SCALE_SHRINK = 1.6
OFFSET_FACTOR = 0.5


@dataclass
class HighFreqSelection:
    """Ranked intra-cluster outlier scores and the selected node set."""

    rankings: dict          # part -> (nodes desc by score, scores)
    selected: np.ndarray    # sorted node indices chosen for densification

    def __len__(self):
        return len(self.selected)


def cluster_by_semantics(cloud: GaussianCloud) -> dict[int, np.ndarray]:
    """Group node indices by semantic argmax; empty parts are omitted."""
    parts = cloud.semantics.argmax(axis=1)
    return {int(p): np.nonzero(parts == p)[0] for p in np.unique(parts)}


def attribute_vectors(cloud: GaussianCloud, members: np.ndarray) -> np.ndarray:
    """Standardized (r, g, b, opacity, log radii) rows for one cluster."""
    raw = np.column_stack([
        cloud.colors[members],
        cloud.opacities[members],
        np.log(cloud.scales[members]),
    ])
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std[std < 1e-12] = 1.0
    return (raw - mean) / std


def structural_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two standardized attribute vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"attribute dimensions differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def select_high_frequency(cloud: GaussianCloud, clusters: dict,
                          top_fraction: float) -> HighFreqSelection:
    """Rank nodes by mean structural difference to their cluster mates.

    The top ceil(top_fraction * |cluster|) nodes per cluster are selected,
    score ties breaking toward the lower node index. Singleton clusters
    yield no selection.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    rankings = {}
    chosen = []
    for part in sorted(clusters):
        members = np.asarray(clusters[part])
        if len(members) < 2:
            continue
        attrs = attribute_vectors(cloud, members)
        diff = attrs[:, np.newaxis, :] - attrs[np.newaxis, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        scores = dist.sum(axis=1) / (len(members) - 1)
        order = np.lexsort((members, -scores))
        rankings[part] = (members[order], scores[order])
        take = int(np.ceil(top_fraction * len(members)))
        chosen.append(members[order[:take]])
    selected = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    return HighFreqSelection(rankings=rankings, selected=selected)


def densify(cloud: GaussianCloud, selection: HighFreqSelection):
    """Split every selected Gaussian into two offset, shrunken children.

    Children sit at +-OFFSET_FACTOR * sigma_max along the principal
    covariance axis, carry scales / SCALE_SHRINK, and copy rotation,
    opacity, color, and the semantic vector from the parent. Returns the
    new cloud (generation incremented) and an array mapping each new point
    to its source index in the input cloud.
    """
    n = len(cloud)
    sel = np.asarray(selection.selected, dtype=np.int64)
    if len(sel) and (sel.min() < 0 or sel.max() >= n):
        raise ValueError("selection references points outside the cloud")
    out = cloud.copy()
    out.generation = cloud.generation + 1
    parents = np.arange(n, dtype=np.int64)
    if len(sel) == 0:
        return out, parents

    rot = quats_to_matrices(cloud.rotations[sel])
    axis_idx = cloud.scales[sel].argmax(axis=1)
    axes = rot[np.arange(len(sel)), :, axis_idx]
    sigma = cloud.scales[sel].max(axis=1)
    offset = OFFSET_FACTOR * sigma[:, np.newaxis] * axes

    child_scale = cloud.scales[sel] / SCALE_SHRINK
    # first child overwrites the parent slot, second child appends
    out.positions[sel] = cloud.positions[sel] + offset
    out.scales[sel] = child_scale
    out.positions = np.vstack([out.positions, cloud.positions[sel] - offset])
    out.scales = np.vstack([out.scales, child_scale])
    out.rotations = np.vstack([out.rotations, cloud.rotations[sel]])
    out.opacities = np.concatenate([out.opacities, cloud.opacities[sel]])
    out.colors = np.vstack([out.colors, cloud.colors[sel]])
    out.semantics = np.vstack([out.semantics, cloud.semantics[sel]])
    parents = np.concatenate([parents, sel])
    return out, parents
