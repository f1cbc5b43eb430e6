import numpy as np
import pytest

from bodysplat.scenes import generate_template


@pytest.fixture(scope="session")
def body():
    return generate_template(seed=11)


@pytest.fixture(scope="session")
def grid_template():
    """Uniformly spaced vertices (cubic grid), rigid round-robin rig."""
    from bodysplat.template import (
        BodyTemplate, JOINT_PARENTS, NUM_VERTICES, PART_DRIVING_JOINT,
    )
    from bodysplat.scenes import _skeleton, default_proportions

    h = 0.05
    axes = np.arange(20) * h
    xs, ys, zs = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)[:NUM_VERTICES]
    labels = np.arange(NUM_VERTICES) % 15
    skin_joints = np.zeros((NUM_VERTICES, 4), dtype=np.int64)
    skin_joints[:, 0] = [PART_DRIVING_JOINT[int(l)] for l in labels]
    skin_weights = np.zeros((NUM_VERTICES, 4))
    skin_weights[:, 0] = 1.0
    return BodyTemplate(
        vertices=pts, part_labels=labels, skin_joints=skin_joints,
        skin_weights=skin_weights, joints=_skeleton(default_proportions()),
        parents=JOINT_PARENTS.copy(),
    ), h
