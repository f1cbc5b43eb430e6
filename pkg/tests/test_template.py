import numpy as np
import pytest

from bodysplat.cloud import validate_cloud
from bodysplat.errors import ParseError, ValidationError
from bodysplat.scenes import generate_template
from bodysplat.template import (
    HEAD,
    L_FOOT,
    L_FOREARM,
    L_HAND,
    L_UPPER_ARM,
    NUM_VERTICES,
    PoseParams,
    default_prior_topology,
    init_gaussians,
    load_template,
    pose_vertices,
    prior_adjacent,
    save_template,
    validate_template,
)


def rot_about(axis, angle):
    axis = np.asarray(axis, float)
    axis /= np.linalg.norm(axis)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


class TestPriorTopology:
    def test_forearm_hand_adjacent(self):
        topo = default_prior_topology()
        assert prior_adjacent(topo, L_FOREARM, L_HAND)

    def test_head_foot_not_adjacent(self):
        topo = default_prior_topology()
        assert not prior_adjacent(topo, HEAD, L_FOOT)

    def test_symmetry_all_pairs(self):
        topo = default_prior_topology()
        for a in range(15):
            for b in range(15):
                assert prior_adjacent(topo, a, b) == prior_adjacent(topo, b, a)

    def test_out_of_range(self):
        topo = default_prior_topology()
        with pytest.raises(ValueError):
            prior_adjacent(topo, 15, 0)

    def test_structure(self):
        adj = default_prior_topology().adjacency
        assert np.array_equal(adj, adj.T)
        assert not adj.diagonal().any()
        deg = adj.sum(axis=1)
        assert deg.min() >= 1 and deg.max() <= 4
        # connectivity by breadth-first traversal
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for a in frontier:
                for b in np.nonzero(adj[a])[0]:
                    if b not in seen:
                        seen.add(int(b))
                        nxt.append(int(b))
            frontier = nxt
        assert seen == set(range(15))


class TestTemplateFile:
    def test_round_trip(self, body, tmp_path):
        path = tmp_path / "t.txt"
        save_template(body, path)
        loaded = load_template(path)
        assert loaded.vertices.shape == (NUM_VERTICES, 3)
        np.testing.assert_array_equal(loaded.vertices, body.vertices)
        np.testing.assert_array_equal(loaded.part_labels, body.part_labels)
        np.testing.assert_array_equal(loaded.skin_weights, body.skin_weights)
        np.testing.assert_array_equal(loaded.joints, body.joints)

    def test_seed_determinism(self, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        save_template(generate_template(seed=3), a)
        save_template(generate_template(seed=3), b)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_vertex_count(self, body, tmp_path):
        path = tmp_path / "t.txt"
        save_template(body, path)
        lines = path.read_text().splitlines()
        head = lines.index(f"vertices {NUM_VERTICES}")
        lines[head] = f"vertices {NUM_VERTICES - 1}"
        del lines[head + 1]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="vertex count"):
            load_template(path)

    def test_bad_skin_weight_sum(self, body, tmp_path):
        path = tmp_path / "t.txt"
        bad = generate_template(seed=11)
        bad.skin_weights[123] = [0.9, 0.0, 0.0, 0.0]
        save_template(bad, path)
        with pytest.raises(ValidationError, match="vertex 123"):
            load_template(path)

    def test_malformed_line_reports_number(self, body, tmp_path):
        path = tmp_path / "t.txt"
        save_template(body, path)
        lines = path.read_text().splitlines()
        lines[30] = "not a number at all"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 31"):
            load_template(path)


class TestPoseVertices:
    def test_zero_pose_identity(self, body):
        posed = pose_vertices(body, PoseParams.zero())
        np.testing.assert_array_equal(posed, body.vertices)

    def test_root_translation(self, body):
        pose = PoseParams.zero()
        pose.root_translation = np.array([1.0, 0.0, 0.0])
        posed = pose_vertices(body, pose)
        np.testing.assert_allclose(posed, body.vertices + [1, 0, 0], atol=1e-12)

    def test_elbow_rotation_matches_rigid_oracle(self, body):
        angle = np.pi / 2
        axis = np.array([0.0, 0.0, 1.0])
        pose = PoseParams.zero()
        pose.joint_rotations[18] = axis * angle  # left elbow
        posed = pose_vertices(body, pose)

        # oracle: rigid rotation about the rest elbow joint
        elbow = body.joints[18]
        r = rot_about(axis, angle)
        distal_joints = {18, 20, 22}
        rigid = (body.skin_weights[:, 0] == 1.0) & np.isin(body.skin_joints[:, 0], list(distal_joints))
        expected = (body.vertices[rigid] - elbow) @ r.T + elbow
        np.testing.assert_allclose(posed[rigid], expected, atol=1e-9)

        torso = body.part_labels == 2
        np.testing.assert_array_equal(posed[torso], body.vertices[torso])

    def test_global_rotation_rigidly_rotates_everything(self, body):
        angle = 0.8
        axis = np.array([0.0, 1.0, 0.0])
        pose = PoseParams.zero()
        pose.joint_rotations[0] = axis * angle
        posed = pose_vertices(body, pose)
        r = rot_about(axis, angle)
        expected = (body.vertices - body.joints[0]) @ r.T + body.joints[0]
        np.testing.assert_allclose(posed, expected, atol=1e-9)

    def test_posing_is_pure(self, body):
        before = body.vertices.copy()
        wb = body.skin_weights.copy()
        pose = PoseParams(joint_rotations=np.random.default_rng(5).uniform(-0.5, 0.5, (24, 3)))
        pose_vertices(body, pose)
        np.testing.assert_array_equal(body.vertices, before)
        np.testing.assert_array_equal(body.skin_weights, wb)

    def test_canonical_range_enforced(self, body):
        pose = PoseParams.zero()
        pose.joint_rotations[4] = [np.pi, 0, 0]
        with pytest.raises(ValidationError, match="canonical range"):
            pose_vertices(body, pose)


class TestInitGaussians:
    def test_valid_cloud_of_full_size(self, body):
        cloud = init_gaussians(body)
        assert len(cloud) == NUM_VERTICES
        assert validate_cloud(cloud) == []
        assert cloud.opacities[0] == 0.1
        np.testing.assert_array_equal(cloud.colors[0], [0.5, 0.5, 0.5])

    def test_semantics_one_hot_from_labels(self, body):
        cloud = init_gaussians(body)
        sevens = np.nonzero(body.part_labels == 7)[0]
        assert len(sevens) > 0
        assert np.all(cloud.semantics[sevens].argmax(axis=1) == 7)
        assert np.all(cloud.semantics[sevens].max(axis=1) == 1.0)

    def test_posed_init_moves_positions_only(self, body):
        pose = PoseParams.zero()
        pose.root_translation = np.array([0.0, 0.0, 2.0])
        cloud = init_gaussians(body, posed=pose)
        rest = init_gaussians(body)
        np.testing.assert_allclose(cloud.positions, rest.positions + [0, 0, 2], atol=1e-12)
        np.testing.assert_array_equal(cloud.scales, rest.scales)

    def test_grid_template_scale_equals_spacing(self, grid_template):
        template, h = grid_template
        cloud = init_gaussians(template)
        np.testing.assert_allclose(cloud.scales, h, atol=1e-6)
        # brute-force oracle on a few sampled vertices
        rng = np.random.default_rng(1)
        for v in rng.choice(NUM_VERTICES, size=10, replace=False):
            d = np.linalg.norm(template.vertices - template.vertices[v], axis=1)
            d[v] = np.inf
            expected = np.sort(d)[:3].mean()
            assert cloud.scales[v, 0] == pytest.approx(expected, abs=1e-12)


class TestGenerator:
    def test_part_counts_sum_exactly(self, body):
        assert len(body.part_labels) == NUM_VERTICES
        counts = np.bincount(body.part_labels, minlength=15)
        assert counts.sum() == NUM_VERTICES
        assert counts.min() > 0

    def test_longer_arms_move_forearm_away_from_shoulder(self):
        base = generate_template(seed=2)
        props = np.ones(10)
        props[2] = 2.0
        long = generate_template(seed=2, proportions=props)
        shoulder_b, shoulder_l = base.joints[16], long.joints[16]
        d_base = np.linalg.norm(
            base.vertices[base.part_labels == L_FOREARM] - shoulder_b, axis=1
        ).mean()
        d_long = np.linalg.norm(
            long.vertices[long.part_labels == L_FOREARM] - shoulder_l, axis=1
        ).mean()
        assert d_long > d_base

    def test_rejects_out_of_range_proportions(self):
        props = np.ones(10)
        props[0] = 3.0
        with pytest.raises(ValueError):
            generate_template(seed=0, proportions=props)

    def test_validates(self, body):
        validate_template(body)
        assert body.skin_weights.sum(axis=1) == pytest.approx(1.0, abs=1e-12)
        assert np.isin(np.unique(body.skin_joints[:, 0]), list(range(24))).all()
