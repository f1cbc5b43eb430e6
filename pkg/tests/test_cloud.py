import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from bodysplat.cloud import (
    GaussianCloud,
    GaussianPoint,
    covariance_from_rs,
    evaluate_density,
    knn_all,
    knn_indices,
    quat_to_matrix,
    validate_cloud,
)
from bodysplat.errors import DegenerateCovarianceError


def make_cloud(positions, **overrides):
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = positions.shape[0]
    semantics = np.zeros((n, 15))
    semantics[:, 0] = 1.0
    fields = dict(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        scales=np.ones((n, 3)),
        opacities=np.full(n, 0.5),
        colors=np.full((n, 3), 0.5),
        semantics=semantics,
    )
    fields.update(overrides)
    return GaussianCloud(**fields)


def brute_force_knn(positions, query, k):
    """Independent O(n^2) oracle: sort all others by (squared dist, index)."""
    d2 = np.sum((positions - positions[query]) ** 2, axis=1)
    order = sorted((float(d2[i]), i) for i in range(len(positions)) if i != query)
    return [i for _, i in order[:k]]


def quat_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


unit_quats = st.tuples(*[st.floats(-1, 1) for _ in range(4)]).filter(
    lambda q: np.linalg.norm(q) > 0.1
).map(lambda q: np.asarray(q) / np.linalg.norm(q))

pos_scales = st.tuples(*[st.floats(0.05, 20.0) for _ in range(3)]).map(np.asarray)


class TestCovarianceFromRS:
    def test_identity(self):
        cov = covariance_from_rs(np.array([1.0, 0, 0, 0]), np.ones(3))
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_axis_scale(self):
        cov = covariance_from_rs(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotated_90_about_z(self):
        # Oracle: build R S S^T R^T from an explicitly written rotation matrix.
        q = quat_axis_angle([0, 0, 1], np.pi / 2)
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        s = np.diag([2.0, 1.0, 1.0])
        expected = r @ s @ s.T @ r.T
        np.testing.assert_allclose(expected, np.diag([1.0, 4.0, 1.0]), atol=1e-12)
        cov = covariance_from_rs(q, np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, expected, atol=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            covariance_from_rs(np.array([1.0, 0.1, 0, 0]), np.ones(3))
        with pytest.raises(ValueError):
            covariance_from_rs(np.array([1.0, 0, 0, 0]), np.array([1.0, -1.0, 1.0]))

    @settings(max_examples=200, deadline=None)
    @given(q=unit_quats, s=pos_scales)
    def test_always_spd(self, q, s):
        cov = covariance_from_rs(q, s)
        np.testing.assert_allclose(cov, cov.T, atol=1e-9)
        assert np.linalg.eigvalsh(cov).min() > 0

    @settings(max_examples=100, deadline=None)
    @given(q1=unit_quats, q2=unit_quats, s=pos_scales)
    def test_rotation_equivariance(self, q1, q2, s):
        # composing quaternions == conjugating the covariance by R(q2)
        w1, x1, y1, z1 = q1
        w2, x2, y2, z2 = q2
        q21 = np.array([
            w2 * w1 - x2 * x1 - y2 * y1 - z2 * z1,
            w2 * x1 + x2 * w1 + y2 * z1 - z2 * y1,
            w2 * y1 - x2 * z1 + y2 * w1 + z2 * x1,
            w2 * z1 + x2 * y1 - y2 * x1 + z2 * w1,
        ])
        r2 = quat_to_matrix(q2)
        lhs = covariance_from_rs(q21 / np.linalg.norm(q21), s)
        rhs = r2 @ covariance_from_rs(q1, s) @ r2.T
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, float(s.max()) ** 2))


class TestEvaluateDensity:
    def test_at_center_identity_cov(self):
        c = make_cloud([[0.0, 0, 0]])
        val = evaluate_density(c.point(0), np.zeros(3))
        assert val == pytest.approx((2 * np.pi) ** -1.5, abs=1e-12)
        assert val == pytest.approx(0.06349, abs=5e-6)

    def test_unit_offset(self):
        c = make_cloud([[1.0, 2.0, 3.0]])
        val = evaluate_density(c.point(0), np.array([1.0, 2.0, 4.0]))
        assert val == pytest.approx((2 * np.pi) ** -1.5 * np.exp(-0.5), rel=1e-12)

    def test_anisotropic_matches_linear_algebra_oracle(self):
        c = make_cloud([[0.0, 0, 0]], scales=np.array([[2.0, 1.0, 1.0]]))
        x = np.array([2.0, 0.0, 0.0])
        # Independent oracle: scipy's multivariate normal pdf.
        expected = multivariate_normal(mean=np.zeros(3), cov=np.diag([4.0, 1.0, 1.0])).pdf(x)
        assert evaluate_density(c.point(0), x) == pytest.approx(expected, abs=1e-12)

    def test_degenerate_covariance_raises(self):
        p = GaussianPoint(
            position=np.zeros(3),
            rotation=np.array([1.0, 0, 0, 0]),
            scale=np.array([1.0, 1.0, 1e-9]),
            opacity=0.5,
            color=np.full(3, 0.5),
            semantic=np.eye(15)[0],
        )
        with pytest.raises(DegenerateCovarianceError):
            evaluate_density(p, np.zeros(3))

    def test_integrates_to_one(self):
        # Monte-Carlo over the 6-sigma box in the Gaussian's eigenbasis.
        rng = np.random.default_rng(7)
        for _ in range(3):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(0.2, 2.0, size=3)
            p = rng.normal(size=3)
            c = make_cloud([p], rotations=q[np.newaxis], scales=s[np.newaxis])
            point = c.point(0)
            r = quat_to_matrix(q)
            n = 400_000
            local = rng.uniform(-6, 6, size=(n, 3)) * s
            xs = p + local @ r.T
            vals = np.array([0.0])
            # vectorized density evaluation through the covariance solve
            cov = covariance_from_rs(q, s)
            d = xs - p
            quad = np.einsum("ij,ij->i", d @ np.linalg.inv(cov), d)
            vals = (2 * np.pi) ** -1.5 * np.linalg.det(cov) ** -0.5 * np.exp(-0.5 * quad)
            spot = rng.integers(0, n)
            assert vals[spot] == pytest.approx(evaluate_density(point, xs[spot]), rel=1e-9)
            volume = np.prod(12.0 * s)
            integral = volume * vals.mean()
            assert integral == pytest.approx(1.0, rel=0.02)


class TestKnn:
    def test_collinear(self):
        c = make_cloud([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
        assert knn_indices(c, 1, 2).tolist() == [0, 2]
        assert knn_indices(c, 3, 2).tolist() == [2, 1]

    def test_invalid_k(self):
        c = make_cloud([[0.0, 0, 0], [1, 0, 0]])
        with pytest.raises(ValueError):
            knn_indices(c, 0, 2)
        with pytest.raises(ValueError):
            knn_all(c.positions, 2)

    @pytest.mark.parametrize("n,k", [(50, 3), (500, 8), (2000, 5)])
    def test_matches_brute_force_oracle(self, n, k):
        rng = np.random.default_rng(n)
        c = make_cloud(rng.uniform(-1, 1, size=(n, 3)))
        batch = knn_all(c.positions, k)
        for q in rng.choice(n, size=25, replace=False):
            expected = brute_force_knn(c.positions, q, k)
            assert knn_indices(c, int(q), k).tolist() == expected
            assert batch[q].tolist() == expected

    def test_tie_handling_on_grid(self):
        # integer grid has many exact distance ties
        xs, ys, zs = np.meshgrid(np.arange(8), np.arange(8), np.arange(8))
        pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1).astype(float)
        c = make_cloud(pts)
        batch = knn_all(c.positions, 6)
        rng = np.random.default_rng(0)
        for q in rng.choice(len(pts), size=20, replace=False):
            expected = brute_force_knn(pts, q, 6)
            assert knn_indices(c, int(q), 6).tolist() == expected
            assert batch[q].tolist() == expected


class TestValidateCloud:
    def test_valid_cloud(self):
        c = make_cloud(np.random.default_rng(0).normal(size=(10, 3)))
        assert validate_cloud(c) == []

    def test_opacity_violation(self):
        c = make_cloud([[0.0, 0, 0], [1, 0, 0]])
        c.opacities[1] = 1.5
        violations = validate_cloud(c)
        assert len(violations) == 1
        assert violations[0].index == 1
        assert violations[0].fieldname == "opacity"

    def test_semantic_sum_violation(self):
        c = make_cloud([[0.0, 0, 0]])
        c.semantics[0] *= 0.8
        violations = validate_cloud(c)
        assert [v.fieldname for v in violations] == ["semantic"]

    def test_multiple_violations_reported(self):
        c = make_cloud([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        c.scales[0, 1] = -1.0
        c.rotations[2] = [1.0, 0.1, 0.0, 0.0]
        fields = {(v.index, v.fieldname) for v in validate_cloud(c)}
        assert fields == {(0, "scale"), (2, "rotation")}
