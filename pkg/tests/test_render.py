import numpy as np
import pytest

from bodysplat.cloud import GaussianCloud
from bodysplat.render import (
    ALPHA_CLAMP,
    COV2D_REG,
    Camera,
    argmax_mask,
    look_at,
    project,
    render,
    render_reference,
    render_with_grads,
)

from test_cloud import make_cloud


def frontal_camera(width=100, height=100, f=100.0):
    return Camera(
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
        rotation=np.eye(3), translation=np.zeros(3),
        width=width, height=height,
    )


def random_cloud(rng, n, spread=0.6, z_range=(2.0, 4.0), opacity=(0.2, 0.9),
                 scale=(0.05, 0.25)):
    sem = rng.dirichlet(np.ones(15) * 0.3, size=n)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    pos = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*z_range, n),
    ])
    return GaussianCloud(
        positions=pos,
        rotations=quats,
        scales=rng.uniform(*scale, size=(n, 3)),
        opacities=rng.uniform(*opacity, n),
        colors=rng.uniform(0, 1, size=(n, 3)),
        semantics=sem,
    )


class TestProject:
    def test_optical_axis(self):
        cam = frontal_camera()
        c = make_cloud([[0.0, 0.0, 1.0]])
        splat = project(c.point(0), cam)
        np.testing.assert_allclose(splat.mean2d, [50.0, 50.0], atol=1e-12)
        assert splat.depth == pytest.approx(1.0)

    def test_behind_camera_culled(self):
        cam = frontal_camera()
        c = make_cloud([[0.0, 0.0, -1.0]])
        assert project(c.point(0), cam) is None

    def test_far_off_screen_culled(self):
        cam = frontal_camera()
        c = make_cloud([[50.0, 0.0, 1.0]], scales=np.full((1, 3), 0.01))
        assert project(c.point(0), cam) is None

    def test_isotropic_covariance_matches_hand_derivation(self):
        sigma = 0.13
        cam = frontal_camera(f=100.0)
        c = make_cloud([[0.0, 0.0, 2.0]], scales=np.full((1, 3), sigma))
        splat = project(c.point(0), cam)
        expected = (100.0 * sigma / 2.0) ** 2 * np.eye(2) + COV2D_REG * np.eye(2)
        np.testing.assert_allclose(splat.cov2d, expected, atol=1e-6)


class TestRenderBlend:
    def test_single_opaque_gaussian(self):
        cam = Camera(fx=20.0, fy=20.0, cx=10.0, cy=10.0, rotation=np.eye(3),
                     translation=np.zeros(3), width=21, height=21)
        sem = np.zeros((1, 15))
        sem[0, 4] = 1.0
        c = make_cloud(
            [[0.0, 0.0, 1.0]],
            scales=np.full((1, 3), 0.8),
            opacities=np.array([0.99]),
            colors=np.array([[1.0, 0.0, 0.0]]),
            semantics=sem,
        )
        out = render(c, cam)
        center = out.color[10, 10]
        np.testing.assert_allclose(center, [0.99, 0, 0], atol=1e-6)
        assert out.semantic[10, 10, 4] == pytest.approx(0.99, abs=1e-6)
        assert out.alpha[10, 10] == pytest.approx(0.99, abs=1e-6)

    def test_two_coincident_gaussians(self):
        cam = Camera(fx=10.0, fy=10.0, cx=5.0, cy=5.0, rotation=np.eye(3),
                     translation=np.zeros(3), width=11, height=11)
        sem = np.zeros((2, 15))
        sem[:, 0] = 1.0
        c = make_cloud(
            [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            scales=np.full((2, 3), 2.0),
            opacities=np.array([0.5, 0.5]),
            colors=np.array([[1.0, 0, 0], [0, 1.0, 0]]),
            semantics=sem,
        )
        out = render(c, cam)
        np.testing.assert_allclose(out.color[5, 5], [0.5, 0.25, 0.0], atol=1e-9)
        assert out.alpha[5, 5] == pytest.approx(0.75, abs=1e-9)

    def test_empty_after_culling_gives_background(self):
        cam = frontal_camera(width=8, height=8, f=8.0)
        c = make_cloud([[0.0, 0.0, -5.0]])
        out = render(c, cam)
        assert out.color.sum() == 0
        assert out.alpha.max() == 0

    @pytest.mark.parametrize("seed,n", [(0, 10), (1, 25), (2, 40)])
    def test_fast_path_matches_reference_blender(self, seed, n):
        rng = np.random.default_rng(seed)
        cam = frontal_camera(width=32, height=32, f=40.0)
        cloud = random_cloud(rng, n, opacity=(0.1, 0.98))
        fast = render(cloud, cam)
        ref = render_reference(cloud, cam)
        np.testing.assert_allclose(fast.color, ref.color, atol=1e-5)
        np.testing.assert_allclose(fast.semantic, ref.semantic, atol=1e-5)
        np.testing.assert_allclose(fast.alpha, ref.alpha, atol=1e-5)
        np.testing.assert_allclose(fast.depth, ref.depth, atol=1e-4)

    def test_weight_conservation(self):
        rng = np.random.default_rng(9)
        cam = frontal_camera(width=24, height=24, f=30.0)
        for _ in range(20):
            cloud = random_cloud(rng, 15, opacity=(0.3, 0.99))
            out = render(cloud, cam)
            assert out.alpha.max() <= 1.0 + 1e-12
            sem_sum = out.semantic.sum(axis=2)
            assert np.all(sem_sum <= out.alpha + 1e-9)

    def test_equal_depth_tiebreak_is_reproducible(self):
        cam = frontal_camera(width=11, height=11, f=10.0)
        c = make_cloud(
            [[0.1, 0.0, 2.0], [-0.1, 0.0, 2.0]],
            scales=np.full((2, 3), 1.0),
            opacities=np.array([0.8, 0.8]),
            colors=np.array([[1.0, 0, 0], [0, 0, 1.0]]),
        )
        a = render(c, cam)
        b = render(c, cam)
        np.testing.assert_array_equal(a.color, b.color)
        ref = render_reference(c, cam)
        np.testing.assert_allclose(a.color, ref.color, atol=1e-9)


class TestArgmaxMask:
    def test_zero_alpha_is_background(self):
        cam = frontal_camera(width=8, height=8)
        c = make_cloud([[0.0, 0.0, -1.0]])
        out = render(c, cam)
        assert np.all(argmax_mask(out, 0.5) == 0)

    def test_label_offset_by_one(self):
        cam = frontal_camera(width=9, height=9, f=8.0)
        sem = np.zeros((1, 15))
        sem[0, 3] = 1.0
        c = make_cloud(
            [[0.0, 0.0, 1.0]], scales=np.full((1, 3), 1.0),
            opacities=np.array([0.9]), semantics=sem,
        )
        out = render(c, cam)
        mask = argmax_mask(out, 0.5)
        assert mask[4, 4] == 4

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(3)
        cam = frontal_camera(width=16, height=16, f=20.0)
        out = render(random_cloud(rng, 12, opacity=(0.4, 0.95)), cam)
        mask = argmax_mask(out, 0.3)
        for py in range(16):
            for px in range(16):
                if out.alpha[py, px] < 0.3:
                    assert mask[py, px] == 0
                else:
                    assert mask[py, px] == out.semantic[py, px].argmax() + 1

    def test_threshold_validation(self):
        cam = frontal_camera(width=4, height=4)
        out = render(make_cloud([[0, 0, 2.0]]), cam)
        with pytest.raises(ValueError):
            argmax_mask(out, 1.5)


def pack_params(cloud):
    return np.concatenate([
        cloud.positions.ravel(), cloud.rotations.ravel(), cloud.scales.ravel(),
        cloud.opacities.ravel(), cloud.colors.ravel(), cloud.semantics.ravel(),
    ])


def unpack_params(theta, n):
    c = 0
    def take(shape):
        nonlocal c
        size = int(np.prod(shape))
        block = theta[c:c + size].reshape(shape)
        c += size
        return block
    return GaussianCloud(
        positions=take((n, 3)), rotations=take((n, 4)), scales=take((n, 3)),
        opacities=take((n,)), colors=take((n, 3)), semantics=take((n, 15)),
    )


def pack_grads(g):
    return np.concatenate([
        g.position.ravel(), g.rotation.ravel(), g.scale.ravel(),
        g.opacity.ravel(), g.color.ravel(), g.semantic.ravel(),
    ])


def fd_check(analytic, numeric, rel=1e-3, abs_tol=1e-6):
    err = np.abs(analytic - numeric)
    ok = err <= np.maximum(abs_tol, rel * np.abs(numeric))
    return ok, err


class TestRenderGradients:
    def setup_scene(self, seed=12, n=5, size=16):
        rng = np.random.default_rng(seed)
        cam = frontal_camera(width=size, height=size, f=18.0)
        cloud = random_cloud(
            rng, n, spread=0.4, z_range=(2.0, 3.5),
            opacity=(0.3, 0.7), scale=(0.1, 0.3),
        )
        adj = rng.normal(size=(size, size, 18))
        return cloud, cam, adj

    def test_zero_adjoints_zero_grads(self):
        cloud, cam, _ = self.setup_scene()
        _, g = render_with_grads(cloud, cam, np.zeros((16, 16, 18)))
        assert pack_grads(g).max() == 0

    def test_color_grad_equals_blend_weight(self):
        cam = frontal_camera(width=9, height=9, f=8.0)
        c = make_cloud(
            [[0.0, 0.0, 1.0]], scales=np.full((1, 3), 1.0),
            opacities=np.array([0.6]),
        )
        out = render(c, cam)
        adj = np.zeros((9, 9, 18))
        adj[4, 4, 0] = 1.0  # red channel of the center pixel
        _, g = render_with_grads(c, cam, adj)
        assert g.color[0, 0] == pytest.approx(out.alpha[4, 4], rel=1e-12)
        assert g.color[0, 1] == 0.0

    def test_mismatched_adjoints_rejected(self):
        cloud, cam, _ = self.setup_scene()
        with pytest.raises(ValueError):
            render_with_grads(cloud, cam, np.zeros((8, 8, 18)))

    def test_matches_central_finite_differences(self):
        cloud, cam, adj = self.setup_scene()
        n = len(cloud)
        _, g = render_with_grads(cloud, cam, adj)
        analytic = pack_grads(g)

        def loss(theta):
            out = render(unpack_params(theta, n), cam)
            return float(
                np.sum(out.color * adj[..., :3]) + np.sum(out.semantic * adj[..., 3:])
            )

        theta0 = pack_params(cloud)
        h = 1e-4
        numeric = np.zeros_like(theta0)
        for i in range(len(theta0)):
            tp, tm = theta0.copy(), theta0.copy()
            tp[i] += h
            tm[i] -= h
            numeric[i] = (loss(tp) - loss(tm)) / (2 * h)
        ok, err = fd_check(analytic, numeric)
        assert ok.all(), f"max error {err[~ok].max():.3e} in components {np.nonzero(~ok)[0][:8]}"
