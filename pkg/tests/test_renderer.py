import numpy as np
import pytest

from anchorsplat.core_math import RigidTransform, Rotation
from anchorsplat.ingestion import Camera
from anchorsplat.renderer import (
    RenderOptions,
    Splat2D,
    project_batch,
    project_gaussian,
    render,
    render_batch,
    render_gaussians,
)


def simple_camera(width=32, height=32, f=40.0, t_count=1):
    pose = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, -4.0]))
    return Camera(f, f, (width - 1) / 2, (height - 1) / 2, [pose] * t_count, width, height)


def naive_render(splats, width, height, background):
    """Independent per-pixel transcription of the compositing equation (no
    tiling, no skipping, no early-out); numpy scalar arithmetic throughout."""
    order = np.argsort(np.array([s.depth for s in splats]), kind="stable")
    out = np.zeros((height, width, 3))
    for yi in range(height):
        for xi in range(width):
            trans = 1.0
            color = np.zeros(3)
            for k in order:
                s = splats[k]
                dx = np.float64(xi) - s.center[0]
                dy = np.float64(yi) - s.center[1]
                q = s.conic
                quad = q[0, 0] * dx * dx + 2.0 * q[0, 1] * dx * dy + q[1, 1] * dy * dy
                g = np.exp(-0.5 * quad)
                raw = s.alpha * g
                alpha = np.minimum(0.99, raw)
                weight = trans * alpha
                color = color + weight * s.color
                trans = trans * (1.0 - alpha)
            out[yi, xi] = color + trans * np.asarray(background)
    return out


def mc_projected_covariance(mu, scale, rotation, camera, n=100_000, seed=0):
    """Sample the 3D Gaussian, push samples through the exact pinhole map,
    and return the empirical 2D covariance."""
    rng = np.random.default_rng(seed)
    a = rotation.matrix() * np.asarray(scale)[None, :]
    pts = mu + rng.normal(size=(n, 3)) @ a.T
    pose = camera.poses[0]
    pc = (pts - pose.translation) @ pose.rotation.matrix()
    u = np.stack(
        [camera.fx * pc[:, 0] / pc[:, 2] + camera.cx, camera.fy * pc[:, 1] / pc[:, 2] + camera.cy],
        axis=1,
    )
    d = u - u.mean(axis=0)
    return d.T @ d / n


def make_splat(center, conic_diag=(0.5, 0.5), off=0.0, depth=1.0, alpha=0.8, color=(1, 0, 0), radius=50.0):
    conic = np.array([[conic_diag[0], off], [off, conic_diag[1]]])
    return Splat2D(np.asarray(center, dtype=float), conic, depth, alpha, np.asarray(color, dtype=float), radius)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_isotropic_on_axis_projects_circular_at_center():
    cam = simple_camera()
    s = project_gaussian(np.zeros(3), np.full(3, 0.1), Rotation.identity(), cam)
    assert s is not None
    assert np.allclose(s.center, [cam.cx, cam.cy], atol=1e-12)
    cov = np.linalg.inv(s.conic)
    assert np.isclose(cov[0, 0], cov[1, 1], rtol=1e-9)
    assert abs(cov[0, 1]) < 1e-9


def test_point_behind_camera_is_culled():
    cam = simple_camera()
    assert project_gaussian(np.array([0, 0, -9.0]), np.full(3, 0.1), Rotation.identity(), cam) is None


def test_far_off_image_is_culled():
    cam = simple_camera()
    assert project_gaussian(np.array([50.0, 0, 0]), np.full(3, 0.01), Rotation.identity(), cam) is None


def test_projected_covariance_matches_monte_carlo():
    cam = simple_camera(width=64, height=64, f=80.0)
    rng = np.random.default_rng(3)
    for trial in range(5):
        mu = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5)])
        scale = rng.uniform(0.02, 0.08, size=3)
        rot = Rotation(rng.normal(size=4))
        opts = RenderOptions(eps2d=0.0)
        fields, valid, _ = project_batch(mu[None], scale[None], rot.q[None], cam, 1, opts)
        assert valid[0]
        sigma2d = np.linalg.inv(fields["conic"][0])
        mc = mc_projected_covariance(mu, scale, rot, cam, seed=trial)
        rel = np.linalg.norm(sigma2d - mc) / np.linalg.norm(mc)
        assert rel < 0.05


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def test_empty_splat_list_gives_background():
    cam = simple_camera(width=8, height=6)
    img = render([], cam, background=(0.2, 0.3, 0.4))
    assert img.shape == (6, 8, 3)
    assert np.allclose(img, [0.2, 0.3, 0.4])


def test_two_splat_compositing_closed_form():
    cam = simple_camera(width=9, height=9)
    front = make_splat([4.0, 4.0], conic_diag=(100.0, 100.0), depth=1.0, alpha=0.6, color=(1, 1, 1))
    back = make_splat([4.0, 4.0], conic_diag=(100.0, 100.0), depth=2.0, alpha=0.8, color=(1, 0, 0))
    img = render([back, front], cam, background=(0, 0, 0), options=RenderOptions.exact())
    # at the shared center: C = 0.6 white + 0.4 * 0.8 red
    assert np.allclose(img[4, 4], [0.6 + 0.4 * 0.8, 0.6, 0.6], atol=1e-12)


def test_single_splat_matches_naive_rasterizer_bitwise():
    cam = simple_camera(width=16, height=12)
    s = make_splat([7.3, 5.1], conic_diag=(0.21, 0.34), off=0.05, alpha=0.77, color=(0.9, 0.4, 0.2))
    ours = render([s], cam, background=(0.1, 0.2, 0.3), options=RenderOptions.exact())
    oracle = naive_render([s], 16, 12, (0.1, 0.2, 0.3))
    assert np.array_equal(ours, oracle)


def test_multi_splat_matches_naive_rasterizer_bitwise():
    rng = np.random.default_rng(7)
    cam = simple_camera(width=12, height=10)
    splats = [
        make_splat(
            rng.uniform(0, 12, size=2),
            conic_diag=rng.uniform(0.1, 0.6, size=2),
            off=rng.uniform(-0.05, 0.05),
            depth=rng.uniform(0.5, 3.0),
            alpha=rng.uniform(0.3, 0.95),
            color=rng.uniform(0, 1, size=3),
        )
        for _ in range(6)
    ]
    ours = render(splats, cam, background=(0, 0, 0), options=RenderOptions.exact())
    oracle = naive_render(splats, 12, 10, (0, 0, 0))
    assert np.array_equal(ours, oracle)


def test_input_order_does_not_change_image():
    rng = np.random.default_rng(9)
    cam = simple_camera(width=16, height=16)
    splats = [
        make_splat(
            rng.uniform(2, 14, size=2),
            conic_diag=rng.uniform(0.1, 0.5, size=2),
            depth=rng.uniform(0.5, 4.0),
            alpha=rng.uniform(0.2, 0.9),
            color=rng.uniform(0, 1, size=3),
        )
        for _ in range(8)
    ]
    img1 = render(splats, cam, background=(0.05, 0.05, 0.05))
    img2 = render(splats[::-1], cam, background=(0.05, 0.05, 0.05))
    assert np.array_equal(img1, img2)


def test_transmittance_monotone_and_bounded():
    rng = np.random.default_rng(11)
    width = height = 8
    splats = [
        make_splat(
            rng.uniform(0, 8, size=2),
            conic_diag=rng.uniform(0.2, 0.8, size=2),
            depth=float(k + 1),
            alpha=rng.uniform(0.3, 0.9),
            color=rng.uniform(0, 1, size=3),
        )
        for k in range(5)
    ]
    order = np.argsort([s.depth for s in splats], kind="stable")
    trans = np.ones((height, width))
    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)
    prev = trans.copy()
    for k in order:
        s = splats[k]
        dx = xs[None, :] - s.center[0]
        dy = ys[:, None] - s.center[1]
        quad = s.conic[0, 0] * dx * dx + 2 * s.conic[0, 1] * dx * dy + s.conic[1, 1] * dy * dy
        alpha = np.minimum(0.99, s.alpha * np.exp(-0.5 * quad))
        trans = trans * (1 - alpha)
        assert np.all(trans <= prev + 1e-15)
        assert np.all(trans >= 0) and np.all(trans <= 1)
        prev = trans.copy()


def test_render_deterministic_across_runs():
    rng = np.random.default_rng(13)
    cam = simple_camera(width=24, height=24)
    mu = rng.normal(size=(20, 3)) * 0.4
    scale = rng.uniform(0.03, 0.1, size=(20, 3))
    quats = rng.normal(size=(20, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    op = rng.uniform(0.3, 0.9, size=20)
    col = rng.uniform(0, 1, size=(20, 3))
    img1 = render_gaussians(mu, scale, quats, op, col, cam, 1, (0, 0, 0))
    img2 = render_gaussians(mu, scale, quats, op, col, cam, 1, (0, 0, 0))
    assert np.array_equal(img1, img2)


def test_optimized_path_close_to_exact():
    rng = np.random.default_rng(17)
    cam = simple_camera(width=32, height=32)
    mu = rng.normal(size=(30, 3)) * 0.5
    scale = rng.uniform(0.03, 0.12, size=(30, 3))
    quats = rng.normal(size=(30, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    op = rng.uniform(0.3, 0.9, size=30)
    col = rng.uniform(0, 1, size=(30, 3))
    fast = render_gaussians(mu, scale, quats, op, col, cam, 1, (0, 0, 0))
    exact = render_gaussians(mu, scale, quats, op, col, cam, 1, (0, 0, 0), RenderOptions.exact())
    assert np.abs(fast - exact).max() < 0.02
