"""Deterministic CPU forward splatter.

3D Gaussians are projected through a pinhole camera with a first-order
(local affine) approximation and composited front to back with alpha
blending. Images are float arrays of shape (H, W, 3) in [0, 1].

The compositing loop is vectorized per splat over its pixel footprint but
never accumulates across rows in a thread-dependent order, so renders are
bitwise reproducible. With all optimizations disabled
(``RenderOptions.exact()``) the arithmetic reduces, pixel for pixel, to the
plain compositing equation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core_math import Rotation, quat_to_mat
from .ingestion import Camera


@dataclass(frozen=True)
class RenderOptions:
    alpha_cap: float = 0.99
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    near: float = 0.01
    cull_sigma: float = 3.0
    eps2d: float = 0.3
    alpha_skip: bool = True
    early_out: bool = True
    bbox_cull: bool = True

    @staticmethod
    def exact() -> "RenderOptions":
        """Disable footprint tiling, alpha skipping and early termination."""
        return RenderOptions(alpha_skip=False, early_out=False, bbox_cull=False)


DEFAULT_OPTIONS = RenderOptions()


@dataclass
class Splat2D:
    """Projected Gaussian footprint in pixel space."""

    center: np.ndarray  # (2,)
    conic: np.ndarray  # (2, 2) inverse covariance
    depth: float
    alpha: float  # opacity scale
    color: np.ndarray  # (3,)
    radius: float  # cull_sigma-sigma footprint radius in pixels


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_batch(mu: np.ndarray, scales: np.ndarray, quats: np.ndarray, camera: Camera,
                  t: int, options: RenderOptions = DEFAULT_OPTIONS):
    """Project N Gaussians at frame t.

    Returns (fields, valid, cache): fields holds per-splat arrays (entries of
    culled splats are undefined), valid marks surviving splats, cache carries
    the intermediates needed by the analytic backward pass.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    scales = np.atleast_2d(np.asarray(scales, dtype=float))
    quats = np.atleast_2d(np.asarray(quats, dtype=float))
    n = mu.shape[0]
    pose = camera.poses[t - 1]
    r_cw = pose.rotation.matrix().T
    p_c = (mu - pose.translation) @ r_cw.T
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]

    in_front = z > options.near
    zs = np.where(in_front, z, 1.0)  # guard divisions behind the camera

    rmats = quat_to_mat(quats / np.linalg.norm(quats, axis=-1, keepdims=True))
    # world covariance R S^2 R^T
    rs = rmats * scales[:, None, :]
    sigma3d = rs @ np.transpose(rs, (0, 2, 1))

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / zs**2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / zs**2
    u_mat = jac @ r_cw
    sigma2d = u_mat @ sigma3d @ np.transpose(u_mat, (0, 2, 1))
    sigma2d[:, 0, 0] += options.eps2d
    sigma2d[:, 1, 1] += options.eps2d

    a = sigma2d[:, 0, 0]
    b = sigma2d[:, 0, 1]
    c = sigma2d[:, 1, 1]
    det = a * c - b * b
    # footprints whose covariance overflowed or lost rank are culled; their
    # placeholder conics stay finite so masked backward products stay finite
    well_formed = np.isfinite(det) & (det > 1e-12) & np.isfinite(a) & np.isfinite(c)
    det_safe = np.where(well_formed, det, 1.0)
    conic = np.empty_like(sigma2d)
    conic[:, 0, 0] = c / det_safe
    conic[:, 0, 1] = -b / det_safe
    conic[:, 1, 0] = -b / det_safe
    conic[:, 1, 1] = a / det_safe
    conic[~well_formed] = np.eye(2)

    center = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=-1)
    lam_max = 0.5 * (a + c + np.sqrt(np.maximum((a - c) ** 2 + 4 * b * b, 0.0)))
    radius = np.where(well_formed, options.cull_sigma * np.sqrt(np.maximum(lam_max, 0.0)), 0.0)

    on_image = (
        (center[:, 0] + radius >= -0.5)
        & (center[:, 0] - radius <= camera.width - 0.5)
        & (center[:, 1] + radius >= -0.5)
        & (center[:, 1] - radius <= camera.height - 0.5)
    )
    valid = in_front & on_image & well_formed

    fields = {"center": center, "conic": conic, "depth": z, "radius": radius}
    cache = {
        "p_c": p_c,
        "r_cw": r_cw,
        "jac": jac,
        "u_mat": u_mat,
        "sigma3d": sigma3d,
        "sigma2d": sigma2d,
        "conic": conic,
        "rmats": rmats,
        "scales": scales,
    }
    return fields, valid, cache


def project_backward(cache, d_center: np.ndarray, d_conic: np.ndarray, valid: np.ndarray,
                     camera: Camera):
    """Chain per-splat gradients w.r.t. 2D center and conic back to the
    modulated 3D parameters.

    Returns (d_mu, d_scales, d_rmats): gradients w.r.t. world-space center,
    per-axis scales, and the rotation matrix of each splat. Culling decisions
    are treated as locally constant; invalid splats get zero gradients.
    """
    p_c = cache["p_c"]
    r_cw = cache["r_cw"]
    jac = cache["jac"]
    u_mat = cache["u_mat"]
    sigma3d = cache["sigma3d"]
    conic = cache["conic"]
    rmats = cache["rmats"]
    scales = cache["scales"]
    n = p_c.shape[0]
    v = valid.astype(float)

    d_center = d_center * v[:, None]
    d_conic = d_conic * v[:, None, None]

    # conic = sigma2d^-1
    d_sigma2d = -(conic @ d_conic @ conic)
    # sigma2d = U sigma3d U^T + eps I
    d_sigma3d = np.transpose(u_mat, (0, 2, 1)) @ d_sigma2d @ u_mat
    sym2 = d_sigma2d + np.transpose(d_sigma2d, (0, 2, 1))
    d_u = sym2 @ u_mat @ sigma3d
    d_jac = d_u @ r_cw.T

    # sigma3d = (R S)(R S)^T with S diagonal
    sym3 = d_sigma3d + np.transpose(d_sigma3d, (0, 2, 1))
    d_rmats = sym3 @ rmats * (scales**2)[:, None, :]
    d_scales = np.einsum("nji,njk,nki->ni", rmats, sym3, rmats) * scales

    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    zs = np.where(z > 0, z, 1.0)
    fx, fy = camera.fx, camera.fy
    d_pc = np.zeros((n, 3))
    # center = (fx x / z + cx, fy y / z + cy)
    d_pc[:, 0] += d_center[:, 0] * fx / zs
    d_pc[:, 1] += d_center[:, 1] * fy / zs
    d_pc[:, 2] += -d_center[:, 0] * fx * x / zs**2 - d_center[:, 1] * fy * y / zs**2
    # jacobian entries J00, J02, J11, J12 depend on (x, y, z)
    d_pc[:, 0] += d_jac[:, 0, 2] * (-fx / zs**2)
    d_pc[:, 1] += d_jac[:, 1, 2] * (-fy / zs**2)
    d_pc[:, 2] += (
        d_jac[:, 0, 0] * (-fx / zs**2)
        + d_jac[:, 0, 2] * (2 * fx * x / zs**3)
        + d_jac[:, 1, 1] * (-fy / zs**2)
        + d_jac[:, 1, 2] * (2 * fy * y / zs**3)
    )
    d_mu = d_pc @ r_cw
    return d_mu * v[:, None], d_scales * v[:, None], d_rmats * v[:, None, None]


def project_gaussian(mu_p: np.ndarray, scale: np.ndarray, rotation: Rotation, camera: Camera,
                     t: int = 1, options: RenderOptions = DEFAULT_OPTIONS):
    """Project one Gaussian; returns a Splat2D (without color/alpha filled
    in beyond defaults) or None when culled."""
    fields, valid, _ = project_batch(
        np.asarray(mu_p)[None], np.asarray(scale)[None], rotation.q[None], camera, t, options
    )
    if not valid[0]:
        return None
    return Splat2D(
        center=fields["center"][0],
        conic=fields["conic"][0],
        depth=float(fields["depth"][0]),
        alpha=1.0,
        color=np.zeros(3),
        radius=float(fields["radius"][0]),
    )


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def render_batch(center, conic, depth, alpha_scale, color, radius, width, height, background,
                 options: RenderOptions = DEFAULT_OPTIONS, keep_cache: bool = False):
    """Composite splats front to back. Returns (image, cache); cache is None
    unless keep_cache."""
    m = len(depth)
    background = np.asarray(background, dtype=float).reshape(3)
    out = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    order = np.argsort(np.asarray(depth), kind="stable")

    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)

    steps = []
    for k in order:
        cx, cy = center[k]
        q = conic[k]
        if options.bbox_cull:
            r = radius[k]
            x0 = max(0, int(np.floor(cx - r)))
            x1 = min(width, int(np.ceil(cx + r)) + 1)
            y0 = max(0, int(np.floor(cy - r)))
            y1 = min(height, int(np.ceil(cy + r)) + 1)
            if x0 >= x1 or y0 >= y1:
                continue
        else:
            x0, x1, y0, y1 = 0, width, 0, height
        dx = xs[x0:x1][None, :] - cx
        dy = ys[y0:y1][:, None] - cy
        quad = q[0, 0] * dx * dx + 2.0 * q[0, 1] * dx * dy + q[1, 1] * dy * dy
        g = np.exp(-0.5 * quad)
        raw = alpha_scale[k] * g
        alpha = np.minimum(options.alpha_cap, raw)
        use = np.ones_like(alpha, dtype=bool)
        if options.alpha_skip:
            use &= alpha >= options.alpha_min
        if options.early_out:
            use &= trans[y0:y1, x0:x1] > options.transmittance_min
        alpha_eff = np.where(use, alpha, 0.0)
        t_pre = trans[y0:y1, x0:x1].copy()
        weight = t_pre * alpha_eff
        out[y0:y1, x0:x1] += weight[:, :, None] * color[k]
        trans[y0:y1, x0:x1] = t_pre * (1.0 - alpha_eff)
        if keep_cache:
            grad_mask = use & (raw < options.alpha_cap)
            steps.append((k, (y0, y1, x0, x1), g, alpha_eff, grad_mask, t_pre))
    image = out + trans[:, :, None] * background
    cache = None
    if keep_cache:
        cache = {
            "steps": steps,
            "trans_final": trans,
            "background": background,
            "center": np.asarray(center),
            "conic": np.asarray(conic),
            "alpha_scale": np.asarray(alpha_scale),
            "color": np.asarray(color),
            "n": m,
            "shape": (height, width),
        }
    return image, cache


def render_backward(cache, d_image: np.ndarray):
    """Backward pass of render_batch.

    Given dL/dimage, returns per-splat gradients
    (d_center, d_conic, d_alpha_scale, d_color). Depth ordering, culling and
    the alpha cap/skip/early-out switches are treated as locally constant.
    """
    height, width = cache["shape"]
    n = cache["n"]
    center = cache["center"]
    conic = cache["conic"]
    alpha_scale = cache["alpha_scale"]
    color = cache["color"]

    d_center = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    d_alpha_scale = np.zeros(n)
    d_color = np.zeros((n, 3))

    s_after = cache["trans_final"][:, :, None] * cache["background"]
    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)

    for k, (y0, y1, x0, x1), g, alpha_eff, grad_mask, t_pre in reversed(cache["steps"]):
        d_c = d_image[y0:y1, x0:x1]
        sa = s_after[y0:y1, x0:x1]
        weight = t_pre * alpha_eff
        d_color[k] = np.einsum("yx,yxc->c", weight, d_c)
        # dC/dalpha = T_pre * c - S_after / (1 - alpha)
        d_alpha = np.einsum("yxc,c->yx", d_c, color[k]) * t_pre - np.einsum(
            "yxc->yx", d_c * sa
        ) / (1.0 - alpha_eff)
        d_alpha = np.where(grad_mask, d_alpha, 0.0)
        d_alpha_scale[k] = np.sum(d_alpha * g)
        d_g = d_alpha * alpha_scale[k]
        dx = xs[x0:x1][None, :] - center[k, 0]
        dy = ys[y0:y1][:, None] - center[k, 1]
        q = conic[k]
        gd = d_g * g
        # d/dcenter of -0.5 d^T Q d is Q d
        d_center[k, 0] = np.sum(gd * (q[0, 0] * dx + q[0, 1] * dy))
        d_center[k, 1] = np.sum(gd * (q[1, 0] * dx + q[1, 1] * dy))
        d_conic[k, 0, 0] = np.sum(gd * (-0.5 * dx * dx))
        d_conic[k, 0, 1] = np.sum(gd * (-0.5 * dx * dy))
        d_conic[k, 1, 0] = d_conic[k, 0, 1]
        d_conic[k, 1, 1] = np.sum(gd * (-0.5 * dy * dy))
        s_after[y0:y1, x0:x1] = sa + weight[:, :, None] * color[k]
    return d_center, d_conic, d_alpha_scale, d_color


def render(splats: list[Splat2D], camera: Camera, background,
           options: RenderOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Render a splat list to an (H, W, 3) image in [0, 1]."""
    if not splats:
        bg = np.asarray(background, dtype=float).reshape(3)
        return np.clip(np.broadcast_to(bg, (camera.height, camera.width, 3)).copy(), 0.0, 1.0)
    image, _ = render_batch(
        center=np.stack([s.center for s in splats]),
        conic=np.stack([s.conic for s in splats]),
        depth=np.array([s.depth for s in splats]),
        alpha_scale=np.array([s.alpha for s in splats]),
        color=np.stack([s.color for s in splats]),
        radius=np.array([s.radius for s in splats]),
        width=camera.width,
        height=camera.height,
        background=background,
        options=options,
    )
    return np.clip(image, 0.0, 1.0)


def render_gaussians(mu, scales, quats, opacity, color, camera: Camera, t: int, background,
                     options: RenderOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Project-and-render convenience for plain (non-modulated) Gaussians."""
    fields, valid, _ = project_batch(mu, scales, quats, camera, t, options)
    idx = np.flatnonzero(valid)
    image, _ = render_batch(
        center=fields["center"][idx],
        conic=fields["conic"][idx],
        depth=fields["depth"][idx],
        alpha_scale=np.asarray(opacity, dtype=float)[idx],
        color=np.asarray(color, dtype=float)[idx],
        radius=fields["radius"][idx],
        width=camera.width,
        height=camera.height,
        background=background,
        options=options,
    )
    return np.clip(image, 0.0, 1.0)
