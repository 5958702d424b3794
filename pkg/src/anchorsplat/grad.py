"""Analytic gradients of the fitting losses w.r.t. every primitive parameter.

The forward pass (deform -> condition -> modulate -> project -> composite ->
losses) caches its intermediates; the backward pass chains hand-derived
Jacobians through each stage. Depth ordering, culling, footprint bounds and
the alpha cap/skip switches are treated as locally constant, as is the
orientation field itself (anchors are inputs, not parameters).

Rotation parameters are raw quaternions: forward normalizes them, and the
backward chains through the normalization, so finite differences on the raw
storage match.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from .core_math import quat_conj, quat_exp, quat_log, quat_mul, quat_to_mat
from .errors import ConsistencyError
from .hyper_gaussian import (
    EPS_SCALE,
    effective_chol,
    marginal_solve,
    opacity_factor_batch,
    pack_chol,
    soft_floor_deriv,
)
from .ingestion import FrameSet, Trajectory
from .losses import (
    arap_edges,
    arap_loss,
    correspondence_backward,
    correspondence_loss_points,
    correspondence_targets,
    photometric_backward,
    photometric_with_cache,
    LossWeights,
)
from .renderer import DEFAULT_OPTIONS, RenderOptions, project_backward, project_batch, render_backward, render_batch
from .scene import PARAM_KEYS, Scene

_TRIL_R, _TRIL_C = np.tril_indices(4)


# ---------------------------------------------------------------------------
# small quaternion Jacobians (vectorized over leading axis)
# ---------------------------------------------------------------------------

def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """L(a) with quat_mul(a, b) = L(a) @ b."""
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_right_matrix(b: np.ndarray) -> np.ndarray:
    """R(b) with quat_mul(a, b) = R(b) @ a."""
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def normalize_jacobian(q: np.ndarray) -> np.ndarray:
    """Jacobian of q -> q/||q||, shape (..., 4, 4); symmetric."""
    n = np.sqrt(np.sum(q * q, axis=-1))
    u = q / n[..., None]
    eye = np.broadcast_to(np.eye(4), q.shape[:-1] + (4, 4))
    return (eye - u[..., :, None] * u[..., None, :]) / n[..., None, None]


def dmat_dquat(q: np.ndarray) -> np.ndarray:
    """Partials of the unit-quaternion rotation matrix, shape (..., 4, 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    o = np.zeros_like(w)

    def m(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = m([[o, -z, y], [z, o, -x], [-y, x, o]])
    dx = m([[o, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = m([[-2 * y, x, w], [x, o, z], [-w, z, -2 * y]])
    dz = m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, o]])
    return np.stack([dw, dx, dy, dz], axis=-3)


_SMALL = 1e-8


def dquat_exp_dv(v: np.ndarray) -> np.ndarray:
    """Jacobian of the so(3) -> quaternion exponential, shape (..., 4, 3)."""
    theta = np.sqrt(np.sum(v * v, axis=-1))
    half = 0.5 * theta
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    f = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    # g = f'(theta)/theta, series -1/24 near zero
    g = np.where(
        small,
        -1.0 / 24.0 + theta**2 / 960.0,
        (0.5 * safe * np.cos(half) - np.sin(half)) / safe**3,
    )
    out = np.zeros(v.shape[:-1] + (4, 3))
    out[..., 0, :] = -0.5 * f[..., None] * v
    eye = np.eye(3)
    out[..., 1:, :] = f[..., None, None] * eye + g[..., None, None] * (
        v[..., :, None] * v[..., None, :]
    )
    return out


def dquat_log_dq(q: np.ndarray) -> np.ndarray:
    """Jacobian of the quaternion log (atan2 form) at q with w > 0, (..., 3, 4)."""
    w = q[..., 0]
    v = q[..., 1:]
    s2 = np.sum(v * v, axis=-1)
    s = np.sqrt(s2)
    n2 = s2 + w * w
    small = s < _SMALL
    safe_s = np.where(small, 1.0, s)
    angle = 2.0 * np.arctan2(s, w)
    k = np.where(small, 2.0 / w - 2.0 * s2 / (3.0 * w**3), angle / safe_s)
    # c = (dk/ds)/s with series -4/(3 w^3) near zero
    c = np.where(
        small,
        -4.0 / (3.0 * w**3),
        (2.0 * (w * s / n2 - np.arctan2(s, w)) / safe_s**2) / safe_s,
    )
    out = np.zeros(q.shape[:-1] + (3, 4))
    out[..., :, 0] = -2.0 * v / n2[..., None]
    eye = np.eye(3)
    out[..., :, 1:] = k[..., None, None] * eye + c[..., None, None] * (
        v[..., :, None] * v[..., None, :]
    )
    return out


# ---------------------------------------------------------------------------
# supervision bundle
# ---------------------------------------------------------------------------

@dataclass
class Supervision:
    """Target frames and tracks plus per-frame caches reused across iterations."""

    frames: FrameSet
    trajectories: list[Trajectory]
    _targets: dict = dfield(default_factory=dict, repr=False)
    _arap: dict = dfield(default_factory=dict, repr=False)
    _edges: np.ndarray | None = dfield(default=None, repr=False)

    def targets(self, camera, frame: int):
        if frame not in self._targets:
            self._targets[frame] = correspondence_targets(self.trajectories, camera, frame)
        return self._targets[frame]

    def arap(self, field, frame: int) -> float:
        if frame not in self._arap:
            if self._edges is None:
                self._edges = arap_edges(field)
            self._arap[frame] = arap_loss(field, frame, self._edges)
        return self._arap[frame]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def modulated_state(scene: Scene, frame: int):
    """Deform, condition and modulate every primitive for a frame.

    Returns a dict of (N, ...) arrays plus the intermediates the backward
    pass needs.
    """
    p = scene.params
    table = scene.tables([frame])[frame]
    qn_raw = p.quat
    qn = qn_raw / np.linalg.norm(qn_raw, axis=-1, keepdims=True)
    qo_raw = p.st_quat_o
    qo = qo_raw / np.linalg.norm(qo_raw, axis=-1, keepdims=True)

    pos_def = np.einsum("nij,nj->ni", table["r_mat"], p.mu_p) + table["t"]
    rot_def = quat_mul(table["r_quat"], qn)

    rel = quat_mul(table["o_prime"], quat_conj(qo))
    rel_norm = np.linalg.norm(rel, axis=-1)
    rel_n = rel / rel_norm[..., None]
    sflip = np.where(rel_n[..., 0] < 0.0, -1.0, 1.0)
    rel_c = sflip[..., None] * rel_n
    rho = quat_log(rel_c)
    resid = np.concatenate([(table["t_norm"] - p.st_t)[:, None], rho], axis=1)

    l_eff = effective_chol(p.chol)
    z = marginal_solve(l_eff, resid)
    geo_mean = np.concatenate([p.st_dp, p.st_dscale, p.st_drot], axis=1)
    mean = geo_mean + np.einsum("nij,nj->ni", p.c_cross, z)

    mu_hat = pos_def + mean[:, 0:3]
    s_raw = p.scale + mean[:, 3:6]
    s_hat = np.maximum(s_raw, EPS_SCALE)
    s_mask = (s_raw > EPS_SCALE).astype(float)
    q_delta = quat_exp(mean[:, 6:9])
    q_hat = quat_mul(rot_def, q_delta)

    factor, op_aux = opacity_factor_batch(l_eff, resid)
    sigma_hat = p.opacity * factor

    return {
        "table": table, "qn": qn, "qo": qo, "pos_def": pos_def, "rot_def": rot_def,
        "rel": rel, "rel_norm": rel_norm, "rel_n": rel_n, "sflip": sflip, "rel_c": rel_c,
        "resid": resid, "l_eff": l_eff, "z": z, "mean": mean,
        "mu_hat": mu_hat, "s_hat": s_hat, "s_mask": s_mask,
        "q_delta": q_delta, "q_hat": q_hat,
        "factor": factor, "op_aux": op_aux, "sigma_hat": sigma_hat,
    }


def modulated_positions(scene: Scene, frame: int):
    """Modulated world centers of track-born primitives; returns
    (positions, primitive indices)."""
    tracked = np.flatnonzero(scene.track_id >= 0)
    if scene.num_gaussians == 0:
        return np.zeros((0, 3)), tracked
    state = modulated_state(scene, frame)
    return state["mu_hat"][tracked], tracked


def frame_forward(scene: Scene, sup: Supervision, frame: int, weights: LossWeights,
                  options: RenderOptions = DEFAULT_OPTIONS, keep_cache: bool = False):
    """Losses of a single frame; optionally keeps every cache for backward."""
    state = modulated_state(scene, frame)
    camera = scene.camera
    fields, valid, proj_cache = project_batch(
        state["mu_hat"], state["s_hat"], state["q_hat"], camera, frame, options
    )
    idx = np.flatnonzero(valid)
    image, render_cache = render_batch(
        center=fields["center"][idx],
        conic=fields["conic"][idx],
        depth=fields["depth"][idx],
        alpha_scale=state["sigma_hat"][idx],
        color=scene.params.color[idx],
        radius=fields["radius"][idx],
        width=camera.width,
        height=camera.height,
        background=scene.background,
        options=options,
        keep_cache=keep_cache,
    )
    target = sup.frames.images[frame - 1]
    pho, pho_cache = photometric_with_cache(image, target)

    tracked = np.flatnonzero(scene.track_id >= 0)
    uv_all, depth_all = sup.targets(camera, frame)
    cor, cor_cache = correspondence_loss_points(
        state["mu_hat"][tracked] if tracked.size else np.zeros((0, 3)),
        uv_all[scene.track_id[tracked]] if tracked.size else np.zeros((0, 2)),
        depth_all[scene.track_id[tracked]] if tracked.size else np.zeros(0),
        camera, frame,
    ) if tracked.size else (0.0, {"ok": np.zeros(0, dtype=bool), "m": 0})

    arap = sup.arap(scene.field, frame)
    parts = {"pho": pho, "cor": cor, "arap": arap}
    parts["total"] = (
        weights.photometric * pho + weights.correspondence * cor + weights.arap * arap
    )
    caches = None
    if keep_cache:
        caches = {
            "state": state, "fields": fields, "valid": valid, "idx": idx,
            "proj_cache": proj_cache, "render_cache": render_cache,
            "pho_cache": pho_cache, "cor_cache": cor_cache, "tracked": tracked,
        }
    return parts, caches


def total_loss(scene: Scene, sup: Supervision, frame_batch, weights: LossWeights,
               options: RenderOptions = DEFAULT_OPTIONS):
    """Weighted loss averaged over the batch frames; returns (total, parts)."""
    frame_batch = list(frame_batch)
    if not frame_batch:
        raise ConsistencyError("frame batch must be nonempty")
    acc = {"pho": 0.0, "cor": 0.0, "arap": 0.0, "total": 0.0}
    for frame in frame_batch:
        parts, _ = frame_forward(scene, sup, frame, weights, options, keep_cache=False)
        for k in acc:
            acc[k] += parts[k]
    for k in acc:
        acc[k] /= len(frame_batch)
    return acc["total"], acc


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def zero_grads(scene: Scene) -> dict:
    return {k: np.zeros_like(getattr(scene.params, k)) for k in PARAM_KEYS}


def _frame_backward(scene: Scene, caches, weights: LossWeights, grads: dict) -> None:
    p = scene.params
    n = p.n
    state = caches["state"]
    idx = caches["idx"]
    camera = scene.camera

    # image -> splat attribute gradients
    d_image = photometric_backward(caches["pho_cache"], upstream=weights.photometric)
    d_center_v, d_conic_v, d_sigma_v, d_color_v = render_backward(caches["render_cache"], d_image)
    d_center = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    d_sigma_hat = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_center[idx] = d_center_v
    d_conic[idx] = d_conic_v
    d_sigma_hat[idx] = d_sigma_v
    d_color[idx] = d_color_v

    d_mu_hat, d_s_hat, d_rmats = project_backward(
        caches["proj_cache"], d_center, d_conic, caches["valid"], camera
    )

    # correspondence adds to the modulated centers
    tracked = caches["tracked"]
    if tracked.size and caches["cor_cache"].get("m", 0) > 0:
        d_points = correspondence_backward(
            caches["cor_cache"], camera, upstream=weights.correspondence
        )
        d_mu_hat[tracked] += d_points

    grads["color"] += d_color
    grads["opacity"] += d_sigma_hat * state["factor"]

    # opacity confidence factor
    d_quad = -0.5 * state["sigma_hat"] * d_sigma_hat
    aux = state["op_aux"]
    resid = state["resid"]
    sigma_t = aux["sigma_t"]
    so_inv_rho = aux["so_inv_rho"]
    d_resid = np.zeros((n, 4))
    d_resid[:, 0] += d_quad * 2.0 * resid[:, 0] / sigma_t
    d_resid[:, 1:] += d_quad[:, None] * 2.0 * so_inv_rho
    g_sigma = np.zeros((n, 4, 4))
    g_sigma[:, 0, 0] += d_quad * (-(resid[:, 0] ** 2) / sigma_t**2)
    g_sigma[:, 1:, 1:] += d_quad[:, None, None] * (
        -(so_inv_rho[:, :, None] * so_inv_rho[:, None, :])
    )

    # rotation chain: d_rmats -> raw quaternion and rotation-offset gradients
    q_hat = state["q_hat"]
    q_hat_unit = q_hat / np.linalg.norm(q_hat, axis=-1, keepdims=True)
    d_q_unit = np.einsum("nqij,nij->nq", dmat_dquat(q_hat_unit), d_rmats)
    d_q_hat = np.einsum("nqr,nq->nr", normalize_jacobian(q_hat), d_q_unit)
    d_rot_def = np.einsum("nqr,nq->nr", quat_right_matrix(state["q_delta"]), d_q_hat)
    d_q_delta = np.einsum("nqr,nq->nr", quat_left_matrix(state["rot_def"]), d_q_hat)
    d_drot_geo = np.einsum("nqv,nq->nv", dquat_exp_dv(state["mean"][:, 6:9]), d_q_delta)
    d_qn = np.einsum("nqr,nq->nr", quat_left_matrix(state["table"]["r_quat"]), d_rot_def)
    grads["quat"] += np.einsum("nqr,nq->nr", normalize_jacobian(p.quat), d_qn)

    # geometry mean gradient (position, scale, rotation offsets)
    d_mean = np.concatenate([d_mu_hat, state["s_mask"] * d_s_hat, d_drot_geo], axis=1)

    grads["mu_p"] += np.einsum("nji,nj->ni", state["table"]["r_mat"], d_mu_hat)
    grads["scale"] += state["s_mask"] * d_s_hat
    grads["st_dp"] += d_mean[:, 0:3]
    grads["st_dscale"] += d_mean[:, 3:6]
    grads["st_drot"] += d_mean[:, 6:9]

    # conditioning: mean = geo_mean + C z, z = Sigma^-1 resid
    z = state["z"]
    l_eff = state["l_eff"]
    grads["c_cross"] += d_mean[:, :, None] * z[:, None, :]
    d_z = np.einsum("nij,ni->nj", p.c_cross, d_mean)
    gz = marginal_solve(l_eff, d_z)
    d_resid += gz
    g_sigma += -(gz[:, :, None] * z[:, None, :])

    # Sigma = L_eff L_eff^T, diagonal floored at read
    d_leff = np.einsum("nij,njk->nik", g_sigma + np.swapaxes(g_sigma, 1, 2), l_eff)
    d_chol_full = np.zeros_like(d_leff)
    d_chol_full[:, _TRIL_R, _TRIL_C] = d_leff[:, _TRIL_R, _TRIL_C]
    diag = np.arange(4)
    raw_diag = p.chol[:, [0, 2, 5, 9]]
    d_chol_full[:, diag, diag] *= soft_floor_deriv(raw_diag)
    grads["chol"] += pack_chol(d_chol_full)

    # residual: [t_norm - st_t, log(canonical(O' qo^-1))]
    grads["st_t"] += -d_resid[:, 0]
    d_rho = d_resid[:, 1:]
    j_log = dquat_log_dq(state["rel_c"])
    d_rel_c = np.einsum("nvq,nv->nq", j_log, d_rho)
    d_rel_n = state["sflip"][:, None] * d_rel_c
    d_rel = np.einsum("nqr,nq->nr", normalize_jacobian(state["rel"]), d_rel_n)
    d_conj_qo = np.einsum("nqr,nq->nr", quat_left_matrix(state["table"]["o_prime"]), d_rel)
    d_qo = d_conj_qo * np.array([1.0, -1.0, -1.0, -1.0])
    grads["st_quat_o"] += np.einsum("nqr,nq->nr", normalize_jacobian(p.st_quat_o), d_qo)


def grad_state(scene: Scene, sup: Supervision, frame_batch, weights: LossWeights,
               options: RenderOptions = DEFAULT_OPTIONS):
    """Gradients of the batch-averaged total loss w.r.t. every parameter.

    Returns (grads, parts, flagged): ``flagged`` lists primitive ids whose
    gradients came out non-finite.
    """
    frame_batch = list(frame_batch)
    if not frame_batch:
        raise ConsistencyError("frame batch must be nonempty")
    grads = zero_grads(scene)
    acc = {"pho": 0.0, "cor": 0.0, "arap": 0.0, "total": 0.0}
    for frame in frame_batch:
        parts, caches = frame_forward(scene, sup, frame, weights, options, keep_cache=True)
        for k in acc:
            acc[k] += parts[k]
        _frame_backward(scene, caches, weights, grads)
    scale = 1.0 / len(frame_batch)
    for k in grads:
        grads[k] *= scale
    for k in acc:
        acc[k] *= scale

    bad = np.zeros(scene.num_gaussians, dtype=bool)
    for k, g in grads.items():
        flat = g.reshape(scene.num_gaussians, -1) if g.ndim > 1 else g[:, None]
        bad |= ~np.isfinite(flat).all(axis=1)
    flagged = scene.ids[bad].tolist()
    return grads, acc, flagged
