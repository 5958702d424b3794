"""Loss terms for scene fitting.

- photometric: 0.8 L1 + 0.2 (1 - SSIM) between rendered and target frames
- correspondence: robust reprojection error of each track's birth primitive
  against the track's observed pixel position and depth
- rigidity: anchor-graph edge-length preservation (a function of the
  orientation field only, so it regularizes reported loss but carries no
  gradient w.r.t. primitive parameters)

Each term has an analytic backward used by the gradient module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError
from .ingestion import Camera, FrameSet, Trajectory
from .metrics import ssim_backward, ssim_with_cache
from .orientation_field import OrientationField

log = logging.getLogger(__name__)

L1_WEIGHT = 0.8
SSIM_WEIGHT = 0.2
HUBER_DELTA = 2.0  # pixels
DEPTH_WEIGHT = 0.1


@dataclass
class LossWeights:
    photometric: float = 1.0
    correspondence: float = 0.5
    arap: float = 0.1

    def __post_init__(self):
        if self.photometric < 0 or self.correspondence < 0 or self.arap < 0:
            raise ConsistencyError("loss weights must be nonnegative")
        if self.photometric == self.correspondence == self.arap == 0:
            raise ConsistencyError("at least one loss weight must be positive")


def photometric_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    value, _ = photometric_with_cache(rendered, target)
    return value


def photometric_with_cache(rendered: np.ndarray, target: np.ndarray):
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ConsistencyError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    l1 = float(np.mean(np.abs(rendered - target)))
    ssim_val, ssim_cache = ssim_with_cache(rendered, target)
    value = L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - ssim_val)
    return value, {"rendered": rendered, "target": target, "ssim_cache": ssim_cache}


def photometric_backward(cache, upstream: float = 1.0) -> np.ndarray:
    rendered = cache["rendered"]
    target = cache["target"]
    grad = L1_WEIGHT * np.sign(rendered - target) / rendered.size
    grad = grad - SSIM_WEIGHT * ssim_backward(cache["ssim_cache"])
    return upstream * grad


# ---------------------------------------------------------------------------
# correspondence
# ---------------------------------------------------------------------------

def correspondence_targets(trajectories: list[Trajectory], camera: Camera, frame: int):
    """Observed pixel position and z-depth per track at a frame (NaN rows
    where the track is invalid or behind the camera)."""
    n = len(trajectories)
    uv = np.full((n, 2), np.nan)
    depth = np.full(n, np.nan)
    for i, tr in enumerate(trajectories):
        if not tr.valid[frame - 1]:
            continue
        u, d = camera.project(frame, tr.positions[frame - 1])
        if d <= 0:
            continue
        uv[i] = u
        depth[i] = d
    return uv, depth


def correspondence_loss_points(points: np.ndarray, target_uv: np.ndarray, target_depth: np.ndarray,
                               camera: Camera, frame: int,
                               huber_delta: float = HUBER_DELTA,
                               depth_weight: float = DEPTH_WEIGHT):
    """Robust reprojection loss of world points against pixel/depth targets.

    Rows of ``target_uv`` with NaN are ignored. Returns (loss, cache).
    """
    points = np.atleast_2d(points)
    ok = ~np.isnan(target_uv[:, 0])
    pose = camera.poses[frame - 1]
    r_cw = pose.rotation.matrix().T
    p_c = (points - pose.translation) @ r_cw.T
    z = p_c[:, 2]
    ok = ok & (z > 1e-6)
    m = int(ok.sum())
    if m == 0:
        log.warning("correspondence loss: no valid tracks at frame %d", frame)
        zero_cache = {"ok": ok, "m": 0}
        return 0.0, zero_cache
    zs = np.where(ok, z, 1.0)
    u = np.stack([camera.fx * p_c[:, 0] / zs + camera.cx, camera.fy * p_c[:, 1] / zs + camera.cy], axis=1)
    du = u - target_uv
    r = np.where(ok, np.hypot(du[:, 0], du[:, 1]), 0.0)
    quad = r <= huber_delta
    huber = np.where(quad, 0.5 * r**2, huber_delta * (r - 0.5 * huber_delta))
    depth_err = np.where(ok, z - target_depth, 0.0)
    per_track = huber + depth_weight * np.abs(depth_err)
    loss = float(per_track[ok].sum() / m)
    cache = {
        "ok": ok, "m": m, "p_c": p_c, "z": zs, "u": u, "du": du, "r": r, "quad": quad,
        "depth_err": depth_err, "r_cw": r_cw, "huber_delta": huber_delta,
        "depth_weight": depth_weight,
    }
    return loss, cache


def correspondence_backward(cache, camera: Camera, upstream: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the world points; zero rows for unsupervised points."""
    ok = cache["ok"]
    n = ok.shape[0]
    grad = np.zeros((n, 3))
    m = cache["m"]
    if m == 0:
        return grad
    du = cache["du"]
    r = cache["r"]
    quad = cache["quad"]
    z = cache["z"]
    p_c = cache["p_c"]
    delta = cache["huber_delta"]
    # d(huber)/du: quadratic branch du, linear branch delta * du / r
    r_safe = np.where(r > 1e-12, r, 1.0)
    d_u = np.where(quad[:, None], du, delta * du / r_safe[:, None])
    d_u = d_u * (upstream / m)
    d_pc = np.zeros((n, 3))
    d_pc[:, 0] = d_u[:, 0] * camera.fx / z
    d_pc[:, 1] = d_u[:, 1] * camera.fy / z
    d_pc[:, 2] = (
        -d_u[:, 0] * camera.fx * p_c[:, 0] / z**2
        - d_u[:, 1] * camera.fy * p_c[:, 1] / z**2
    )
    d_pc[:, 2] += (upstream / m) * cache["depth_weight"] * np.sign(cache["depth_err"])
    d_pc[~ok] = 0.0
    return d_pc @ cache["r_cw"]


def correspondence_loss(scene, frame: int, trajectories: list[Trajectory], camera: Camera,
                        huber_delta: float = HUBER_DELTA, depth_weight: float = DEPTH_WEIGHT) -> float:
    """Reprojection loss of the scene's deformed, modulated track primitives
    at a frame (public entry; the fitting loop uses the batched internals)."""
    from .grad import modulated_positions

    points, tracked = modulated_positions(scene, frame)
    if tracked.size == 0:
        log.warning("correspondence loss: scene has no track-born primitives")
        return 0.0
    uv, depth = correspondence_targets(trajectories, camera, frame)
    loss, _ = correspondence_loss_points(
        points, uv[scene.track_id[tracked]], depth[scene.track_id[tracked]],
        camera, frame, huber_delta, depth_weight,
    )
    return loss


# ---------------------------------------------------------------------------
# rigidity
# ---------------------------------------------------------------------------

def arap_edges(field: OrientationField) -> np.ndarray:
    """Deduplicated anchor edges from the fixed neighborhoods."""
    pairs = set()
    for i in range(field.num_anchors):
        for j in field.neighbor_indices[i]:
            if int(j) != i:
                pairs.add((min(i, int(j)), max(i, int(j))))
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def arap_loss(field: OrientationField, frame: int, edges: np.ndarray | None = None) -> float:
    """Mean squared edge-length change of the anchor graph at a frame."""
    if edges is None:
        edges = arap_edges(field)
    if edges.size == 0:
        return 0.0
    p1 = field.positions_at(1)
    pt = field.positions_at(frame)
    v1 = field.valid_at(1)
    vt = field.valid_at(frame)
    ok = v1[edges[:, 0]] & v1[edges[:, 1]] & vt[edges[:, 0]] & vt[edges[:, 1]]
    if not ok.any():
        return 0.0
    len1 = np.linalg.norm(p1[edges[:, 0]] - p1[edges[:, 1]], axis=1)
    lent = np.linalg.norm(pt[edges[:, 0]] - pt[edges[:, 1]], axis=1)
    diff = (lent - len1)[ok]
    return float(np.mean(diff**2))
