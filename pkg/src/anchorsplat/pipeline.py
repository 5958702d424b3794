"""End-to-end orchestration: render fitted scenes, predict tracks, evaluate."""

from __future__ import annotations

import time

import numpy as np

from .grad import modulated_state
from .ingestion import Camera, FrameSet, Trajectory
from .metrics import EvalReport, pck_t, psnr, ssim
from .renderer import DEFAULT_OPTIONS, RenderOptions, project_batch, render_batch
from .scene import Scene


def render_scene_frame(scene: Scene, frame: int,
                       options: RenderOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Deform, modulate and render the scene at a frame (1-based)."""
    if scene.num_gaussians == 0:
        bg = np.broadcast_to(scene.background, (scene.camera.height, scene.camera.width, 3))
        return bg.copy()
    state = modulated_state(scene, frame)
    fields, valid, _ = project_batch(
        state["mu_hat"], state["s_hat"], state["q_hat"], scene.camera, frame, options
    )
    idx = np.flatnonzero(valid)
    image, _ = render_batch(
        center=fields["center"][idx],
        conic=fields["conic"][idx],
        depth=fields["depth"][idx],
        alpha_scale=state["sigma_hat"][idx],
        color=scene.params.color[idx],
        radius=fields["radius"][idx],
        width=scene.camera.width,
        height=scene.camera.height,
        background=scene.background,
        options=options,
    )
    return np.clip(image, 0.0, 1.0)


def predicted_tracks(scene: Scene, frames=None):
    """2D tracks predicted by the fitted scene: the projected, modulated
    center of each track's birth primitive.

    Returns (tracks (M, T, 2), valid (M, T), track ids (M,)).
    """
    t_count = scene.field.frame_count
    frames = list(range(1, t_count + 1)) if frames is None else list(frames)
    keep = np.flatnonzero(scene.track_id >= 0)
    tids = scene.track_id[keep]
    out = np.full((keep.size, len(frames), 2), np.nan)
    ok = np.zeros((keep.size, len(frames)), dtype=bool)
    for fi, frame in enumerate(frames):
        state = modulated_state(scene, frame)
        centers = state["mu_hat"][keep]
        pc = scene.camera.world_to_cam(frame, centers)
        z = pc[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = np.stack(
            [scene.camera.fx * pc[:, 0] / zs + scene.camera.cx,
             scene.camera.fy * pc[:, 1] / zs + scene.camera.cy],
            axis=1,
        )
        out[:, fi][front] = u[front]
        ok[:, fi] = front
    return out, ok, tids


def ground_truth_tracks(trajectories: list[Trajectory], camera: Camera, frames=None):
    t_count = trajectories[0].num_frames
    frames = list(range(1, t_count + 1)) if frames is None else list(frames)
    n = len(trajectories)
    out = np.full((n, len(frames), 2), np.nan)
    ok = np.zeros((n, len(frames)), dtype=bool)
    for fi, frame in enumerate(frames):
        for i, tr in enumerate(trajectories):
            if not tr.valid[frame - 1]:
                continue
            u, d = camera.project(frame, tr.positions[frame - 1])
            if d <= 0:
                continue
            out[i, fi] = u
            ok[i, fi] = True
    return out, ok


def evaluate(rendered: FrameSet, target: FrameSet, scene: Scene | None = None,
             trajectories: list[Trajectory] | None = None,
             pck_threshold: float = 0.0005, frames=None) -> EvalReport:
    """Per-frame PSNR/SSIM of renders against targets, plus PCK-T of the
    scene's predicted tracks when a scene and tracks are supplied."""
    start = time.perf_counter()
    if rendered.num_frames != target.num_frames:
        from .errors import ConsistencyError

        raise ConsistencyError("render and target frame counts differ")
    report = EvalReport()
    for t in range(rendered.num_frames):
        report.frame_psnr.append(psnr(rendered.images[t], target.images[t]))
        report.frame_ssim.append(ssim(rendered.images[t], target.images[t]))
    if scene is not None and trajectories is not None and scene.num_gaussians > 0:
        pred, pred_ok, tids = predicted_tracks(scene, frames)
        gt, gt_ok = ground_truth_tracks(trajectories, scene.camera, frames)
        gt_sel = gt[tids]
        ok = pred_ok & gt_ok[tids]
        pred_f = np.where(ok[:, :, None], pred, 0.0)
        gt_f = np.where(ok[:, :, None], gt_sel, 0.0)
        report.pck = pck_t(pred_f, gt_f, pck_threshold, (scene.camera.width, scene.camera.height), ok)
        report.num_gaussians = scene.num_gaussians
    report.seconds = time.perf_counter() - start
    return report
