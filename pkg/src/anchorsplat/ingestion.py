"""Scene input handling: cameras, trajectories, frames, and 2D-to-3D lifting.

File formats (all text numbers are written with 17 significant digits so a
save/load round trip is bit-exact):

- cameras file: one line per frame,
  ``t fx fy cx cy qw qx qy qz tx ty tz width height``, frames ascending from 1.
  The pose (q, t) is camera-to-world.
- tracks file: header ``T N mode=3d|2d`` followed by N blocks of T lines,
  ``t x y z valid`` in 3D mode or ``t u v d valid`` in 2D mode.
- frames: ``frame_%05d.ppm`` (binary P6), one per frame, 1-based.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core_math import RigidTransform, Rotation
from .errors import ConsistencyError, InvalidDepthError, ParseError
from .ppm import read_ppm, write_ppm

FMT = "%.17g"


@dataclass
class Camera:
    """Pinhole camera with a per-frame camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    poses: list[RigidTransform]
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConsistencyError("focal lengths must be positive")

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def world_to_cam(self, t: int, p_world: np.ndarray) -> np.ndarray:
        """Camera-frame coordinates of world points at frame t (1-based)."""
        pose = self.poses[t - 1]
        r_cw = pose.rotation.matrix().T
        return (np.asarray(p_world, dtype=float) - pose.translation) @ r_cw.T

    def cam_to_world(self, t: int, p_cam: np.ndarray) -> np.ndarray:
        pose = self.poses[t - 1]
        return np.asarray(p_cam, dtype=float) @ pose.rotation.matrix().T + pose.translation

    def project(self, t: int, p_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and z-depths of world points at frame t."""
        pc = np.atleast_2d(self.world_to_cam(t, p_world))
        z = pc[:, 2]
        u = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=-1)
        if np.ndim(p_world) == 1:
            return u[0], z[0]
        return u, z

    def back_project(self, t: int, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points from pixels and z-depths at frame t."""
        single = np.ndim(uv) == 1
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        d = np.atleast_1d(np.asarray(depth, dtype=float))
        pc = np.stack(
            [d * (uv[:, 0] - self.cx) / self.fx, d * (uv[:, 1] - self.cy) / self.fy, d], axis=-1
        )
        out = self.cam_to_world(t, pc)
        return out[0] if single else out


@dataclass
class Trajectory:
    """Per-frame 3D world positions of a tracked point with a validity mask."""

    positions: np.ndarray  # (T, 3)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.positions.shape[0] != self.valid.shape[0]:
            raise ConsistencyError("positions and validity mask disagree in length")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]


@dataclass
class FrameSet:
    """Per-frame RGB images in [0, 1]."""

    images: np.ndarray  # (T, H, W, 3)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ConsistencyError("frames must be (T, H, W, 3)")
        if self.images.shape[0] < 2:
            raise ConsistencyError("need at least 2 frames")

    @property
    def num_frames(self) -> int:
        return self.images.shape[0]


def lift_track(track2d: np.ndarray, depths: np.ndarray, camera: Camera, valid=None) -> Trajectory:
    """Lift a 2D pixel track with z-depths into a 3D world trajectory.

    Out-of-bounds pixels are marked invalid rather than rejected; a
    nonpositive depth on a valid frame is an error.
    """
    uv = np.asarray(track2d, dtype=float).reshape(-1, 2)
    d = np.asarray(depths, dtype=float).reshape(-1)
    t_count = uv.shape[0]
    if d.shape[0] != t_count or t_count != camera.num_frames:
        raise ConsistencyError("track length, depth length and camera frames disagree")
    mask = np.ones(t_count, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).copy()
    in_bounds = (
        (uv[:, 0] >= 0)
        & (uv[:, 0] <= camera.width - 1)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= camera.height - 1)
    )
    mask &= in_bounds
    if np.any(mask & (d <= 0.0)):
        raise InvalidDepthError("nonpositive depth on a valid frame")
    positions = np.zeros((t_count, 3))
    for t in range(1, t_count + 1):
        if mask[t - 1]:
            positions[t - 1] = camera.back_project(t, uv[t - 1], d[t - 1])
    return Trajectory(positions, mask)


# ---------------------------------------------------------------------------
# text file I/O
# ---------------------------------------------------------------------------

def save_cameras(path, camera: Camera) -> None:
    with open(path, "w") as f:
        for t, pose in enumerate(camera.poses, start=1):
            q = pose.rotation.q
            tr = pose.translation
            vals = [camera.fx, camera.fy, camera.cx, camera.cy, *q, *tr]
            f.write(f"{t} " + " ".join(FMT % v for v in vals) + f" {camera.width} {camera.height}\n")


def load_cameras(path) -> Camera:
    poses = []
    fx = fy = cx = cy = None
    width = height = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 14:
                raise ParseError(f"expected 14 fields, got {len(parts)}", path=path, line=lineno)
            try:
                t = int(parts[0])
                nums = [float(v) for v in parts[1:12]]
                w, h = int(parts[12]), int(parts[13])
            except ValueError as e:
                raise ParseError(str(e), path=path, line=lineno)
            if t != len(poses) + 1:
                raise ParseError(f"frames must ascend from 1, got t={t}", path=path, line=lineno)
            if fx is None:
                fx, fy, cx, cy = nums[0:4]
                width, height = w, h
            elif (fx, fy, cx, cy) != tuple(nums[0:4]) or (width, height) != (w, h):
                raise ParseError("intrinsics/size must match across frames", path=path, line=lineno)
            if nums[0] <= 0 or nums[1] <= 0:
                raise ParseError("focal lengths must be positive", path=path, line=lineno)
            q = np.array(nums[4:8])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ParseError("pose quaternion must be unit norm", path=path, line=lineno)
            poses.append(RigidTransform(Rotation(q), np.array(nums[8:11])))
    if not poses:
        raise ParseError("empty cameras file", path=path)
    return Camera(fx, fy, cx, cy, poses, width, height)


def save_tracks(path, trajectories: list[Trajectory], mode: str = "3d", camera: Camera | None = None) -> None:
    if mode not in ("3d", "2d"):
        raise ValueError("mode must be '3d' or '2d'")
    t_count = trajectories[0].num_frames
    with open(path, "w") as f:
        f.write(f"{t_count} {len(trajectories)} mode={mode}\n")
        for traj in trajectories:
            if traj.num_frames != t_count:
                raise ConsistencyError("trajectories disagree in frame count")
            for t in range(1, t_count + 1):
                v = int(traj.valid[t - 1])
                if mode == "3d":
                    x, y, z = traj.positions[t - 1]
                    f.write(f"{t} " + " ".join(FMT % c for c in (x, y, z)) + f" {v}\n")
                else:
                    uv, d = camera.project(t, traj.positions[t - 1])
                    f.write(f"{t} " + " ".join(FMT % c for c in (uv[0], uv[1], d)) + f" {v}\n")


def load_tracks(path):
    """Returns (records, mode): records is a list of (T, 4) arrays of the raw
    per-frame columns plus validity; interpretation depends on mode."""
    with open(path) as f:
        header = f.readline().strip()
        parts = header.split()
        if len(parts) != 3 or not parts[2].startswith("mode="):
            raise ParseError("header must be 'T N mode=2d|3d'", path=path, line=1)
        try:
            t_count, n = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise ParseError(str(e), path=path, line=1)
        mode = parts[2][5:]
        if mode not in ("2d", "3d"):
            raise ParseError(f"unknown mode {mode!r}", path=path, line=1)
        records = []
        lineno = 1
        for i in range(n):
            rows = np.zeros((t_count, 4))
            for t in range(1, t_count + 1):
                lineno += 1
                line = f.readline()
                if not line:
                    raise ParseError("unexpected end of file", path=path, line=lineno)
                fields = line.split()
                if len(fields) != 5:
                    raise ParseError(f"expected 5 fields, got {len(fields)}", path=path, line=lineno)
                try:
                    ft = int(fields[0])
                    vals = [float(v) for v in fields[1:4]]
                    flag = int(fields[4])
                except ValueError as e:
                    raise ParseError(str(e), path=path, line=lineno)
                if ft != t:
                    raise ParseError(f"expected frame {t}, got {ft}", path=path, line=lineno)
                if flag not in (0, 1):
                    raise ParseError(f"validity flag must be 0 or 1, got {flag}", path=path, line=lineno)
                rows[t - 1] = [*vals, flag]
            records.append(rows)
        if f.readline().strip():
            raise ParseError("trailing data after declared tracks", path=path, line=lineno + 1)
    return records, mode


def tracks_to_trajectories(records, mode: str, camera: Camera | None = None) -> list[Trajectory]:
    out = []
    for rows in records:
        valid = rows[:, 3] > 0.5
        if mode == "3d":
            out.append(Trajectory(rows[:, 0:3], valid))
        else:
            if camera is None:
                raise ConsistencyError("2D tracks need a camera to lift")
            out.append(lift_track(rows[:, 0:2], rows[:, 2], camera, valid))
    return out


def frame_filename(t: int) -> str:
    return f"frame_{t:05d}.ppm"


def save_frames(dirpath, frames: FrameSet) -> None:
    for t in range(1, frames.num_frames + 1):
        write_ppm(os.path.join(dirpath, frame_filename(t)), frames.images[t - 1])


def load_frames(dirpath, t_count: int) -> FrameSet:
    images = []
    for t in range(1, t_count + 1):
        fp = os.path.join(dirpath, frame_filename(t))
        if not os.path.exists(fp):
            raise ConsistencyError(f"missing frame file {fp}")
        images.append(read_ppm(fp))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ConsistencyError("frames disagree in dimensions")
    return FrameSet(np.stack(images))


def load_scene_inputs(path):
    """Load (camera, trajectories, frames) from a scene directory and check
    cross-file consistency."""
    camera = load_cameras(os.path.join(path, "cameras.txt"))
    records, mode = load_tracks(os.path.join(path, "tracks.txt"))
    for rows in records:
        if rows.shape[0] != camera.num_frames:
            raise ConsistencyError(
                f"tracks have {rows.shape[0]} frames but cameras have {camera.num_frames}"
            )
    trajectories = tracks_to_trajectories(records, mode, camera)
    frames = load_frames(path, camera.num_frames)
    h, w = frames.images.shape[1:3]
    if (w, h) != (camera.width, camera.height):
        raise ConsistencyError(f"frame size {(w, h)} does not match camera {(camera.width, camera.height)}")
    return camera, trajectories, frames


def save_scene_inputs(path, camera: Camera, trajectories: list[Trajectory], frames: FrameSet) -> None:
    os.makedirs(path, exist_ok=True)
    save_cameras(os.path.join(path, "cameras.txt"), camera)
    save_tracks(os.path.join(path, "tracks.txt"), trajectories, mode="3d")
    save_frames(path, frames)
