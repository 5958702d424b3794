"""Synthetic ground-truth scenes for desk-scale testing.

A scene is a seeded cloud of Gaussian primitives whose centers are the
tracked points; frames are produced by this package's own renderer, so a
perfect fit can reproduce them exactly. Per-part rigid transforms are
emitted for oracle checks.

Motion descriptors are key=value text (or dicts): ``motion`` is one of
static | translate | rigid-rotate | spin | two-part-articulated, with
parameters ``frames``, ``tracks``, ``seed``, ``image``, ``omega_deg``,
``axis``, ``vel``, ``gap``, ``extent``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import RigidTransform, Rotation
from .errors import ParseError, SceneSpecError
from .ingestion import Camera, FrameSet, Trajectory
from .renderer import RenderOptions, render_gaussians

MOTIONS = ("static", "translate", "rigid-rotate", "spin", "two-part-articulated")

_DEFAULTS = {
    "frames": 24,
    "tracks": 40,
    "seed": 3,
    "image": 64,
    "omega_deg": 10.0,
    "axis": "",  # per-motion default
    "vel": (0.02, 0.0, 0.0),
    "gap": 1.2,
    "extent": 0.8,
}


@dataclass
class MotionSpec:
    motion: str
    frames: int = 24
    tracks: int = 40
    seed: int = 3
    image: int = 64
    omega_deg: float = 10.0
    axis: str = ""
    vel: tuple = (0.02, 0.0, 0.0)
    gap: float = 1.2
    extent: float = 0.8

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise SceneSpecError(f"unknown motion kind {self.motion!r} (valid: {', '.join(MOTIONS)})")
        if self.frames < 2 or self.tracks < 2:
            raise SceneSpecError("need at least 2 frames and 2 tracks")
        if not self.axis:
            self.axis = "y" if self.motion in ("spin", "two-part-articulated") else "z"
        if self.axis not in ("x", "y", "z"):
            raise SceneSpecError(f"axis must be one of x, y, z, got {self.axis!r}")


def parse_motion_spec(source) -> MotionSpec:
    """Build a MotionSpec from a dict or a key=value text file path."""
    if isinstance(source, MotionSpec):
        return source
    if isinstance(source, dict):
        kv = dict(source)
    else:
        kv = {}
        with open(source) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError("expected key=value", path=source, line=lineno)
                key, val = line.split("=", 1)
                kv[key.strip()] = val.strip()
    if "motion" not in kv:
        raise SceneSpecError("spec must name a motion kind")
    args = {"motion": str(kv.pop("motion"))}
    for key, default in _DEFAULTS.items():
        if key not in kv:
            continue
        raw = kv.pop(key)
        if isinstance(default, int):
            args[key] = int(raw)
        elif isinstance(default, float):
            args[key] = float(raw)
        elif isinstance(default, tuple):
            parts = raw.split(",") if isinstance(raw, str) else raw
            args[key] = tuple(float(p) for p in parts)
        else:
            args[key] = str(raw)
    if kv:
        raise SceneSpecError(f"unknown spec keys: {sorted(kv)}")
    return MotionSpec(**args)


@dataclass
class SyntheticScene:
    camera: Camera
    trajectories: list
    frames: FrameSet
    labels: np.ndarray  # (N,) part id per track
    part_transforms: dict  # part id -> list of RigidTransform, one per frame
    gauss: dict = field(default_factory=dict)  # ground-truth primitive arrays
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


_AXES = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}


def _ball(rng, n, radius, center):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    return center + d * r


def _default_camera(image: int, frames: int) -> Camera:
    f = 1.1 * image
    c = (image - 1) / 2.0
    pose = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, -4.0]))
    return Camera(f, f, c, c, [pose] * frames, image, image)


def _part_motion(spec: MotionSpec, centroids) -> dict:
    """Per-part rigid transforms mapping frame-1 positions to frame t."""
    axis = _AXES[spec.axis]
    omega = np.deg2rad(spec.omega_deg)
    t_range = range(spec.frames)
    if spec.motion == "static":
        return {0: [RigidTransform.identity() for _ in t_range]}
    if spec.motion == "translate":
        vel = np.asarray(spec.vel, dtype=float)
        return {0: [RigidTransform(Rotation.identity(), vel * t) for t in t_range]}
    if spec.motion == "rigid-rotate":
        return {0: [RigidTransform(Rotation.about_axis(axis, omega * t), np.zeros(3)) for t in t_range]}
    if spec.motion == "spin":
        c = centroids[0]
        out = []
        for t in t_range:
            rot = Rotation.about_axis(axis, omega * t)
            out.append(RigidTransform(rot, c - rot.apply(c)))
        return {0: out}
    if spec.motion == "two-part-articulated":
        c = centroids[1]
        part1 = []
        for t in t_range:
            rot = Rotation.about_axis(axis, omega * t)
            part1.append(RigidTransform(rot, c - rot.apply(c)))
        return {0: [RigidTransform.identity() for _ in t_range], 1: part1}
    raise SceneSpecError(f"unknown motion kind {spec.motion!r}")


def generate_synthetic_scene(source) -> SyntheticScene:
    """Generate (cameras, trajectories, frames, ground truth) for a motion
    descriptor. Trajectories satisfy the motion model exactly."""
    spec = parse_motion_spec(source)
    rng = np.random.default_rng(spec.seed)
    n = spec.tracks

    if spec.motion == "two-part-articulated":
        half = n // 2
        r = 0.45
        ca = np.array([-(spec.gap / 2 + r), 0.0, 0.0])
        cb = np.array([spec.gap / 2 + r, 0.0, 0.0])
        base = np.concatenate([_ball(rng, half, r, ca), _ball(rng, n - half, r, cb)])
        labels = np.concatenate([np.zeros(half, dtype=int), np.ones(n - half, dtype=int)])
        centroids = {0: ca, 1: cb}
    else:
        base = _ball(rng, n, spec.extent, np.zeros(3))
        labels = np.zeros(n, dtype=int)
        centroids = {0: base.mean(axis=0)}

    transforms = _part_motion(spec, centroids)

    positions = np.zeros((spec.frames, n, 3))
    for t in range(spec.frames):
        for part, seq in transforms.items():
            mask = labels == part
            positions[t, mask] = base[mask] @ seq[t].rotation.matrix().T + seq[t].translation

    trajectories = [Trajectory(positions[:, i], np.ones(spec.frames, dtype=bool)) for i in range(n)]

    # ground-truth primitives riding the tracks
    scale = rng.uniform(0.06, 0.13, size=(n, 1)) * rng.uniform(0.75, 1.35, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats *= np.where(quats[:, :1] < 0, -1.0, 1.0)
    color = rng.uniform(0.15, 1.0, size=(n, 3))
    opacity = rng.uniform(0.55, 0.95, size=n)

    camera = _default_camera(spec.image, spec.frames)
    background = np.zeros(3)
    images = []
    for t in range(spec.frames):
        rot_t = np.zeros((n, 4))
        for part, seq in transforms.items():
            mask = labels == part
            qpart = seq[t].rotation.q
            rot_t[mask] = _quat_mul_single(qpart, quats[mask])
        images.append(
            render_gaussians(
                positions[t], scale, rot_t, opacity, color, camera, t + 1, background,
                RenderOptions(),
            )
        )
    frames = FrameSet(np.stack(images))

    gauss = {"scale": scale, "quat": quats, "color": color, "opacity": opacity, "base": base}
    return SyntheticScene(camera, trajectories, frames, labels, transforms, gauss, background)


def _quat_mul_single(q: np.ndarray, qs: np.ndarray) -> np.ndarray:
    from .core_math import quat_mul

    return quat_mul(np.broadcast_to(q, qs.shape), qs)


def save_part_transforms(path, part_transforms: dict) -> None:
    """Text dump: one line per (part, frame): part t qw qx qy qz tx ty tz."""
    with open(path, "w") as f:
        for part in sorted(part_transforms):
            for t, tr in enumerate(part_transforms[part], start=1):
                vals = [*tr.rotation.q, *tr.translation]
                f.write(f"{part} {t} " + " ".join("%.17g" % v for v in vals) + "\n")


def load_part_transforms(path) -> dict:
    out: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ParseError(f"expected 9 fields, got {len(parts)}", path=path, line=lineno)
            part, t = int(parts[0]), int(parts[1])
            nums = [float(v) for v in parts[2:]]
            seq = out.setdefault(part, [])
            if t != len(seq) + 1:
                raise ParseError("frames must ascend from 1 per part", path=path, line=lineno)
            seq.append(RigidTransform(Rotation(np.array(nums[0:4])), np.array(nums[4:7])))
    return out
