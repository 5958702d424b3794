"""Command-line interface.

Subcommands: lift, build-field, synth, fit, render, eval. Exit codes:
0 success, 1 usage error, 2 data error. All pipelines are pure functions of
their input files, configuration and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import errors
from .grad import Supervision
from .ingestion import (
    FrameSet,
    load_cameras,
    load_frames,
    load_scene_inputs,
    load_tracks,
    save_scene_inputs,
    save_tracks,
    tracks_to_trajectories,
)
from .optim import fit as run_fit, parse_fit_config, save_trace
from .orientation_field import build_orientation_field, load_field, propagate_orientations, save_field
from .pipeline import evaluate, render_scene_frame
from .ppm import write_ppm
from .renderer import RenderOptions
from .scene import (
    initialize_scene,
    load_assoc,
    load_scene_params,
    save_assoc,
    save_scene_primitives,
    scene_from_files,
)
from .synthetic import generate_synthetic_scene, save_part_transforms

DATA_ERRORS = (
    errors.ParseError,
    errors.ConsistencyError,
    errors.SceneSpecError,
    errors.DegenerateInputError,
    errors.InvalidDepthError,
    errors.BranchAmbiguityError,
    errors.DegenerateBlendError,
    errors.DivergenceError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("lift", parents=[], help="lift 2D tracks with depths to 3D trajectories")
    p.add_argument("--tracks", required=True, help="2D-mode tracks file (t u v d valid)")
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True, help="output 3D tracks file")

    p = sub.add_parser("build-field", help="build and propagate the orientation field")
    p.add_argument("--tracks", required=True, help="3D-mode tracks file")
    p.add_argument("--cameras", help="needed only for 2D-mode tracks")
    p.add_argument("--out", required=True, help="field dump path")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--neighbors", type=int, default=8)

    p = sub.add_parser("synth", help="generate a synthetic scene from a motion spec")
    p.add_argument("--spec", required=True, help="key=value motion descriptor file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", help="fit primitives to a scene directory")
    p.add_argument("--inputs", required=True, help="directory with cameras.txt, tracks.txt, frames")
    p.add_argument("--config", required=True, help="key=value fit configuration")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("render", help="render a fitted scene at a frame")
    p.add_argument("--primitives", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--frame", required=True, help="1-based frame index, or 'all'")
    p.add_argument("--field", help="orientation field dump (omit for a static canonical render)")
    p.add_argument("--assoc", help="primitive/track association file")
    p.add_argument("--out", required=True, help="output PPM path (or directory with --frame=all)")
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--neighbors", type=int, default=8)

    p = sub.add_parser("eval", help="evaluate renders and tracking against ground truth")
    p.add_argument("--renders", required=True, help="directory of rendered frame_%%05d.ppm")
    p.add_argument("--frames", required=True, help="directory of ground-truth frames")
    p.add_argument("--cameras", required=True)
    p.add_argument("--tracks", help="ground-truth tracks file for PCK-T")
    p.add_argument("--primitives", help="fitted primitive dump for PCK-T")
    p.add_argument("--field", help="orientation field dump for PCK-T")
    p.add_argument("--assoc", help="primitive/track association file")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--pck-threshold", type=float, default=0.0005)
    return parser


def _cmd_lift(args) -> int:
    camera = load_cameras(args.cameras)
    records, mode = load_tracks(args.tracks)
    if mode != "2d":
        raise errors.ConsistencyError("lift expects a 2D-mode tracks file")
    trajectories = tracks_to_trajectories(records, mode, camera)
    save_tracks(args.out, trajectories, mode="3d")
    return 0


def _cmd_build_field(args) -> int:
    records, mode = load_tracks(args.tracks)
    camera = load_cameras(args.cameras) if args.cameras else None
    if mode == "2d" and camera is None:
        raise errors.ConsistencyError("2D-mode tracks need --cameras")
    trajectories = tracks_to_trajectories(records, mode, camera)
    field = propagate_orientations(build_orientation_field(trajectories, args.window, args.neighbors))
    save_field(args.out, field)
    return 0


def _cmd_synth(args) -> int:
    scene = generate_synthetic_scene(args.spec)
    os.makedirs(args.out, exist_ok=True)
    save_scene_inputs(args.out, scene.camera, scene.trajectories, scene.frames)
    save_part_transforms(os.path.join(args.out, "gt_transforms.txt"), scene.part_transforms)
    with open(os.path.join(args.out, "labels.txt"), "w") as f:
        for i, lab in enumerate(scene.labels):
            f.write(f"{i} {int(lab)}\n")
    return 0


def _cmd_fit(args) -> int:
    config = parse_fit_config(args.config)
    camera, trajectories, frames = load_scene_inputs(args.inputs)
    scene = initialize_scene(
        camera, trajectories, frames,
        window=config.window, k_neighbors=config.neighbors,
        background=config.background, init_opacity=config.init_opacity,
    )
    sup = Supervision(frames, trajectories)
    start = time.perf_counter()
    scene, trace = run_fit(scene, sup, config)
    elapsed = time.perf_counter() - start
    os.makedirs(args.out, exist_ok=True)
    save_scene_primitives(os.path.join(args.out, "primitives.bin"), scene)
    save_trace(os.path.join(args.out, "trace.csv"), trace)
    save_field(os.path.join(args.out, "field.txt"), scene.field)
    save_assoc(os.path.join(args.out, "assoc.txt"), scene)
    print(f"fit: {len(trace)} iterations, {scene.num_gaussians} primitives, {elapsed:.1f}s")
    return 0


def _load_fitted_scene(primitives, cameras, field_path, assoc, background, neighbors):
    camera = load_cameras(cameras)
    params = load_scene_params(primitives)
    if field_path:
        field = load_field(field_path)
    else:
        # canonical-only rendering still needs a field object for bookkeeping
        from .ingestion import Trajectory

        static = [
            Trajectory(np.tile(params.mu_p[i], (camera.num_frames, 1)),
                       np.ones(camera.num_frames, dtype=bool))
            for i in range(params.n)
        ]
        field = propagate_orientations(
            build_orientation_field(static, window=2, k=min(neighbors, max(3, params.n - 1)))
        )
    ids = track = None
    if assoc:
        ids, track = load_assoc(assoc)
    bg = np.array([float(v) for v in background.split(",")]) if isinstance(background, str) else background
    return scene_from_files(camera, field, params, background=bg, ids=ids, track_id=track,
                            k_neighbors=min(neighbors, field.num_anchors))


def _cmd_render(args) -> int:
    scene = _load_fitted_scene(args.primitives, args.cameras, args.field, args.assoc,
                               args.background, args.neighbors)
    t_count = scene.camera.num_frames
    if args.frame == "all":
        os.makedirs(args.out, exist_ok=True)
        for frame in range(1, t_count + 1):
            image = render_scene_frame(scene, frame)
            write_ppm(os.path.join(args.out, f"frame_{frame:05d}.ppm"), image)
    else:
        frame = int(args.frame)
        if not 1 <= frame <= t_count:
            raise errors.ConsistencyError(f"frame {frame} out of range 1..{t_count}")
        image = render_scene_frame(scene, frame)
        write_ppm(args.out, image)
    return 0


def _cmd_eval(args) -> int:
    camera = load_cameras(args.cameras)
    target = load_frames(args.frames, camera.num_frames)
    rendered = load_frames(args.renders, camera.num_frames)
    scene = None
    trajectories = None
    if args.tracks and args.primitives and args.field:
        records, mode = load_tracks(args.tracks)
        trajectories = tracks_to_trajectories(records, mode, camera)
        scene = _load_fitted_scene(args.primitives, args.cameras, args.field, args.assoc,
                                   "0,0,0", 8)
    report = evaluate(rendered, target, scene, trajectories, args.pck_threshold)
    report.write_csv(args.out)
    return 0


HANDLERS = {
    "lift": _cmd_lift,
    "build-field": _cmd_build_field,
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "render": _cmd_render,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return HANDLERS[args.command](args)
    except DATA_ERRORS as e:
        sys.stderr.write(f"anchorsplat {args.command}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
