"""Anchor-guided deformation.

Primitives are softly bound to nearby oriented anchors at the reference
frame; deforming to frame t blends the anchors' reference-to-t rigid
transforms with dual quaternions and applies the result to the canonical
pose. The deformed primitive also receives its query context: the
normalized target time and the orientation interpolated from the same
binding.

Bindings are computed once at the reference frame and frozen; densified
primitives inherit their parent's binding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import RigidTransform, Rotation, dq_blend, quat_mul, quat_rotate, so3_blend
from .errors import DegenerateInputError
from .hyper_gaussian import HyperGaussian, QueryContext
from .orientation_field import OrientationField, anchor_weights, relative_anchor_transform


@dataclass
class SkinningBinding:
    anchor_ids: np.ndarray  # (K,) distinct, ascending
    weights: np.ndarray  # (K,) nonnegative, sums to 1

    def __post_init__(self):
        self.anchor_ids = np.asarray(self.anchor_ids, dtype=int).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(np.unique(self.anchor_ids)) != self.anchor_ids.size:
            raise DegenerateInputError("binding anchor ids must be distinct")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise DegenerateInputError("binding weights must be nonnegative and sum to 1")


@dataclass
class DeformedPose:
    position: np.ndarray  # (3,)
    rotation: Rotation
    context: QueryContext


def compute_skinning_weights(position: np.ndarray, field: OrientationField,
                             k: int | None = None) -> SkinningBinding:
    """Bind a reference-frame position to its k nearest anchors with
    proximity weights (ties broken by anchor id)."""
    ids, w = anchor_weights(field, position, k)
    return SkinningBinding(ids, w)


def normalized_time(frame: int, frame_count: int) -> float:
    return (frame - 1) / (frame_count - 1)


def frame_deltas(field: OrientationField, frame: int) -> list[RigidTransform]:
    """Reference-to-frame transform of every anchor."""
    return [relative_anchor_transform(a, 1, frame) for a in field.anchors]


def deform(hg: HyperGaussian, binding: SkinningBinding, field: OrientationField,
           frame: int, deltas: list[RigidTransform] | None = None) -> DeformedPose:
    """Deform a primitive's canonical pose to the given frame (1-based).

    ``deltas`` may carry precomputed per-anchor transforms for the frame.
    """
    if deltas is None:
        transforms = [relative_anchor_transform(field.anchors[i], 1, frame) for i in binding.anchor_ids]
    else:
        transforms = [deltas[i] for i in binding.anchor_ids]
    blended = dq_blend(binding.weights, transforms)
    position = blended.apply(hg.mu_p)
    rotation = blended.rotation.compose(hg.rotation)
    o_prime = so3_blend(binding.weights, [field.anchors[i].orientation(frame) for i in binding.anchor_ids])
    ctx = QueryContext(normalized_time(frame, field.frame_count), o_prime)
    return DeformedPose(position, rotation, ctx)


def deform_all(scene, frame: int) -> list[DeformedPose]:
    """Elementwise deform over a scene's primitives, preserving order."""
    deltas = frame_deltas(scene.field, frame)
    return [
        deform(hg, binding, scene.field, frame, deltas)
        for hg, binding in zip(scene.gaussians(), scene.bindings)
    ]


# ---------------------------------------------------------------------------
# batched deformation tables (fixed per scene, reused every iteration)
# ---------------------------------------------------------------------------

def blend_tables(field: OrientationField, bindings: list[SkinningBinding], frames) -> dict:
    """Precompute, per frame, the blended rigid transform and interpolated
    orientation of every binding.

    Returns {frame: {"r_quat": (N, 4), "r_mat": (N, 3, 3), "t": (N, 3),
    "o_prime": (N, 4), "t_norm": float}}.
    """
    from .core_math import quat_to_mat

    out = {}
    for frame in frames:
        deltas = frame_deltas(field, frame)
        n = len(bindings)
        r_quat = np.zeros((n, 4))
        t_vec = np.zeros((n, 3))
        o_prime = np.zeros((n, 4))
        for j, binding in enumerate(bindings):
            blended = dq_blend(binding.weights, [deltas[i] for i in binding.anchor_ids])
            r_quat[j] = blended.rotation.q
            t_vec[j] = blended.translation
            o_prime[j] = so3_blend(
                binding.weights, [field.anchors[i].orientation(frame) for i in binding.anchor_ids]
            ).q
        out[frame] = {
            "r_quat": r_quat,
            "r_mat": quat_to_mat(r_quat),
            "t": t_vec,
            "o_prime": o_prime,
            "t_norm": normalized_time(frame, field.frame_count),
        }
    return out


def apply_blend(table: dict, mu_p: np.ndarray, quat: np.ndarray):
    """Apply a frame's blended transforms to canonical positions/rotations."""
    pos = np.einsum("nij,nj->ni", table["r_mat"], mu_p) + table["t"]
    rot = quat_mul(table["r_quat"], quat)
    return pos, rot
