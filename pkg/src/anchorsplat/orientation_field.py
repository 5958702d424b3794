"""Orientation field over tracked points.

Each trajectory becomes an oriented anchor: its initial orientation comes
from windowed PCA of early motion, and is propagated to every frame by
aligning the anchor's frame-1 neighborhood to the same neighborhood at
frame t (a Procrustes problem solved by Kabsch).

Neighborhoods are fixed from frame-1 geometry: the anchor itself plus its
``k`` nearest anchors, members sorted by anchor id so results are
independent of anchor ordering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core_math import RigidTransform, Rotation, kabsch, so3_blend
from .errors import DegenerateInputError, ParseError
from .ingestion import Trajectory

log = logging.getLogger(__name__)

UP = np.array([0.0, 1.0, 0.0])
UP_FALLBACK = np.array([1.0, 0.0, 0.0])
DEFAULT_WINDOW = 5
DEFAULT_NEIGHBORS = 8


@dataclass
class OrientedAnchor:
    anchor_id: int
    positions: np.ndarray  # (T, 3)
    quats: np.ndarray  # (T, 4) unit, canonical sign
    valid: np.ndarray  # (T,)
    degenerate: bool = False

    def orientation(self, t: int) -> Rotation:
        return Rotation(self.quats[t - 1])

    def position(self, t: int) -> np.ndarray:
        return self.positions[t - 1]


@dataclass
class OrientationField:
    anchors: list[OrientedAnchor]
    frame_count: int
    window: int
    k_neighbors: int
    neighbor_indices: np.ndarray = field(default=None)  # (N, k+1) incl. self

    def __post_init__(self):
        if self.k_neighbors < 3:
            raise DegenerateInputError("neighborhood size must be >= 3")
        if self.window < 2:
            raise DegenerateInputError("PCA window must be >= 2")
        for a in self.anchors:
            if a.positions.shape[0] != self.frame_count:
                raise DegenerateInputError("anchors disagree in frame count")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    def positions_at(self, t: int) -> np.ndarray:
        return np.stack([a.positions[t - 1] for a in self.anchors])

    def quats_at(self, t: int) -> np.ndarray:
        return np.stack([a.quats[t - 1] for a in self.anchors])

    def valid_at(self, t: int) -> np.ndarray:
        return np.array([a.valid[t - 1] for a in self.anchors])


def _complete_frame(forward: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal frame with the given forward (first) axis."""
    up = UP if abs(float(UP @ forward)) < 1.0 - 1e-9 else UP_FALLBACK
    second = up - (up @ forward) * forward
    second = second / np.linalg.norm(second)
    third = np.cross(forward, second)
    return np.stack([forward, second, third], axis=1)


class PrincipalOrientation:
    """Result of windowed-PCA orientation initialization."""

    __slots__ = ("rotation", "degenerate")

    def __init__(self, rotation: Rotation, degenerate: bool):
        self.rotation = rotation
        self.degenerate = degenerate

    def __iter__(self):
        return iter((self.rotation, self.degenerate))


def init_principal_orientation(traj: Trajectory, window: int = DEFAULT_WINDOW) -> PrincipalOrientation:
    """Initial anchor orientation from PCA over the first ``window`` frames.

    The forward axis is the leading eigenvector, sign-aligned with the net
    displacement over the window; remaining axes come from up-vector
    completion. Zero motion in the window yields the identity frame with a
    degenerate flag.
    """
    if window < 2:
        raise DegenerateInputError("PCA window must be >= 2")
    if traj.num_frames < window or not traj.valid[:window].all():
        raise DegenerateInputError("trajectory must be valid on the full starting window")
    pts = traj.positions[:window]
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / window
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    if evals[0] < 1e-12:
        return PrincipalOrientation(Rotation.identity(), True)
    forward = evecs[:, order[0]]
    disp = pts[-1] - pts[0]
    if float(forward @ disp) < 0.0:
        forward = -forward
    return PrincipalOrientation(Rotation.from_matrix(_complete_frame(forward)), False)


def build_orientation_field(trajectories: list[Trajectory], window: int = DEFAULT_WINDOW,
                            k: int = DEFAULT_NEIGHBORS) -> OrientationField:
    """Initialize anchors at frame 1 and fix frame-1 neighborhoods.

    Orientations at frames > 1 start as copies of frame 1; call
    propagate_orientations to fill them in.
    """
    n = len(trajectories)
    if n < k + 1:
        raise DegenerateInputError(f"need at least k+1 = {k + 1} trajectories, got {n}")
    t_count = trajectories[0].num_frames
    anchors = []
    for i, traj in enumerate(trajectories):
        if traj.num_frames != t_count:
            raise DegenerateInputError("trajectories disagree in frame count")
        rot, degen = init_principal_orientation(traj, window)
        quats = np.tile(rot.q, (t_count, 1))
        anchors.append(OrientedAnchor(i, traj.positions.copy(), quats, traj.valid.copy(), degen))

    p1 = np.stack([a.positions[0] for a in anchors])
    d2 = ((p1[:, None, :] - p1[None, :, :]) ** 2).sum(axis=2)
    neighbor_indices = np.empty((n, k + 1), dtype=int)
    for i in range(n):
        chosen = np.argsort(d2[i], kind="stable")[: k + 1]  # self at distance 0, ties by id
        # canonical member order (distance, then position) keeps the Kabsch
        # point order, hence every orientation, independent of anchor ordering
        keys = (p1[chosen, 2], p1[chosen, 1], p1[chosen, 0], d2[i, chosen])
        neighbor_indices[i] = chosen[np.lexsort(keys)]
    return OrientationField(anchors, t_count, window, k, neighbor_indices)


def propagate_orientations(field: OrientationField) -> OrientationField:
    """Propagate frame-1 orientations across time by neighborhood Kabsch.

    For anchor i at frame t, the optimal rotation aligning its frame-1
    neighborhood to the frame-t neighborhood is composed with the initial
    orientation. Frames with fewer than 3 valid members carry the previous
    orientation forward.
    """
    n = field.num_anchors
    t_count = field.frame_count
    pos = np.stack([a.positions for a in field.anchors], axis=1)  # (T, N, 3)
    valid = np.stack([a.valid for a in field.anchors], axis=1)  # (T, N)
    new_anchors = []
    carried = 0
    for i in range(n):
        a = field.anchors[i]
        members = field.neighbor_indices[i]
        quats = np.tile(a.quats[0], (t_count, 1))
        q1 = Rotation(a.quats[0])
        for t in range(2, t_count + 1):
            ok = valid[t - 1, members] & valid[0, members]
            if int(ok.sum()) < 3:
                quats[t - 1] = quats[t - 2]
                carried += 1
                continue
            m = members[ok]
            rot, _ = kabsch(pos[0, m], pos[t - 1, m])
            quats[t - 1] = rot.compose(q1).q
        new_anchors.append(OrientedAnchor(a.anchor_id, a.positions.copy(), quats, a.valid.copy(), a.degenerate))
    if carried:
        log.warning("orientation propagation carried %d anchor-frames with <3 valid neighbors", carried)
    return OrientationField(new_anchors, t_count, field.window, field.k_neighbors, field.neighbor_indices.copy())


def relative_anchor_transform(anchor: OrientedAnchor, t: int, t_prime: int):
    """SE(3) transform taking the anchor's frame-t pose to its frame-t' pose."""
    t_count = anchor.positions.shape[0]
    if not (1 <= t <= t_count and 1 <= t_prime <= t_count):
        raise IndexError(f"frame out of range: {t} -> {t_prime} with T={t_count}")
    pose_t = RigidTransform(anchor.orientation(t), anchor.position(t))
    pose_tp = RigidTransform(anchor.orientation(t_prime), anchor.position(t_prime))
    return pose_tp.compose(pose_t.inverse())


def anchor_weights(field: OrientationField, position: np.ndarray, k: int | None = None):
    """Proximity weights over the k nearest anchors (frame-1 geometry).

    Gaussian RBF with bandwidth tied to the k-th neighbor distance; the
    bandwidth is a quarter of that distance so a query coincident with an
    anchor concentrates (>= 0.99) on it. Returns (ids ascending, weights).
    """
    k = field.k_neighbors if k is None else k
    if field.num_anchors < k:
        raise DegenerateInputError(f"field has {field.num_anchors} anchors, need >= {k}")
    p1 = field.positions_at(1)
    d2 = ((p1 - np.asarray(position, dtype=float)) ** 2).sum(axis=1)
    chosen = np.argsort(d2, kind="stable")[:k]  # ties broken by anchor id
    chosen = np.sort(chosen)
    dk2 = d2[chosen].max()
    if dk2 < 1e-24:
        w = np.full(k, 1.0 / k)
    else:
        w = np.exp(-8.0 * d2[chosen] / dk2)
        w = w / w.sum()
    return chosen, w


def interpolate_orientation(field: OrientationField, position: np.ndarray, t_prime: int,
                            ids: np.ndarray | None = None, weights: np.ndarray | None = None) -> Rotation:
    """Blend the orientations of the nearest anchors at frame t', using the
    same proximity weights as skinning (or a caller-provided binding)."""
    if ids is None or weights is None:
        ids, weights = anchor_weights(field, position)
    rots = [field.anchors[i].orientation(t_prime) for i in ids]
    return so3_blend(weights, rots)


# ---------------------------------------------------------------------------
# field dump
# ---------------------------------------------------------------------------

def save_field(path, field: OrientationField) -> None:
    """Text dump, one line per anchor per frame: id t qw qx qy qz x y z.

    A header line carries the field constants for reconstruction.
    """
    with open(path, "w") as f:
        f.write(f"# anchors={field.num_anchors} frames={field.frame_count} "
                f"window={field.window} k={field.k_neighbors}\n")
        for a in field.anchors:
            for t in range(1, field.frame_count + 1):
                vals = [*a.quats[t - 1], *a.positions[t - 1]]
                flag = int(a.valid[t - 1])
                f.write(f"{a.anchor_id} {t} " + " ".join("%.17g" % v for v in vals) + f" {flag}\n")


def load_field(path) -> OrientationField:
    header = None
    rows = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None:
                    header = dict(kv.split("=") for kv in line[1:].split())
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ParseError(f"expected 10 fields, got {len(parts)}", path=path, line=lineno)
            aid, t = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:9]]
            flag = int(parts[9])
            rows.setdefault(aid, []).append((t, vals, flag))
    if header is None:
        raise ParseError("missing field header", path=path)
    t_count = int(header["frames"])
    anchors = []
    for aid in sorted(rows):
        entries = sorted(rows[aid])
        if [e[0] for e in entries] != list(range(1, t_count + 1)):
            raise ParseError(f"anchor {aid} does not cover frames 1..{t_count}", path=path)
        quats = np.array([e[1][0:4] for e in entries])
        norms = np.linalg.norm(quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6) or np.any(quats[:, 0] < -1e-12):
            raise ParseError(f"anchor {aid} has non-canonical quaternions", path=path)
        positions = np.array([e[1][4:7] for e in entries])
        valid = np.array([bool(e[2]) for e in entries])
        anchors.append(OrientedAnchor(aid, positions, quats, valid))
    out = OrientationField(anchors, t_count, int(header["window"]), int(header["k"]))
    rebuilt = build_orientation_field(
        [Trajectory(a.positions, a.valid) for a in anchors], out.window, out.k_neighbors
    )
    out.neighbor_indices = rebuilt.neighbor_indices
    return out
