"""Geometric and statistical kernels: PCA, Kabsch alignment, SO(3) exp/log,
quaternion and dual-quaternion algebra, weighted rotation blending.

Conventions:
- Quaternions are stored scalar-first ``[w, x, y, z]`` and act on column
  vectors: ``v' = R(q) @ v``.
- Canonical sign is ``w >= 0`` (q and -q encode the same rotation).
- Tangent vectors live in so(3) as ``angle * unit_axis`` (radians).

The ``quat_*`` functions are vectorized over leading axes and operate on raw
arrays; the thin ``Rotation`` / ``RigidTransform`` / ``DualQuaternion``
wrappers enforce invariants at construction and are the currency of the
module-level APIs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BranchAmbiguityError, DegenerateBlendError, DegenerateInputError

UNIT_TOL = 1e-9
BRANCH_MARGIN = 1e-6


# ---------------------------------------------------------------------------
# vectorized quaternion kernels (shape (..., 4), scalar-first)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, broadcasting over leading axes."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_norm(q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(q * q, axis=-1))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = quat_norm(q)
    if np.any(n < 1e-12):
        raise DegenerateInputError("cannot normalize a near-zero quaternion")
    return q / n[..., None]


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is nonnegative."""
    flip = np.where(q[..., 0] < 0.0, -1.0, 1.0)
    return q * flip[..., None]


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; shape (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix (Shepperd's method), canonical sign."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
    return quat_canonical(quat_normalize(q))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    qv = q[..., 1:]
    w = q[..., 0:1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


_SMALL_ANGLE = 1e-8


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> unit quaternion; vectorized."""
    v = np.asarray(v, dtype=float)
    theta = np.sqrt(np.sum(v * v, axis=-1))
    half = 0.5 * theta
    # sin(theta/2)/theta with series fallback near zero
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    f = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    w = np.cos(half)
    return np.concatenate([w[..., None], f[..., None] * v], axis=-1)


def quat_log(q: np.ndarray, *, check_branch: bool = True) -> np.ndarray:
    """Logarithm of a unit quaternion with w >= 0; returns (..., 3) tangent.

    Raises BranchAmbiguityError when the rotation angle reaches pi.
    """
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    xyz = q[..., 1:]
    s = np.sqrt(np.sum(xyz * xyz, axis=-1))
    angle = 2.0 * np.arctan2(s, w)
    if check_branch and np.any(angle >= np.pi - BRANCH_MARGIN):
        raise BranchAmbiguityError("rotation angle too close to pi for a unique log")
    small = s < _SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    # 2*atan2(s, w)/s, series 2/w - 2 s^2/(3 w^3) near s = 0
    k = np.where(small, 2.0 / w - 2.0 * s * s / (3.0 * w**3), angle / safe_s)
    return k[..., None] * xyz


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] of unit quaternion(s)."""
    s = np.sqrt(np.sum(q[..., 1:] ** 2, axis=-1))
    return 2.0 * np.arctan2(s, np.abs(q[..., 0]))


# ---------------------------------------------------------------------------
# wrapper types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Unit quaternion with canonical sign (w >= 0)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        q = quat_canonical(quat_normalize(q))
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(quat_identity())

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(mat_to_quat(m))

    @staticmethod
    def about_axis(axis: Sequence[float], angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return Rotation(quat_exp(axis * angle))

    def matrix(self) -> np.ndarray:
        return quat_to_mat(self.q)

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_mul(self.q, other.q))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conj(self.q))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(v, dtype=float))

    def angle_to(self, other: "Rotation") -> float:
        return float(quat_angle(quat_mul(self.q, quat_conj(other.q))))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: x -> R x + t."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self * other)(x) = self(other(x))."""
        r = self.rotation.compose(other.rotation)
        t = self.rotation.apply(other.translation) + self.translation
        return RigidTransform(r, t)

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.rotation.apply(v) + self.translation


@dataclass(frozen=True)
class DualQuaternion:
    """Unit dual quaternion (real + dual part); encodes a rigid transform."""

    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    @staticmethod
    def from_rigid(t: RigidTransform) -> "DualQuaternion":
        r = t.rotation.q
        tq = np.concatenate([[0.0], t.translation])
        return DualQuaternion(r, 0.5 * quat_mul(tq, r))

    def to_rigid(self) -> RigidTransform:
        t = 2.0 * quat_mul(self.dual, quat_conj(self.real))
        return RigidTransform(Rotation(self.real), t[1:])


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def pca3(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal axes of a 3D point set.

    Returns (eigenvectors, eigenvalues) of the point covariance, eigenvalues
    descending and nonnegative, eigenvectors as rows of a 3x3 orthonormal
    matrix (eigenvectors[i] pairs with eigenvalues[i]).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 2:
        raise DegenerateInputError("pca3 needs at least 2 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    return evecs[:, order].T.copy(), evals


class KabschResult(NamedTuple):
    rotation: Rotation
    ambiguous: bool


def kabsch(source: np.ndarray, target: np.ndarray) -> KabschResult:
    """Least-squares rotation aligning source to target (proper, det = +1).

    Both sets are centered internally, so callers pass raw neighborhoods.
    ``ambiguous`` flags a rank-deficient cross-covariance (e.g. collinear
    points), where the minimizer is not unique; the returned rotation is
    still a valid best-effort minimizer.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape or src.shape[0] < 3:
        raise DegenerateInputError("kabsch needs two equal-length sets of >= 3 points")
    src = src - src.mean(axis=0)
    tgt = tgt - tgt.mean(axis=0)
    h = src.T @ tgt
    u, sing, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    r = vt.T @ corr @ u.T
    scale = sing[0] if sing[0] > 0 else 1.0
    ambiguous = bool(sing[1] / scale < 1e-9)
    return KabschResult(Rotation.from_matrix(r), ambiguous)


def so3_exp(v: np.ndarray) -> Rotation:
    return Rotation(quat_exp(np.asarray(v, dtype=float).reshape(3)))


def so3_log(r: Rotation) -> np.ndarray:
    return quat_log(r.q)


def rot_minus(a: Rotation, b: Rotation) -> np.ndarray:
    """Tangent vector of the relative rotation a * b^-1 (so that
    so3_exp(rot_minus(a, b)).compose(b) == a)."""
    rel = quat_canonical(quat_mul(a.q, quat_conj(b.q)))
    return quat_log(rel)


def _blend_quats(weights: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Sign-aligned weighted sum of quaternions (not normalized)."""
    ref = quats[0]
    signs = np.where(quats @ ref < 0.0, -1.0, 1.0)
    return (weights[:, None] * signs[:, None] * quats).sum(axis=0)


def _check_blend_inputs(weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n or n < 1:
        raise DegenerateInputError("weights and inputs must be equal-length and nonempty")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
        raise DegenerateInputError("weights must be nonnegative and sum to 1")
    return w


def dq_blend(weights, transforms: Sequence[RigidTransform]) -> RigidTransform:
    """Weighted dual-quaternion blend of rigid transforms.

    Real parts are sign-aligned to the first entry before averaging; the
    summed dual quaternion is renormalized and re-orthogonalized.
    """
    w = _check_blend_inputs(weights, len(transforms))
    dqs = [DualQuaternion.from_rigid(t) for t in transforms]
    reals = np.stack([d.real for d in dqs])
    duals = np.stack([d.dual for d in dqs])
    signs = np.where(reals @ reals[0] < 0.0, -1.0, 1.0)
    real = (w[:, None] * signs[:, None] * reals).sum(axis=0)
    dual = (w[:, None] * signs[:, None] * duals).sum(axis=0)
    n = np.linalg.norm(real)
    if n < 1e-9:
        raise DegenerateBlendError("dual-quaternion blend collapsed (antipodal inputs)")
    real = real / n
    dual = dual / n
    # restore the unit constraint real . dual = 0
    dual = dual - real * (real @ dual)
    return DualQuaternion(real, dual).to_rigid()


def so3_blend(weights, rotations: Sequence[Rotation]) -> Rotation:
    """Sign-aligned normalized linear quaternion average."""
    w = _check_blend_inputs(weights, len(rotations))
    quats = np.stack([r.q for r in rotations])
    mean = _blend_quats(w, quats)
    if np.linalg.norm(mean) < 1e-9:
        raise DegenerateBlendError("rotation blend collapsed (antipodal inputs)")
    return Rotation(mean)
