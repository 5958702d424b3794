import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat.core_math import (
    DualQuaternion,
    KabschResult,
    RigidTransform,
    Rotation,
    dq_blend,
    kabsch,
    pca3,
    quat_angle,
    rot_minus,
    so3_blend,
    so3_exp,
    so3_log,
)
from anchorsplat.errors import BranchAmbiguityError, DegenerateBlendError, DegenerateInputError

from oracles import alignment_residual, best_grid_residual, karcher_mean, power_iteration_spectrum, so3_grid


def random_rotation(rng):
    return Rotation(rng.normal(size=4))


# ---------------------------------------------------------------------------
# pca3
# ---------------------------------------------------------------------------

def test_pca3_collinear_x_axis():
    pts = np.array([[-1.0, 0, 0], [0, 0, 0], [1.0, 0, 0]])
    vecs, vals = pca3(pts)
    assert np.allclose(np.abs(vecs[0]), [1, 0, 0], atol=1e-12)
    assert np.allclose(vals, [2.0 / 3.0, 0.0, 0.0], atol=1e-12)


def test_pca3_planar_circle():
    angles = np.arange(4) * np.pi / 2
    pts = np.stack([np.cos(angles), np.sin(angles), np.zeros(4)], axis=1)
    vecs, vals = pca3(pts)
    assert np.allclose(np.abs(vecs[2]), [0, 0, 1], atol=1e-12)
    assert vals[2] < 1e-12


def test_pca3_matches_power_iteration_oracle():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 3)) * np.array([3.0, 1.5, 0.4])
    vecs, vals = pca3(pts)
    ovecs, ovals = power_iteration_spectrum(pts)
    assert np.allclose(vals, ovals, atol=1e-6)
    for v, ov in zip(vecs, ovecs):
        assert min(np.linalg.norm(v - ov), np.linalg.norm(v + ov)) < 1e-6


def test_pca3_postconditions():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(20, 3))
    vecs, vals = pca3(pts)
    assert np.allclose(vecs @ vecs.T, np.eye(3), atol=1e-12)
    assert vals[0] >= vals[1] >= vals[2] >= 0
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    recon = vecs.T @ np.diag(vals) @ vecs
    assert np.allclose(recon, cov, atol=1e-8)


def test_pca3_rejects_single_point():
    with pytest.raises(DegenerateInputError):
        pca3(np.array([[1.0, 2.0, 3.0]]))


# ---------------------------------------------------------------------------
# kabsch
# ---------------------------------------------------------------------------

def test_kabsch_recovers_z_rotation():
    src = np.eye(3)
    rz = Rotation.about_axis([0, 0, 1], np.pi / 2)
    tgt = src @ rz.matrix().T
    result = kabsch(src, tgt)
    assert result.rotation.angle_to(rz) < 1e-9
    assert not result.ambiguous


def test_kabsch_identity_on_equal_sets():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(6, 3))
    result = kabsch(pts, pts)
    assert result.rotation.angle_to(Rotation.identity()) < 1e-9


def test_kabsch_reflection_stays_proper_and_near_grid_optimum():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(8, 3))
    tgt = src.copy()
    tgt[:, 2] *= -1.0  # reflection, not a rotation
    result = kabsch(src, tgt)
    assert np.isclose(np.linalg.det(result.rotation.matrix()), 1.0, atol=1e-12)
    grid = so3_grid(100_000, seed=5)
    ours = alignment_residual(result.rotation.matrix(), src, tgt)
    best = best_grid_residual(src, tgt, grid)
    assert ours <= best + 1e-9


def test_kabsch_collinear_flags_ambiguous():
    src = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    result = kabsch(src, src)
    assert result.ambiguous


def test_kabsch_optimality_against_grid():
    rng = np.random.default_rng(42)
    grid = so3_grid(100_000, seed=9)
    for _ in range(20):
        n = rng.integers(3, 11)
        src = rng.normal(size=(n, 3))
        tgt = rng.normal(size=(n, 3))
        rot, _ = kabsch(src, tgt)
        assert alignment_residual(rot.matrix(), src, tgt) <= best_grid_residual(src, tgt, grid) + 1e-9


# ---------------------------------------------------------------------------
# so3 exp / log / rot_minus
# ---------------------------------------------------------------------------

def test_exp_axis_angle_definition():
    r = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    assert r.angle_to(Rotation.about_axis([0, 0, 1], np.pi / 2)) < 1e-12


def test_log_identity_is_zero():
    assert np.allclose(so3_log(Rotation.identity()), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exp_log_round_trip(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    if n > 0:
        v = v / n * rng.uniform(0.0, 3.0)
    r = so3_exp(v)
    assert np.allclose(so3_log(r), v, atol=1e-8)


def test_exp_log_round_trip_bulk():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        v = rng.normal(size=3)
        v = v / max(np.linalg.norm(v), 1e-12) * rng.uniform(0, 3.0)
        assert np.allclose(so3_log(so3_exp(v)), v, atol=1e-8)


def test_log_branch_ambiguity_raises():
    with pytest.raises(BranchAmbiguityError):
        so3_log(Rotation.about_axis([1, 0, 0], np.pi))


def test_rot_minus_trivial_cases():
    a = Rotation.about_axis([0, 0, 1], np.pi / 6)
    assert np.allclose(rot_minus(a, a), 0.0)
    assert np.allclose(rot_minus(a, Rotation.identity()), [0, 0, np.pi / 6], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rot_minus_reconstruction(seed):
    rng = np.random.default_rng(seed)
    a, b = random_rotation(rng), random_rotation(rng)
    try:
        v = rot_minus(a, b)
    except BranchAmbiguityError:
        return
    recon = so3_exp(v).compose(b)
    assert recon.angle_to(a) < 1e-8


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

def test_dq_blend_single_entry():
    t = RigidTransform(Rotation.about_axis([1, 2, 3], 0.7), np.array([0.1, -0.4, 2.0]))
    out = dq_blend([1.0], [t])
    assert out.rotation.angle_to(t.rotation) < 1e-15
    assert np.allclose(out.translation, t.translation, atol=1e-15)


def test_dq_blend_identical_inputs():
    t = RigidTransform(Rotation.about_axis([0, 1, 0], 0.3), np.array([1.0, 2.0, 3.0]))
    out = dq_blend([0.5, 0.5], [t, t])
    assert out.rotation.angle_to(t.rotation) < 1e-12
    assert np.allclose(out.translation, t.translation, atol=1e-12)


def test_dq_blend_bisects_pure_rotations():
    a = RigidTransform(Rotation.identity(), np.zeros(3))
    b = RigidTransform(Rotation.about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
    out = dq_blend([0.5, 0.5], [a, b])
    assert out.rotation.angle_to(Rotation.about_axis([0, 0, 1], np.pi / 4)) < 1e-12
    assert np.allclose(out.translation, 0.0, atol=1e-9)


def test_dq_blend_rotation_only_zero_translation():
    rng = np.random.default_rng(2)
    ts = [RigidTransform(random_rotation(rng), np.zeros(3)) for _ in range(4)]
    # keep rotations in a tight cone so the blend is well conditioned
    base = ts[0].rotation
    ts = [RigidTransform(base.compose(so3_exp(rng.normal(size=3) * 0.1)), np.zeros(3)) for _ in range(4)]
    w = rng.uniform(0.1, 1.0, size=4)
    w /= w.sum()
    out = dq_blend(w, ts)
    assert np.linalg.norm(out.translation) < 1e-9


def test_dq_blend_permutation_invariant():
    rng = np.random.default_rng(5)
    ts = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
    w = np.array([0.2, 0.3, 0.5])
    a = dq_blend(w, ts)
    perm = [2, 0, 1]
    b = dq_blend(w[perm], [ts[i] for i in perm])
    assert a.rotation.angle_to(b.rotation) < 1e-12
    assert np.allclose(a.translation, b.translation, atol=1e-12)


def test_dq_blend_unit_constraint():
    rng = np.random.default_rng(8)
    ts = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(5)]
    w = rng.uniform(0.1, 1, size=5)
    w /= w.sum()
    out = dq_blend(w, ts)
    dq = DualQuaternion.from_rigid(out)
    assert abs(np.linalg.norm(dq.real) - 1.0) < 1e-9
    assert abs(dq.real @ dq.dual) < 1e-9


def test_dq_blend_antipodal_cancellation_raises():
    # both live on the equator orthogonal to the first entry, so sign
    # alignment leaves them opposed and the weighted sum collapses
    ref = RigidTransform(Rotation(np.array([1.0, 0, 0, 0])), np.zeros(3))
    a = RigidTransform(Rotation(np.array([0.0, 0, 0, 1.0])), np.zeros(3))
    b = RigidTransform(Rotation(np.array([0.0, 0, 0, -1.0])), np.zeros(3))
    with pytest.raises(DegenerateBlendError):
        dq_blend([0.0, 0.5, 0.5], [ref, a, b])
    with pytest.raises(DegenerateBlendError):
        so3_blend([0.0, 0.5, 0.5], [ref.rotation, a.rotation, b.rotation])


def test_so3_blend_identity_and_bisector():
    o = Rotation.about_axis([1, 1, 0], 0.4)
    assert so3_blend([0.25, 0.75], [o, o]).angle_to(o) < 1e-12
    mid = so3_blend([0.5, 0.5], [Rotation.identity(), Rotation.about_axis([0, 0, 1], np.pi / 2)])
    assert mid.angle_to(Rotation.about_axis([0, 0, 1], np.pi / 4)) < 1e-12


def test_so3_blend_matches_karcher_oracle_in_cone():
    rng = np.random.default_rng(13)
    for _ in range(10):
        center = random_rotation(rng)
        rots = []
        for _ in range(5):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0, np.deg2rad(30.0) / 2)
            rots.append(center.compose(Rotation.about_axis(axis, angle)))
        w = rng.uniform(0.5, 1.0, size=5)
        w /= w.sum()
        ours = so3_blend(w, rots)
        oracle = Rotation(karcher_mean(np.stack([r.q for r in rots]), w))
        assert ours.angle_to(oracle) < 1e-3


def test_so3_blend_permutation_invariant():
    # sign alignment is referenced to the first entry, so invariance is over
    # hemisphere-consistent inputs (the regime skinning blends operate in)
    rng = np.random.default_rng(21)
    center = random_rotation(rng)
    rots = [center.compose(so3_exp(rng.normal(size=3) * 0.3)) for _ in range(4)]
    w = np.array([0.1, 0.2, 0.3, 0.4])
    perm = [3, 1, 0, 2]
    a = so3_blend(w, rots)
    b = so3_blend(w[perm], [rots[i] for i in perm])
    assert a.angle_to(b) < 1e-12


def test_blend_rejects_bad_weights():
    r = Rotation.identity()
    with pytest.raises(DegenerateInputError):
        so3_blend([0.5, 0.4], [r, r])
    with pytest.raises(DegenerateInputError):
        so3_blend([-0.5, 1.5], [r, r])


# ---------------------------------------------------------------------------
# wrapper types
# ---------------------------------------------------------------------------

def test_rotation_invariants():
    r = Rotation(np.array([-2.0, 1.0, 0.5, -0.25]))
    assert abs(np.linalg.norm(r.q) - 1.0) < 1e-9
    assert r.q[0] >= 0


def test_rigid_transform_inverse_and_associativity():
    rng = np.random.default_rng(17)
    ts = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
    a, b, c = ts
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    p = rng.normal(size=3)
    assert np.allclose(left.apply(p), right.apply(p), atol=1e-9)
    ident = a.compose(a.inverse())
    assert ident.rotation.angle_to(Rotation.identity()) < 1e-9
    assert np.allclose(ident.translation, 0.0, atol=1e-9)


def test_dual_quaternion_round_trip():
    rng = np.random.default_rng(23)
    t = RigidTransform(random_rotation(rng), rng.normal(size=3))
    dq = DualQuaternion.from_rigid(t)
    assert abs(dq.real @ dq.dual) < 1e-9
    back = dq.to_rigid()
    assert back.rotation.angle_to(t.rotation) < 1e-12
    assert np.allclose(back.translation, t.translation, atol=1e-12)


def test_quat_angle_range():
    rng = np.random.default_rng(29)
    for _ in range(50):
        r = random_rotation(rng)
        a = quat_angle(r.q)
        assert 0.0 <= a <= np.pi + 1e-12
