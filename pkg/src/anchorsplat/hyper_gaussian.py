"""Hyperdimensional Gaussian primitives.

Each splatting primitive carries a 13-dimensional dynamic state: a mean over
(position offset 3, scale offset 3, rotation offset 3, time 1, orientation 3
in tangent coordinates) and a factored covariance. Only the 4x4 marginal over
(time, orientation) — stored as a Cholesky factor — and the 9x4 cross block
are parameterized; the geometry marginal is never needed at inference because
deformation uses the conditional mean only.

Conditioning a primitive on a query (t', O') yields the expected geometry
offsets, which modulate the primitive's splatting attributes; proximity of
the query to the canonical state modulates opacity.

Batch kernels (``*_batch``) are vectorized over primitives and are the same
code the optimizer differentiates through; the single-primitive operations
wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import Rotation, quat_canonical, quat_conj, quat_log, quat_mul
from .errors import DegenerateInputError

EPS_DIAG = 1e-4  # floor on the Cholesky diagonal of the (t, O) marginal
EPS_SCALE = 1e-6  # floor on splat scales after modulation
_FLOOR_SCALE = 1e-3  # smoothing width of the softplus-style diagonal floor

DUMP_MAGIC = "ORIGS1"
DUMP_FLOATS = 73  # 14 base + 13 state + 10 chol + 36 cross

_TRIL_R, _TRIL_C = np.tril_indices(4)


# ---------------------------------------------------------------------------
# batch kernels
# ---------------------------------------------------------------------------

def soft_floor(x: np.ndarray) -> np.ndarray:
    """Smooth floor at EPS_DIAG: identity for large x, bounded below by the
    floor, differentiable everywhere."""
    t = (np.asarray(x, dtype=float) - EPS_DIAG) / _FLOOR_SCALE
    sp = np.where(t > 0, t + np.log1p(np.exp(-np.abs(t))), np.log1p(np.exp(np.minimum(t, 0.0))))
    return EPS_DIAG + _FLOOR_SCALE * sp


def soft_floor_deriv(x: np.ndarray) -> np.ndarray:
    t = (np.asarray(x, dtype=float) - EPS_DIAG) / _FLOOR_SCALE
    return 1.0 / (1.0 + np.exp(-t))


def unpack_chol(packed: np.ndarray) -> np.ndarray:
    """Packed lower-triangle (..., 10) -> full (..., 4, 4) with zeros above."""
    packed = np.asarray(packed, dtype=float)
    out = np.zeros(packed.shape[:-1] + (4, 4))
    out[..., _TRIL_R, _TRIL_C] = packed
    return out


def pack_chol(full: np.ndarray) -> np.ndarray:
    return np.asarray(full)[..., _TRIL_R, _TRIL_C]


def effective_chol(packed_raw: np.ndarray) -> np.ndarray:
    """Lower-triangular factor with the diagonal floored (read-time view)."""
    l_mat = unpack_chol(packed_raw)
    idx = np.arange(4)
    l_mat[..., idx, idx] = soft_floor(l_mat[..., idx, idx])
    return l_mat


def tri_solve_lower(l_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L y = rhs for lower-triangular 4x4 L, vectorized over leading axes."""
    y0 = rhs[..., 0] / l_mat[..., 0, 0]
    y1 = (rhs[..., 1] - l_mat[..., 1, 0] * y0) / l_mat[..., 1, 1]
    y2 = (rhs[..., 2] - l_mat[..., 2, 0] * y0 - l_mat[..., 2, 1] * y1) / l_mat[..., 2, 2]
    y3 = (
        rhs[..., 3] - l_mat[..., 3, 0] * y0 - l_mat[..., 3, 1] * y1 - l_mat[..., 3, 2] * y2
    ) / l_mat[..., 3, 3]
    return np.stack([y0, y1, y2, y3], axis=-1)


def tri_solve_upper(l_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L^T z = rhs (upper-triangular back substitution)."""
    z3 = rhs[..., 3] / l_mat[..., 3, 3]
    z2 = (rhs[..., 2] - l_mat[..., 3, 2] * z3) / l_mat[..., 2, 2]
    z1 = (rhs[..., 1] - l_mat[..., 2, 1] * z2 - l_mat[..., 3, 1] * z3) / l_mat[..., 1, 1]
    z0 = (
        rhs[..., 0] - l_mat[..., 1, 0] * z1 - l_mat[..., 2, 0] * z2 - l_mat[..., 3, 0] * z3
    ) / l_mat[..., 0, 0]
    return np.stack([z0, z1, z2, z3], axis=-1)


def marginal_solve(l_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Sigma_(t,O)^-1 rhs via the two triangular solves."""
    return tri_solve_upper(l_mat, tri_solve_lower(l_mat, rhs))


def orientation_residual(o_prime_quat: np.ndarray, mu_o_quat: np.ndarray) -> np.ndarray:
    """Tangent of O' relative to the canonical orientation, principal branch."""
    rel = quat_mul(o_prime_quat, quat_conj(mu_o_quat))
    n = np.sqrt(np.sum(rel * rel, axis=-1))
    rel = quat_canonical(rel / n[..., None])
    return quat_log(rel)


def residual_batch(t_prime, o_prime_quat, mu_t, mu_o_quat) -> np.ndarray:
    """(t' - mu_t, O' ominus mu_O) stacked as (..., 4)."""
    rho = orientation_residual(o_prime_quat, mu_o_quat)
    dt = np.asarray(t_prime, dtype=float) - np.asarray(mu_t, dtype=float)
    return np.concatenate([dt[..., None], rho], axis=-1)


def condition_mean_batch(mu_geo: np.ndarray, c_cross: np.ndarray, l_eff: np.ndarray,
                         resid: np.ndarray):
    """Conditional mean of the geometry block given the residual.

    Returns (mean (..., 9), z (..., 4)) where z = Sigma_(t,O)^-1 resid is
    reused by the backward pass.
    """
    z = marginal_solve(l_eff, resid)
    mean = mu_geo + np.einsum("...ij,...j->...i", c_cross, z)
    return mean, z


def opacity_factor_batch(l_eff: np.ndarray, resid: np.ndarray):
    """Confidence factor exp(-0.5 [dt^2/Sigma_t + rho^T Sigma_O^-1 rho]).

    Returns (factor, aux) with intermediates for the backward pass.
    """
    sigma = l_eff @ np.swapaxes(l_eff, -1, -2)
    sigma_t = sigma[..., 0, 0]
    sigma_o = sigma[..., 1:, 1:]
    rho = resid[..., 1:]
    so_inv_rho = np.linalg.solve(sigma_o, rho[..., None])[..., 0]
    quad = resid[..., 0] ** 2 / sigma_t + np.sum(rho * so_inv_rho, axis=-1)
    factor = np.exp(-0.5 * quad)
    aux = {"sigma": sigma, "sigma_t": sigma_t, "so_inv_rho": so_inv_rho, "factor": factor}
    return factor, aux


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass
class DynamicStateMean:
    mu_dp: np.ndarray  # (3,) position offset
    mu_dscale: np.ndarray  # (3,) scale offset
    mu_drot: np.ndarray  # (3,) rotation offset, tangent coordinates
    mu_t: float  # normalized time in [0, 1]
    mu_o: Rotation  # canonical orientation

    def __post_init__(self):
        self.mu_dp = np.asarray(self.mu_dp, dtype=float).reshape(3)
        self.mu_dscale = np.asarray(self.mu_dscale, dtype=float).reshape(3)
        self.mu_drot = np.asarray(self.mu_drot, dtype=float).reshape(3)
        self.mu_t = float(self.mu_t)

    def geometry_mean(self) -> np.ndarray:
        return np.concatenate([self.mu_dp, self.mu_dscale, self.mu_drot])


@dataclass
class FactoredCovariance:
    """Cholesky factor of the (t, O) marginal plus the geometry cross block.

    ``chol_raw`` holds the packed lower triangle as stored/learned; the
    diagonal floor is applied when reading (see effective_chol).
    """

    chol_raw: np.ndarray  # (10,) packed lower triangle
    c_cross: np.ndarray  # (9, 4)

    def __post_init__(self):
        self.chol_raw = np.asarray(self.chol_raw, dtype=float).reshape(10)
        self.c_cross = np.asarray(self.c_cross, dtype=float).reshape(9, 4)

    @staticmethod
    def default() -> "FactoredCovariance":
        return FactoredCovariance(pack_chol(0.3 * np.eye(4)), np.zeros((9, 4)))

    def chol(self) -> np.ndarray:
        """Effective lower-triangular factor (4, 4) with floored diagonal."""
        return effective_chol(self.chol_raw)

    def marginal(self) -> np.ndarray:
        l_mat = self.chol()
        return l_mat @ l_mat.T


@dataclass
class HyperGaussian:
    mu_p: np.ndarray  # (3,)
    scale: np.ndarray  # (3,) positive
    rotation: Rotation
    opacity: float  # [0, 1]
    color: np.ndarray  # (3,) in [0, 1]
    state: DynamicStateMean
    cov: FactoredCovariance

    def __post_init__(self):
        self.mu_p = np.asarray(self.mu_p, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        self.opacity = float(self.opacity)
        if np.any(self.scale < EPS_SCALE):
            raise DegenerateInputError("scales must be >= EPS_SCALE")
        if not (0.0 <= self.opacity <= 1.0):
            raise DegenerateInputError("opacity must lie in [0, 1]")


@dataclass
class QueryContext:
    t_prime: float
    o_prime: Rotation

    def __post_init__(self):
        self.t_prime = float(self.t_prime)


# ---------------------------------------------------------------------------
# single-primitive operations
# ---------------------------------------------------------------------------

def residual(ctx: QueryContext, state: DynamicStateMean) -> np.ndarray:
    """[t' - mu_t, O' ominus mu_O] as a length-4 vector."""
    return residual_batch(ctx.t_prime, ctx.o_prime.q, state.mu_t, state.mu_o.q)


def condition_mean(hg: HyperGaussian, ctx: QueryContext):
    """Conditional geometry mean given the query; returns (dp, dscale, drot)."""
    r = residual(ctx, hg.state)
    mean, _ = condition_mean_batch(hg.state.geometry_mean(), hg.cov.c_cross, hg.cov.chol(), r)
    return mean[0:3], mean[3:6], mean[6:9]


def condition_covariance(hg: HyperGaussian, marginal_geom: np.ndarray) -> np.ndarray:
    """Conditional geometry covariance given a caller-supplied 9x9 SPD
    geometry marginal (the factored parameterization does not store one)."""
    marginal_geom = np.asarray(marginal_geom, dtype=float)
    if marginal_geom.shape != (9, 9):
        raise DegenerateInputError("geometry marginal must be 9x9")
    try:
        np.linalg.cholesky(0.5 * (marginal_geom + marginal_geom.T))
    except np.linalg.LinAlgError:
        raise DegenerateInputError("geometry marginal must be SPD")
    l_eff = hg.cov.chol()
    c = hg.cov.c_cross
    gain = marginal_solve(l_eff, c)  # solves along the last axis: (9, 4)
    out = marginal_geom - c @ gain.T
    return 0.5 * (out + out.T)


def modulate_geometry(hg: HyperGaussian, deformed_mu_p: np.ndarray, deformed_rot: Rotation,
                      ctx: QueryContext):
    """Apply the conditional geometry mean to the anchor-deformed pose.

    Position is additive, scale is additive with a floor, rotation composes
    with exp of the rotation offset.
    """
    dp, dscale, drot = condition_mean(hg, ctx)
    mu_p_hat = np.asarray(deformed_mu_p, dtype=float) + dp
    s_hat = np.maximum(hg.scale + dscale, EPS_SCALE)
    from .core_math import so3_exp

    r_hat = deformed_rot.compose(so3_exp(drot))
    return mu_p_hat, s_hat, r_hat


def modulate_opacity(hg: HyperGaussian, ctx: QueryContext) -> float:
    """Confidence-weighted opacity: the base opacity shrinks with the
    query's Mahalanobis distance from the canonical (t, O) state."""
    r = residual(ctx, hg.state)
    factor, _ = opacity_factor_batch(hg.cov.chol()[None], r[None])
    return float(hg.opacity * factor[0])


# ---------------------------------------------------------------------------
# primitive dump (binary)
# ---------------------------------------------------------------------------

def _state_to_row(hg: HyperGaussian) -> np.ndarray:
    mu_o_tangent = quat_log(hg.state.mu_o.q)
    return np.concatenate(
        [
            hg.mu_p,
            hg.scale,
            hg.rotation.q,
            [hg.opacity],
            hg.color,
            hg.state.mu_dp,
            hg.state.mu_dscale,
            hg.state.mu_drot,
            [hg.state.mu_t],
            mu_o_tangent,
            hg.cov.chol_raw,
            hg.cov.c_cross.reshape(36),
        ]
    )


def _row_to_gaussian(row: np.ndarray) -> HyperGaussian:
    from .core_math import so3_exp

    state = DynamicStateMean(row[14:17], row[17:20], row[20:23], row[23], so3_exp(row[24:27]))
    cov = FactoredCovariance(row[27:37], row[37:73].reshape(9, 4))
    return HyperGaussian(
        mu_p=row[0:3],
        scale=np.maximum(row[3:6], EPS_SCALE),
        rotation=Rotation(row[6:10]),
        opacity=float(np.clip(row[10], 0.0, 1.0)),
        color=row[11:14],
        state=state,
        cov=cov,
    )


def save_primitives(path, gaussians: list[HyperGaussian]) -> None:
    """Binary dump: text header 'ORIGS1 <count>' then little-endian float32
    records in declaration order."""
    rows = np.stack([_state_to_row(g) for g in gaussians]) if gaussians else np.zeros((0, DUMP_FLOATS))
    with open(path, "wb") as f:
        f.write(f"{DUMP_MAGIC} {len(gaussians)}\n".encode("ascii"))
        f.write(rows.astype("<f4").tobytes())


def load_primitives(path) -> list[HyperGaussian]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip().split()
        if len(header) != 2 or header[0] != DUMP_MAGIC:
            raise DegenerateInputError(f"bad primitive dump header: {header}")
        count = int(header[1])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * DUMP_FLOATS:
        raise DegenerateInputError(
            f"primitive dump holds {data.size} floats, expected {count * DUMP_FLOATS}"
        )
    rows = data.reshape(count, DUMP_FLOATS).astype(float)
    return [_row_to_gaussian(rows[i]) for i in range(count)]
